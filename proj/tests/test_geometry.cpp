// Geometry kernel tests. The oracles here are direct-definition
// reimplementations kept independent of the library code they check.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "dapmae/common.hpp"
#include "dapmae/geometry.hpp"

namespace {

using dapmae::DomainId;
using dapmae::MaskSpec;
using dapmae::PatchSet;
using dapmae::PointCloud;
using dapmae::Points;
using dapmae::Rng;
using dapmae::Vec3;

// O(N^2 g) greedy oracle: each round recomputes every candidate's
// distance to the whole selected set from scratch.
std::vector<std::size_t> fps_oracle(const Points& pts, std::size_t g, std::size_t start) {
  std::vector<std::size_t> sel{start};
  while (sel.size() < g) {
    double best_d = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double mind = std::numeric_limits<double>::infinity();
      for (std::size_t s : sel) mind = std::min(mind, (pts[i] - pts[s]).squaredNorm());
      if (mind > best_d) {
        best_d = mind;
        best_i = i;
      }
    }
    sel.push_back(best_i);
  }
  return sel;
}

// Exhaustive-sort oracle for k nearest neighbours.
std::vector<std::size_t> knn_oracle(const Points& pts, const Vec3& c, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < pts.size(); ++i) d.push_back({(pts[i] - c).squaredNorm(), i});
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(d[i].second);
  return out;
}

// Direct-definition O(|a||b|) chamfer oracle.
double chamfer_oracle(const Points& a, const Points& b) {
  double s1 = 0, s2 = 0;
  for (const auto& p : a) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& q : b) m = std::min(m, (p - q).squaredNorm());
    s1 += m;
  }
  for (const auto& q : b) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : a) m = std::min(m, (p - q).squaredNorm());
    s2 += m;
  }
  return s1 / double(a.size()) + s2 / double(b.size());
}

Points random_points(Rng& rng, std::size_t n) {
  Points pts(n);
  for (auto& p : pts) p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return pts;
}

const Points kCorners{{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};

TEST(Fps, CornersMatchesGreedyOracle) {
  EXPECT_EQ(dapmae::fps(kCorners, 2, 0), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(dapmae::fps(kCorners, 2, 0), fps_oracle(kCorners, 2, 0));
}

TEST(Fps, FullSelectionIsPermutation) {
  Rng rng(7);
  Points pts = random_points(rng, 17);
  auto idx = dapmae::fps(pts, 17, 3);
  std::set<std::size_t> uniq(idx.begin(), idx.end());
  EXPECT_EQ(uniq.size(), 17u);
}

TEST(Fps, MatchesOracleOnRandomClouds) {
  Rng rng(11);
  for (int it = 0; it < 25; ++it) {
    Points pts = random_points(rng, 64);
    EXPECT_EQ(dapmae::fps(pts, 8, 0), fps_oracle(pts, 8, 0));
  }
}

TEST(Fps, PrefixProperty) {
  Rng rng(13);
  Points pts = random_points(rng, 40);
  auto a = dapmae::fps(pts, 5, 2);
  auto b = dapmae::fps(pts, 12, 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Fps, Errors) {
  EXPECT_THROW(dapmae::fps({}, 1, 0), std::invalid_argument);
  EXPECT_THROW(dapmae::fps(kCorners, 5, 0), std::invalid_argument);
  EXPECT_THROW(dapmae::fps(kCorners, 2, 4), std::invalid_argument);
  EXPECT_THROW(dapmae::fps(kCorners, 0, 0), std::invalid_argument);
}

TEST(Knn, ZeroDistanceCenter) {
  auto idx = dapmae::knn(kCorners, Vec3(1, 1, 0), 1);
  EXPECT_EQ(idx, (std::vector<std::size_t>{2}));
}

TEST(Knn, LinePointsNearestTwo) {
  Points line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  EXPECT_EQ(dapmae::knn(line, Vec3(0, 0, 0), 2), knn_oracle(line, Vec3(0, 0, 0), 2));
  EXPECT_EQ(dapmae::knn(line, Vec3(0, 0, 0), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(Knn, TieBreaksToLowerIndex) {
  Points pts{{1, 0, 0}, {-1, 0, 0}, {5, 0, 0}};
  EXPECT_EQ(dapmae::knn(pts, Vec3(0, 0, 0), 2), (std::vector<std::size_t>{0, 1}));
  Points swapped{{-1, 0, 0}, {1, 0, 0}, {5, 0, 0}};
  EXPECT_EQ(dapmae::knn(swapped, Vec3(0, 0, 0), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(Knn, MatchesOracleAndOrdering) {
  Rng rng(17);
  for (int it = 0; it < 20; ++it) {
    Points pts = random_points(rng, 50);
    Vec3 c(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    auto idx = dapmae::knn(pts, c, 9);
    EXPECT_EQ(idx, knn_oracle(pts, c, 9));
    double prev = -1;
    for (std::size_t i : idx) {
      double d = (pts[i] - c).squaredNorm();
      EXPECT_GE(d, prev);
      prev = d;
    }
    // every omitted point at distance >= the k-th kept distance
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(idx.begin(), idx.end(), i) == idx.end()) {
        EXPECT_GE((pts[i] - c).squaredNorm(), prev);
      }
    }
  }
  EXPECT_THROW(dapmae::knn(kCorners, Vec3(0, 0, 0), 5), std::invalid_argument);
}

TEST(Patchify, CenterRowIsZeroTriple) {
  Rng rng(19);
  PointCloud cloud{random_points(rng, 30), DomainId::Object, "t"};
  PatchSet ps = dapmae::patchify(cloud, 4, 5, 0);
  for (std::size_t i = 0; i < ps.g; ++i) {
    bool found_zero = false;
    for (std::size_t j = 0; j < ps.k; ++j)
      if (ps.patches[i][j].norm() == 0.0) found_zero = true;
    EXPECT_TRUE(found_zero);
  }
  EXPECT_TRUE(std::all_of(ps.vis_mask.begin(), ps.vis_mask.end(), [](bool v) { return v; }));
}

TEST(Patchify, DegenerateSinglePatchCoversCloud) {
  Rng rng(23);
  PointCloud cloud{random_points(rng, 12), DomainId::Face, "t"};
  PatchSet ps = dapmae::patchify(cloud, 1, 12, 0);
  EXPECT_EQ(ps.g, 1u);
  std::set<std::size_t> covered(ps.source_indices[0].begin(), ps.source_indices[0].end());
  EXPECT_EQ(covered.size(), 12u);
}

TEST(Patchify, RoundTripBitExact) {
  Rng rng(29);
  PointCloud cloud{random_points(rng, 128), DomainId::Scene, "t"};
  PatchSet ps = dapmae::patchify(cloud, 16, 8, 0);
  for (std::size_t i = 0; i < ps.g; ++i)
    for (std::size_t j = 0; j < ps.k; ++j) {
      Vec3 rec = ps.patches[i][j] + ps.centers[i];
      const Vec3& orig = cloud.points[ps.source_indices[i][j]];
      EXPECT_EQ(rec.x(), orig.x());
      EXPECT_EQ(rec.y(), orig.y());
      EXPECT_EQ(rec.z(), orig.z());
    }
}

PatchSet fresh_patchset(std::size_t g) {
  Rng rng(31);
  PointCloud cloud{random_points(rng, 4 * g), DomainId::Object, "t"};
  return dapmae::patchify(cloud, g, 4, 0);
}

TEST(MaskSplit, RoundingRule) {
  PatchSet ps = fresh_patchset(128);
  PatchSet masked = dapmae::mask_split(ps, MaskSpec{0.6, 1});
  EXPECT_EQ(masked.masked_count(), 77u);  // round(76.8)
  EXPECT_EQ(masked.visible_count(), 51u);
}

TEST(MaskSplit, ZeroRatio) {
  PatchSet ps = fresh_patchset(16);
  EXPECT_EQ(dapmae::mask_split(ps, MaskSpec{0.0, 5}).masked_count(), 0u);
}

TEST(MaskSplit, DeterministicAndSeedSensitive) {
  PatchSet ps = fresh_patchset(32);
  auto a = dapmae::mask_split(ps, MaskSpec{0.5, 99});
  auto b = dapmae::mask_split(ps, MaskSpec{0.5, 99});
  EXPECT_EQ(a.vis_mask, b.vis_mask);
  std::set<std::vector<bool>> distinct;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    distinct.insert(dapmae::mask_split(ps, MaskSpec{0.5, seed}).vis_mask);
  EXPECT_GE(distinct.size(), 2u);
}

TEST(MaskSplit, Errors) {
  PatchSet ps = fresh_patchset(8);
  EXPECT_THROW(dapmae::mask_split(ps, MaskSpec{1.0, 0}), std::invalid_argument);
  EXPECT_THROW(dapmae::mask_split(ps, MaskSpec{-0.1, 0}), std::invalid_argument);
  PatchSet pre = dapmae::mask_split(ps, MaskSpec{0.5, 0});
  EXPECT_THROW(dapmae::mask_split(pre, MaskSpec{0.5, 0}), std::invalid_argument);
}

TEST(Chamfer, KnownValues) {
  Points a{{0, 0, 0}};
  Points b{{1, 0, 0}};
  EXPECT_DOUBLE_EQ(dapmae::chamfer(a, a), 0.0);
  EXPECT_DOUBLE_EQ(dapmae::chamfer(a, b), 2.0);
  Points c{{0, 0, 0}, {2, 0, 0}};
  EXPECT_DOUBLE_EQ(dapmae::chamfer(c, b), 2.0);
  EXPECT_DOUBLE_EQ(dapmae::chamfer(c, b), chamfer_oracle(c, b));
  EXPECT_THROW(dapmae::chamfer({}, b), std::invalid_argument);
}

TEST(Chamfer, OracleSymmetryAndTranslation) {
  Rng rng(37);
  for (int it = 0; it < 20; ++it) {
    Points a = random_points(rng, 20);
    Points b = random_points(rng, 15);
    double ab = dapmae::chamfer(a, b);
    EXPECT_EQ(ab, dapmae::chamfer(b, a));
    EXPECT_NEAR(ab, chamfer_oracle(a, b), 1e-12 * std::max(1.0, ab));
    Vec3 t(0.3, -0.7, 0.2);
    Points at = a, bt = b;
    for (auto& p : at) p += t;
    for (auto& p : bt) p += t;
    EXPECT_NEAR(dapmae::chamfer(at, bt), ab, 1e-6 * std::max(1.0, ab));
  }
}

TEST(Normalize, FixedPointAndDegenerate) {
  Points already{{1, 0, 0}, {-1, 0, 0}, {0, 0.5, 0}, {0, -0.5, 0}};
  PointCloud cloud{already, DomainId::Object, "t"};
  PointCloud out = dapmae::normalize_cloud(cloud);
  for (std::size_t i = 0; i < already.size(); ++i)
    EXPECT_NEAR((out.points[i] - already[i]).norm(), 0.0, 1e-7);

  PointCloud single{{{5, 5, 5}}, DomainId::Face, "s"};
  PointCloud sout = dapmae::normalize_cloud(single);
  EXPECT_EQ(sout.points[0].norm(), 0.0);
}

TEST(Normalize, CubeCornersAndInvariants) {
  Points cube;
  for (int x : {-2, 2})
    for (int y : {-2, 2})
      for (int z : {-2, 2}) cube.push_back(Vec3(x, y, z));
  PointCloud out = dapmae::normalize_cloud({cube, DomainId::Object, "c"});
  // independent recomputation: centroid 0, scale 2*sqrt(3)
  const double expect = 1.0;
  double max_norm = 0;
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : out.points) {
    centroid += p;
    max_norm = std::max(max_norm, p.norm());
  }
  EXPECT_NEAR(max_norm, expect, 1e-6);
  EXPECT_NEAR(centroid.norm() / double(out.points.size()), 0.0, 1e-6);
  for (const auto& p : out.points)
    EXPECT_NEAR(std::abs(p.x()) * 2.0 * std::sqrt(3.0), 2.0, 1e-9);
}

}  // namespace
