// SPDX-License-Identifier: Apache-2.0
//
// Deterministic, parameter-free point-cloud kernels: farthest point
// sampling, k-nearest neighbours, patch grouping, random patch masking
// and chamfer distance. All distance work is done in double precision;
// ties always break toward the lowest index so results are reproducible.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dapmae/common.hpp"

namespace dapmae {

using Vec3 = Eigen::Vector3d;
using Points = std::vector<Vec3>;

/// The three point-cloud data regimes. Integer codes are stable and used
/// on disk.
enum class DomainId : std::uint8_t { Object = 0, Face = 1, Scene = 2 };

inline const char* domain_name(DomainId d) {
  switch (d) {
    case DomainId::Object: return "object";
    case DomainId::Face: return "face";
    case DomainId::Scene: return "scene";
  }
  return "?";
}

inline DomainId domain_from_code(std::uint8_t code) {
  if (code > 2) throw std::invalid_argument("domain code out of range: " + std::to_string(code));
  return static_cast<DomainId>(code);
}

struct PointCloud {
  Points points;
  DomainId domain = DomainId::Object;
  std::string id;

  std::size_t size() const { return points.size(); }
};

/// Grouped patches: g centers (a subset of the cloud) with k neighbours
/// each, stored relative to their center. vis_mask[i] == false marks
/// patch i as masked.
struct PatchSet {
  Points centers;                                // g
  std::vector<Points> patches;                   // g x k, center-relative
  std::vector<std::vector<std::size_t>> source_indices;  // g x k
  std::vector<bool> vis_mask;                    // g
  std::size_t g = 0;
  std::size_t k = 0;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (bool v : vis_mask) n += v ? 0 : 1;
    return n;
  }
  std::size_t visible_count() const { return g - masked_count(); }
};

struct MaskSpec {
  double ratio = 0.6;      // fraction of patches hidden, in [0, 1)
  std::uint64_t seed = 0;
};

inline double squared_dist(const Vec3& a, const Vec3& b) {
  return (a - b).squaredNorm();
}

/// Start index whose choice does not depend on point order: the point
/// farthest from the centroid (lowest index on ties). Using it as the
/// FPS seed makes patchification stable under permutations of the
/// input, so re-sampled epochs see the same patch structure.
inline std::size_t stable_start(const Points& points) {
  if (points.empty()) throw std::invalid_argument("stable_start: empty point set");
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : points) centroid += p;
  centroid /= static_cast<double>(points.size());
  std::size_t best = 0;
  double best_dist = -1.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double d = (points[i] - centroid).squaredNorm();
    if (d > best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

/// Farthest point sampling. Greedy max-min selection starting from
/// `start`: each step picks the point with the largest distance to the
/// already-selected set, lowest index on ties.
inline std::vector<std::size_t> fps(const Points& points, std::size_t g,
                                    std::size_t start = 0) {
  const std::size_t n = points.size();
  if (n == 0) throw std::invalid_argument("fps: empty point set");
  if (g < 1 || g > n) throw std::invalid_argument("fps: g must be in [1, N]");
  if (start >= n) throw std::invalid_argument("fps: start index out of range");

  std::vector<std::size_t> picked;
  picked.reserve(g);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());

  std::size_t current = start;
  picked.push_back(current);
  while (picked.size() < g) {
    std::size_t best = 0;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = squared_dist(points[i], points[current]);
      if (d < min_dist[i]) min_dist[i] = d;
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
    picked.push_back(current);
  }
  return picked;
}

/// Indices of the k nearest points to `center`, ascending by squared
/// distance, lowest index first on ties.
inline std::vector<std::size_t> knn(const Points& points, const Vec3& center,
                                    std::size_t k) {
  const std::size_t n = points.size();
  if (k > n) throw std::invalid_argument("knn: k exceeds point count");

  std::vector<std::pair<double, std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = {squared_dist(points[i], center), i};
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                    order.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = order[i].second;
  return out;
}

/// FPS centers + KNN neighbourhoods, stored center-relative. All patches
/// start visible.
inline PatchSet patchify(const PointCloud& cloud, std::size_t g, std::size_t k,
                         std::size_t start = 0) {
  const auto& pts = cloud.points;
  PatchSet ps;
  ps.g = g;
  ps.k = k;
  auto center_idx = fps(pts, g, start);
  ps.centers.reserve(g);
  ps.patches.reserve(g);
  ps.source_indices.reserve(g);
  for (std::size_t ci : center_idx) {
    const Vec3& c = pts[ci];
    ps.centers.push_back(c);
    auto nbr = knn(pts, c, k);
    Points rel(k);
    for (std::size_t j = 0; j < k; ++j) rel[j] = pts[nbr[j]] - c;
    ps.patches.push_back(std::move(rel));
    ps.source_indices.push_back(std::move(nbr));
  }
  ps.vis_mask.assign(g, true);
  return ps;
}

/// Flags round(m*G) patches as masked, drawn uniformly without
/// replacement from a generator seeded by spec.seed.
inline PatchSet mask_split(const PatchSet& ps, const MaskSpec& spec) {
  if (spec.ratio < 0.0 || spec.ratio >= 1.0)
    throw std::invalid_argument("mask_split: ratio must be in [0, 1)");
  for (bool v : ps.vis_mask)
    if (!v) throw std::invalid_argument("mask_split: patch set already masked");

  PatchSet out = ps;
  const std::size_t g = ps.g;
  const auto masked = static_cast<std::size_t>(std::floor(spec.ratio * static_cast<double>(g) + 0.5));

  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < masked; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(g - i));
    std::swap(order[i], order[j]);
  }
  for (std::size_t i = 0; i < masked; ++i) out.vis_mask[order[i]] = false;
  return out;
}

/// Symmetric chamfer distance between two point multisets:
/// mean over a of the squared distance to the nearest b, plus the same
/// with roles swapped.
inline double chamfer(const Points& a, const Points& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point set");
  double sum_ab = 0.0;
  for (const Vec3& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& q : b) best = std::min(best, squared_dist(p, q));
    sum_ab += best;
  }
  double sum_ba = 0.0;
  for (const Vec3& q : b) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& p : a) best = std::min(best, squared_dist(p, q));
    sum_ba += best;
  }
  return sum_ab / static_cast<double>(a.size()) + sum_ba / static_cast<double>(b.size());
}

/// Centers the cloud on its centroid and scales the farthest point to
/// unit norm. A degenerate cloud (all points coincident) maps to the
/// origin with scale 1.
inline PointCloud normalize_cloud(const PointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("normalize_cloud: empty cloud");
  PointCloud out = cloud;
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : out.points) centroid += p;
  centroid /= static_cast<double>(out.points.size());
  double max_norm = 0.0;
  for (Vec3& p : out.points) {
    p -= centroid;
    max_norm = std::max(max_norm, p.norm());
  }
  if (max_norm > 1e-12) {
    for (Vec3& p : out.points) p /= max_norm;
  }
  return out;
}

}  // namespace dapmae
