// SPDX-License-Identifier: Apache-2.0
//
// Procedural tri-domain point clouds (object / face / scene surrogates),
// the DPC1 binary cloud format, corpus manifests and domain-aware batch
// assembly. Everything is a pure function of its seeds.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "dapmae/common.hpp"
#include "dapmae/geometry.hpp"

namespace dapmae {

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

namespace synth {

// The volatile store keeps GCC's SLP vectorizer (-O3) from eliding the
// narrowing cast; generated coordinates must be exactly f32 so DPC1
// round-trips are bit-identical.
inline double to_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

inline Vec3 round_f32(const Vec3& p) {
  return Vec3(to_f32(p.x()), to_f32(p.y()), to_f32(p.z()));
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  if (q.norm() < 1e-9) q = Eigen::Quaterniond::Identity();
  q.normalize();
  return q.toRotationMatrix();
}

inline Vec3 sample_sphere(Rng& rng, double radius) {
  Vec3 dir(rng.normal(), rng.normal(), rng.normal());
  double n = dir.norm();
  if (n < 1e-9) dir = Vec3(1, 0, 0); else dir /= n;
  return dir * radius;
}

inline Vec3 sample_box(Rng& rng, const Vec3& half) {
  // Face picked proportionally to its area.
  const double ax = half.y() * half.z();
  const double ay = half.x() * half.z();
  const double az = half.x() * half.y();
  double r = rng.uniform() * (ax + ay + az);
  int axis = r < ax ? 0 : (r < ax + ay ? 1 : 2);
  double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  Vec3 p(rng.uniform(-half.x(), half.x()), rng.uniform(-half.y(), half.y()),
         rng.uniform(-half.z(), half.z()));
  p[axis] = sign * half[axis];
  return p;
}

inline Vec3 sample_cylinder(Rng& rng, double radius, double half_h) {
  const double side = 2.0 * 3.141592653589793 * radius * 2.0 * half_h;
  const double caps = 2.0 * 3.141592653589793 * radius * radius;
  double theta = rng.uniform() * 6.283185307179586;
  if (rng.uniform() * (side + caps) < side) {
    return Vec3(radius * std::cos(theta), rng.uniform(-half_h, half_h),
                radius * std::sin(theta));
  }
  double rr = radius * std::sqrt(rng.uniform());
  double y = rng.uniform() < 0.5 ? -half_h : half_h;
  return Vec3(rr * std::cos(theta), y, rr * std::sin(theta));
}

struct Primitive {
  int type = 0;  // 0 sphere, 1 box, 2 cylinder
  Vec3 center = Vec3::Zero();
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  double r = 0.3;
  Vec3 half = Vec3(0.3, 0.3, 0.3);
  double half_h = 0.3;

  Vec3 sample(Rng& rng) const {
    Vec3 local;
    switch (type) {
      case 0: local = sample_sphere(rng, r); break;
      case 1: local = sample_box(rng, half); break;
      default: local = sample_cylinder(rng, r, half_h); break;
    }
    return rot * local + center;
  }
};

inline Primitive random_primitive(Rng& rng, int type) {
  Primitive p;
  p.type = type;
  p.center = Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
  p.rot = random_rotation(rng);
  double s = rng.uniform(0.2, 0.5);
  p.r = s * rng.uniform(0.6, 1.0);
  p.half = s * Vec3(rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0));
  p.half_h = s * rng.uniform(0.5, 1.2);
  return p;
}

/// Splits n samples across weights (floor of the share, remainder dealt
/// round-robin from the front).
inline std::vector<std::size_t> allocate(const std::vector<double>& w, std::size_t n) {
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<std::size_t> out(w.size(), 0);
  std::size_t used = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::floor(w[i] / total * double(n)));
    used += out[i];
  }
  std::size_t i = 0;
  while (used < n) {  // distribute the remainder deterministically
    out[i % w.size()] += 1;
    ++used;
    ++i;
  }
  return out;
}

/// Object surrogate: 2-4 posed primitive surfaces. The 4-way class
/// (sphere-dominant / box-dominant / cylinder-dominant / mixed) is drawn
/// first and the composite is built to realize it: dominant composites
/// give one large primitive of the class type most of the points, with
/// smaller attachments of the other types; mixed composites hold one
/// primitive of each type at comparable scale and share.
inline PointCloud gen_object(std::uint64_t seed, std::size_t n_points,
                             int* label_out = nullptr) {
  Rng rng(mix_seed(seed, 0x0b1ec7ull));
  const int label = static_cast<int>(rng.below(4));
  std::vector<Primitive> prims;
  std::vector<double> weights;
  if (label < 3) {
    Primitive main = random_primitive(rng, label);
    main.center = Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                       rng.uniform(-0.2, 0.2));
    main.r *= 1.8;
    main.half *= 1.8;
    main.half_h *= 1.8;
    prims.push_back(main);
    weights.push_back(rng.uniform(0.8, 0.9));
    const int extra = 1 + static_cast<int>(rng.below(2));  // 1..2 attachments
    for (int i = 0; i < extra; ++i) {
      int other = (label + 1 + static_cast<int>(rng.below(2))) % 3;
      Primitive p = random_primitive(rng, other);
      p.r *= 0.35;
      p.half *= 0.35;
      p.half_h *= 0.35;
      prims.push_back(p);
      weights.push_back((1.0 - weights[0]) / double(extra));
    }
  } else {
    // Mixed: all three types, comparable scale and share.
    std::array<int, 3> types{0, 1, 2};
    for (int i = 2; i > 0; --i)
      std::swap(types[static_cast<std::size_t>(i)],
                types[static_cast<std::size_t>(rng.below(std::uint64_t(i) + 1))]);
    for (int t : types) {
      prims.push_back(random_primitive(rng, t));
      weights.push_back(rng.uniform(0.30, 0.36));
    }
  }
  auto counts = allocate(weights, n_points);
  PointCloud cloud;
  cloud.domain = DomainId::Object;
  cloud.id = "object_" + std::to_string(seed);
  cloud.points.reserve(n_points);
  for (std::size_t i = 0; i < prims.size(); ++i)
    for (std::size_t j = 0; j < counts[i]; ++j)
      cloud.points.push_back(round_f32(prims[i].sample(rng)));
  if (label_out) *label_out = label;
  return cloud;
}

/// Face surrogate: shallow smooth heightfield over an elliptical mask
/// with a gentle dome and 2-4 Gaussian bumps.
inline PointCloud gen_face(std::uint64_t seed, std::size_t n_points) {
  Rng rng(mix_seed(seed, 0xfacadeull));
  const double a = 1.0, b = 0.8;
  const int bumps = 2 + static_cast<int>(rng.below(3));
  std::vector<Vec3> bump;  // (cx, cy, amp), sigma packed separately
  std::vector<double> sigma;
  for (int i = 0; i < bumps; ++i) {
    double cx, cy;
    do {
      cx = rng.uniform(-a, a);
      cy = rng.uniform(-b, b);
    } while (cx * cx / (a * a) + cy * cy / (b * b) > 0.7);
    bump.emplace_back(cx, cy, rng.uniform(0.05, 0.22));
    sigma.push_back(rng.uniform(0.12, 0.35));
  }
  PointCloud cloud;
  cloud.domain = DomainId::Face;
  cloud.id = "face_" + std::to_string(seed);
  cloud.points.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    double x, y;
    do {
      x = rng.uniform(-a, a);
      y = rng.uniform(-b, b);
    } while (x * x / (a * a) + y * y / (b * b) > 1.0);
    double z = 0.15 * (1.0 - x * x / (a * a) - y * y / (b * b));
    for (int j = 0; j < bumps; ++j) {
      double dx = x - bump[static_cast<std::size_t>(j)].x();
      double dy = y - bump[static_cast<std::size_t>(j)].y();
      double s2 = sigma[static_cast<std::size_t>(j)] * sigma[static_cast<std::size_t>(j)];
      z += bump[static_cast<std::size_t>(j)].z() * std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
    }
    cloud.points.push_back(round_f32(Vec3(x, y, z)));
  }
  return cloud;
}

/// Scene surrogate: floor, two walls, and 3-8 upright boxes scattered on
/// the floor; spatial extent 5-10x the object scale before
/// normalization.
inline PointCloud gen_scene(std::uint64_t seed, std::size_t n_points) {
  Rng rng(mix_seed(seed, 0x5ce2eull));
  const double extent = rng.uniform(5.0, 10.0);
  const double wall_h = rng.uniform(1.5, 3.0);
  const int n_boxes = 3 + static_cast<int>(rng.below(6));
  struct SceneBox { Vec3 center; Vec3 half; double yaw; };
  std::vector<SceneBox> boxes;
  for (int i = 0; i < n_boxes; ++i) {
    Vec3 half(rng.uniform(0.15, 0.6), rng.uniform(0.15, 0.6), rng.uniform(0.15, 0.6));
    boxes.push_back({Vec3(rng.uniform(0.1, 0.9) * extent, half.y(),
                          rng.uniform(0.1, 0.9) * extent),
                     half, rng.uniform(0.0, 6.283185307179586)});
  }
  std::vector<double> weights{extent * extent, 2.0 * extent * wall_h};
  for (const auto& bx : boxes)
    weights.push_back(8.0 * (bx.half.x() * bx.half.y() + bx.half.y() * bx.half.z() +
                             bx.half.x() * bx.half.z()));
  auto counts = allocate(weights, n_points);

  PointCloud cloud;
  cloud.domain = DomainId::Scene;
  cloud.id = "scene_" + std::to_string(seed);
  cloud.points.reserve(n_points);
  for (std::size_t i = 0; i < counts[0]; ++i)
    cloud.points.push_back(round_f32(
        Vec3(rng.uniform() * extent, 0.0, rng.uniform() * extent)));
  for (std::size_t i = 0; i < counts[1]; ++i) {
    if (rng.uniform() < 0.5)
      cloud.points.push_back(round_f32(
          Vec3(0.0, rng.uniform() * wall_h, rng.uniform() * extent)));
    else
      cloud.points.push_back(round_f32(
          Vec3(rng.uniform() * extent, rng.uniform() * wall_h, 0.0)));
  }
  for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
    const auto& bx = boxes[bi];
    Eigen::Matrix3d rot =
        Eigen::AngleAxisd(bx.yaw, Vec3::UnitY()).toRotationMatrix();
    for (std::size_t i = 0; i < counts[bi + 2]; ++i)
      cloud.points.push_back(round_f32(rot * sample_box(rng, bx.half) + bx.center));
  }
  return cloud;
}

}  // namespace synth

/// Deterministic synthetic cloud for (domain, seed, n_points).
inline PointCloud gen_synthetic(DomainId domain, std::uint64_t seed,
                                std::size_t n_points) {
  if (n_points < 16)
    throw std::invalid_argument("gen_synthetic: n_points must be >= 16");
  switch (domain) {
    case DomainId::Object: return synth::gen_object(seed, n_points);
    case DomainId::Face: return synth::gen_face(seed, n_points);
    case DomainId::Scene: return synth::gen_scene(seed, n_points);
  }
  throw std::invalid_argument("gen_synthetic: bad domain");
}

/// Object surrogate with its 4-way composite class label.
inline PointCloud gen_labeled_object(std::uint64_t seed, std::size_t n_points,
                                     int* label) {
  if (n_points < 16)
    throw std::invalid_argument("gen_labeled_object: n_points must be >= 16");
  return synth::gen_object(seed, n_points, label);
}

// ---------------------------------------------------------------------------
// DPC1 binary format
// ---------------------------------------------------------------------------
//
// Little-endian layout:
//   0  magic "DPC1"
//   4  version u32 (1)
//   8  domain u8
//   9  reserved u8[3]
//   12 point count u32
//   16 count * 3 * f32 payload

inline void save_dpc(const PointCloud& cloud, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_dpc: cannot open " + path);
  f.write("DPC1", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint8_t domain = static_cast<std::uint8_t>(cloud.domain);
  f.write(reinterpret_cast<const char*>(&domain), 1);
  const char zeros[3] = {0, 0, 0};
  f.write(zeros, 3);
  auto count = static_cast<std::uint32_t>(cloud.points.size());
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const Vec3& p : cloud.points) {
    float xyz[3] = {float(p.x()), float(p.y()), float(p.z())};
    f.write(reinterpret_cast<const char*>(xyz), 12);
  }
  if (!f) throw std::runtime_error("save_dpc: write failed for " + path);
}

inline PointCloud load_dpc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dpc: cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "DPC1", 4) != 0)
    throw FormatError("load_dpc: bad magic", 0);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (f.gcount() != 4) throw FormatError("load_dpc: truncated header", 4);
  if (version != 1)
    throw FormatError("load_dpc: unsupported version " + std::to_string(version), 4);
  std::uint8_t domain = 0;
  f.read(reinterpret_cast<char*>(&domain), 1);
  if (f.gcount() != 1) throw FormatError("load_dpc: truncated header", 8);
  if (domain > 2) throw FormatError("load_dpc: bad domain code", 8);
  char reserved[3];
  f.read(reserved, 3);
  if (f.gcount() != 3) throw FormatError("load_dpc: truncated header", 9);
  std::uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  if (f.gcount() != 4) throw FormatError("load_dpc: truncated header", 12);
  if (count == 0) throw FormatError("load_dpc: empty cloud", 12);

  PointCloud cloud;
  cloud.domain = static_cast<DomainId>(domain);
  cloud.points.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    float xyz[3];
    f.read(reinterpret_cast<char*>(xyz), 12);
    if (f.gcount() != 12)
      throw FormatError("load_dpc: truncated payload",
                        16 + std::uint64_t(i) * 12 + std::uint64_t(f.gcount()));
    if (!std::isfinite(xyz[0]) || !std::isfinite(xyz[1]) || !std::isfinite(xyz[2]))
      throw FormatError("load_dpc: non-finite coordinate", 16 + std::uint64_t(i) * 12);
    cloud.points.emplace_back(double(xyz[0]), double(xyz[1]), double(xyz[2]));
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Corpus and batching
// ---------------------------------------------------------------------------

struct Corpus {
  std::vector<PointCloud> clouds;
  std::vector<int> labels;             // empty, or one per cloud
  std::array<std::size_t, 3> manifest{0, 0, 0};  // counts per domain

  bool labeled() const { return !labels.empty(); }
  std::size_t size() const { return clouds.size(); }
  std::size_t domain_count() const {
    std::size_t n = 0;
    for (std::size_t c : manifest) n += c > 0 ? 1 : 0;
    return n;
  }
  void recount() {
    manifest = {0, 0, 0};
    for (const auto& c : clouds) manifest[static_cast<std::size_t>(c.domain)]++;
  }
};

/// Builds an in-memory synthetic corpus with `per_domain[d]` clouds per
/// domain. Object clouds carry their composite class label when
/// with_labels is set (other domains get label 0).
inline Corpus make_synthetic_corpus(const std::array<std::size_t, 3>& per_domain,
                                    std::uint64_t base_seed, std::size_t n_points,
                                    bool with_labels = false) {
  Corpus corpus;
  for (int c = 0; c < 3; ++c) {
    auto domain = static_cast<DomainId>(c);
    for (std::size_t i = 0; i < per_domain[static_cast<std::size_t>(c)]; ++i) {
      std::uint64_t seed = mix_seed(base_seed, (std::uint64_t(c) << 32) | i);
      int label = 0;
      PointCloud cloud = domain == DomainId::Object && with_labels
                             ? gen_labeled_object(seed, n_points, &label)
                             : gen_synthetic(domain, seed, n_points);
      cloud.id = std::string(domain_name(domain)) + "_" + std::to_string(i);
      corpus.clouds.push_back(std::move(cloud));
      if (with_labels) corpus.labels.push_back(label);
    }
  }
  corpus.recount();
  return corpus;
}

struct Batch {
  std::vector<PointCloud> clouds;   // normalized, sampled to n_points
  std::vector<DomainId> domains;
  std::vector<int> labels;          // empty if corpus unlabeled

  std::size_t size() const { return clouds.size(); }
  std::size_t domain_count() const {
    std::array<bool, 3> seen{false, false, false};
    for (DomainId d : domains) seen[static_cast<std::size_t>(d)] = true;
    return std::size_t(seen[0]) + std::size_t(seen[1]) + std::size_t(seen[2]);
  }
};

namespace detail {

/// Uniform subsample to n points: without replacement when the cloud is
/// large enough, with replacement otherwise.
inline PointCloud subsample(const PointCloud& cloud, std::size_t n, Rng& rng) {
  PointCloud out;
  out.domain = cloud.domain;
  out.id = cloud.id;
  out.points.reserve(n);
  const std::size_t have = cloud.points.size();
  if (have >= n) {
    std::vector<std::size_t> idx(have);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.below(have - i));
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud.points[idx[i]]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out.points.push_back(cloud.points[static_cast<std::size_t>(rng.below(have))]);
  }
  return out;
}

}  // namespace detail

/// One epoch of batches: a seeded permutation of the corpus cut into
/// batches of B (remainder kept; a trailing singleton is merged into its
/// predecessor), each cloud normalized then subsampled to n_points. When
/// the corpus spans several domains, single-domain batches are repaired
/// by swapping an element with the next batch so the contrastive loss
/// always sees cross-domain negatives.
inline std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size,
                                       std::size_t n_points, std::uint64_t seed) {
  if (corpus.clouds.empty()) throw std::invalid_argument("make_batches: empty corpus");
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be >= 1");

  const std::size_t n = corpus.clouds.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle_rng(mix_seed(seed, 0xba7c4e5ull));
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::size_t j = i + static_cast<std::size_t>(shuffle_rng.below(n - i));
    std::swap(perm[i], perm[j]);
  }

  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t at = 0; at < n; at += batch_size) {
    std::size_t take = std::min(batch_size, n - at);
    groups.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                        perm.begin() + static_cast<std::ptrdiff_t>(at + take));
  }
  if (groups.size() > 1 && groups.back().size() == 1) {
    groups[groups.size() - 2].push_back(groups.back()[0]);
    groups.pop_back();
  }

  // Mixing repair: no batch may be single-domain when the corpus is not.
  if (corpus.domain_count() >= 2 && groups.size() > 1) {
    auto domain_of = [&](std::size_t idx) { return corpus.clouds[idx].domain; };
    auto single_domain = [&](const std::vector<std::size_t>& grp) {
      for (std::size_t i = 1; i < grp.size(); ++i)
        if (domain_of(grp[i]) != domain_of(grp[0])) return false;
      return true;
    };
    for (int pass = 0; pass < 100; ++pass) {
      bool fixed_all = true;
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        if (!single_domain(groups[gi])) continue;
        DomainId have = domain_of(groups[gi][0]);
        bool repaired = false;
        for (std::size_t step = 1; step < groups.size() && !repaired; ++step) {
          auto& other = groups[(gi + step) % groups.size()];
          for (std::size_t oi = 0; oi < other.size(); ++oi) {
            if (domain_of(other[oi]) != have) {
              std::swap(groups[gi][0], other[oi]);
              repaired = true;
              break;
            }
          }
        }
        if (!repaired) fixed_all = false;
      }
      bool any_single = false;
      for (const auto& grp : groups) any_single = any_single || single_domain(grp);
      if (!any_single || !fixed_all) break;
    }
  }

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  std::size_t position = 0;
  for (const auto& grp : groups) {
    Batch b;
    for (std::size_t idx : grp) {
      Rng cloud_rng(mix_seed(mix_seed(seed, 0x5ab5a17ull), position++));
      b.clouds.push_back(
          detail::subsample(normalize_cloud(corpus.clouds[idx]), n_points, cloud_rng));
      b.domains.push_back(corpus.clouds[idx].domain);
      if (corpus.labeled()) b.labels.push_back(corpus.labels[idx]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Fine-tuning augmentation: one random scale in [0.8, 1.25] and a
/// translation in [-0.1, 0.1]^3.
inline PointCloud augment_cloud(const PointCloud& cloud, Rng& rng) {
  PointCloud out = cloud;
  const double s = rng.uniform(0.8, 1.25);
  const Vec3 t(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
  for (Vec3& p : out.points) p = p * s + t;
  return out;
}

}  // namespace dapmae
