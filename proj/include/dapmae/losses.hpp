// SPDX-License-Identifier: Apache-2.0
//
// Reconstruction (chamfer) loss, domain contrastive loss and their
// weighted combination, plus the per-step report that lands in the
// metrics stream.

#pragma once

#include <string>
#include <vector>

#include "dapmae/autodiff.hpp"
#include "dapmae/common.hpp"
#include "dapmae/geometry.hpp"

namespace dapmae {

enum class PairReduction : std::uint8_t { Sum = 0, Mean = 1 };

struct LossConfig {
  double w1 = 100.0;   // reconstruction weight
  double w2 = 0.001;   // contrastive weight
  double margin = 0.0; // cross-domain cosine margin a
  PairReduction pair_reduction = PairReduction::Sum;

  void validate() const {
    if (w1 < 0.0 || w2 < 0.0) throw ConfigError("loss: weights must be >= 0");
    if (margin < -1.0 || margin > 1.0)
      throw ConfigError("loss: margin must lie in [-1, 1]");
  }
};

struct LossReport {
  double l_rec = 0.0;
  double l_con = 0.0;
  double l_total = 0.0;
  std::vector<double> per_patch_chamfer;
  std::vector<double> per_pair_terms;
  bool clamped_norms = false;
};

/// Mean chamfer distance between predicted and ground-truth masked
/// patches (one k x 3 patch per row of pred, xyz interleaved). Order of
/// rows must match the masked-patch order used to build gt.
template <typename T>
Ten<T> recon_loss(Graph<T>& g, Ten<T> pred,
                  const std::vector<typename Graph<T>::Mat>& gt,
                  std::vector<double>* per_patch = nullptr) {
  if (static_cast<Eigen::Index>(gt.size()) != g.val(pred).rows())
    throw std::invalid_argument("recon_loss: prediction/ground-truth count mismatch");
  return g.chamfer_mean(pred, gt, per_patch);
}

/// Pairwise cosine contrast over a batch of domain features: ordered
/// pairs contribute 1 - cos when the domains match and max(0, cos - a)
/// otherwise.
template <typename T>
Ten<T> contrastive_loss(Graph<T>& g, Ten<T> d_feats,
                        const std::vector<DomainId>& domains,
                        const LossConfig& cfg,
                        std::vector<T>* pair_terms = nullptr,
                        bool* clamped = nullptr) {
  if (g.val(d_feats).rows() < 2)
    throw std::invalid_argument("contrastive_loss: batch size must be >= 2");
  std::vector<int> labels(domains.size());
  for (std::size_t i = 0; i < domains.size(); ++i)
    labels[i] = static_cast<int>(domains[i]);
  return g.cosine_contrast(d_feats, labels, T(cfg.margin),
                           cfg.pair_reduction == PairReduction::Mean,
                           pair_terms, clamped);
}

template <typename T>
Ten<T> total_loss(Graph<T>& g, Ten<T> l_rec, Ten<T> l_con, const LossConfig& cfg) {
  return g.lincomb(l_rec, l_con, T(cfg.w1), T(cfg.w2));
}

inline double total_loss_value(double l_rec, double l_con, const LossConfig& cfg) {
  return cfg.w1 * l_rec + cfg.w2 * l_con;
}

}  // namespace dapmae
