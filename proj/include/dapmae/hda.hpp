// SPDX-License-Identifier: Apache-2.0
//
// Heterogeneous domain adapter: three parallel two-layer MLPs
// (FC -> BN -> ReLU -> FC), one per data domain. Adaptation mode routes
// each token batch through the branch of its domain label; fusion mode
// runs all three frozen branches and blends the auxiliary outputs into
// the task branch with nonnegative per-token coefficients predicted by
// two small MLPs.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "dapmae/autodiff.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/nn.hpp"
#include "dapmae/params.hpp"

namespace dapmae {

enum class HdaMode : std::uint8_t { Adaptation = 0, Fusion = 1 };

constexpr double kBnMomentum = 0.1;

struct Hda {
  HdaMode mode = HdaMode::Adaptation;
  bool branches_frozen = false;
};

inline std::string hda_branch(DomainId d) {
  return std::string("hda.") + domain_name(d);
}

/// The two auxiliary domains for a task domain, in DomainId order.
inline std::array<DomainId, 2> aux_domains(DomainId task) {
  std::array<DomainId, 2> out{};
  int at = 0;
  for (int c = 0; c < 3; ++c) {
    auto d = static_cast<DomainId>(c);
    if (d != task) out[static_cast<std::size_t>(at++)] = d;
  }
  return out;
}

template <typename T>
void register_hda(ParamStore<T>& ps, Rng& rng, const ModelDims& dims) {
  for (int c = 0; c < 3; ++c) {
    const std::string b = hda_branch(static_cast<DomainId>(c));
    nn::add_linear(ps, rng, b + ".fc1", dims.d_in, dims.hidden);
    ps.add_constant(b + ".bn.g", 1, dims.hidden, T(1));
    ps.add_constant(b + ".bn.b", 1, dims.hidden, T(0));
    ps.add_constant(b + ".bn.running_mean", 1, dims.hidden, T(0), /*trainable=*/false);
    ps.add_constant(b + ".bn.running_var", 1, dims.hidden, T(1), /*trainable=*/false);
    nn::add_linear(ps, rng, b + ".fc2", dims.hidden, dims.d_model);
  }
  nn::add_linear(ps, rng, "hda.mlp1.fc1", dims.d_in, dims.fusion_hidden);
  nn::add_linear(ps, rng, "hda.mlp1.fc2", dims.fusion_hidden, 2);
  nn::add_linear(ps, rng, "hda.mlp2.fc1", dims.hidden, dims.fusion_hidden);
  nn::add_linear(ps, rng, "hda.mlp2.fc2", dims.fusion_hidden, 2);
}

/// Freezes the nine FC/BN blocks (fusion mode contract). MLP1/MLP2 stay
/// trainable.
template <typename T>
void freeze_hda_branches(ParamStore<T>& ps) {
  for (int c = 0; c < 3; ++c)
    ps.set_trainable_prefix(hda_branch(static_cast<DomainId>(c)), false);
}

namespace detail {

template <typename T>
Ten<T> hda_branch_bn(Graph<T>& g, ParamStore<T>& ps, const std::string& b,
                     Ten<T> x, bool training) {
  auto& rm = ps.at(b + ".bn.running_mean").value;
  auto& rv = ps.at(b + ".bn.running_var").value;
  return g.batch_norm(x, ps.leaf(b + ".bn.g"), ps.leaf(b + ".bn.b"), &rm, &rv,
                      training, T(kBnMomentum), T(kNormEps));
}

/// linear -> ReLU -> linear -> ReLU, yielding the two nonnegative fusion
/// coefficients per token.
template <typename T>
Ten<T> fusion_coefficients(Graph<T>& g, const ParamStore<T>& ps,
                           const std::string& prefix, Ten<T> x) {
  Ten<T> h = g.relu(nn::linear(g, ps, prefix + ".fc1", x));
  return g.relu(nn::linear(g, ps, prefix + ".fc2", h));
}

}  // namespace detail

/// Adaptation mode: tokens of one domain flow through that domain's
/// branch only. In training the batch statistics normalize and the
/// routed branch's running statistics are updated; in inference the
/// running statistics are used.
template <typename T>
Ten<T> hda_adapt(Graph<T>& g, ParamStore<T>& ps, const Hda& hda,
                 Ten<T> initial_tokens, DomainId domain, bool training) {
  if (hda.mode != HdaMode::Adaptation)
    throw StateError("hda_adapt: adapter is not in adaptation mode");
  const std::string b = hda_branch(domain);
  Ten<T> x = nn::linear(g, ps, b + ".fc1", initial_tokens);
  x = g.relu(detail::hda_branch_bn(g, ps, b, x, training));
  return nn::linear(g, ps, b + ".fc2", x);
}

/// Every intermediate of a fusion-mode forward, one row per token.
template <typename T>
struct FusionTrace {
  using Mat = typename Graph<T>::Mat;
  std::array<Mat, 3> stage1_branch;  // FC1 outputs per domain
  Mat coeff1;                        // n x 2, rectified
  Mat fused1;                        // To^(1)
  std::array<Mat, 3> stage2_branch;  // FC2 outputs per domain
  Mat coeff2;                        // n x 2, rectified
  Mat fused;                         // final tokens
};

/// Fusion mode: all three frozen branches run; the task branch is the
/// primary token and the other two are blended in with per-token
/// coefficients from MLP1 (stage 1, on the initial token) and MLP2
/// (stage 2, on the stage-1 fusion). BN is the task branch's, inference
/// statistics.
template <typename T>
Ten<T> hda_fuse(Graph<T>& g, ParamStore<T>& ps, const Hda& hda,
                Ten<T> initial_tokens, DomainId task,
                FusionTrace<T>* trace = nullptr) {
  if (hda.mode != HdaMode::Fusion)
    throw StateError("hda_fuse: adapter is not in fusion mode");
  if (!hda.branches_frozen)
    throw StateError("hda_fuse: FC/BN blocks must be frozen in fusion mode");

  std::array<Ten<T>, 3> s1;
  for (int c = 0; c < 3; ++c)
    s1[static_cast<std::size_t>(c)] =
        nn::linear(g, ps, hda_branch(static_cast<DomainId>(c)) + ".fc1",
                   initial_tokens);
  Ten<T> c1 = detail::fusion_coefficients(g, ps, "hda.mlp1", initial_tokens);
  const auto aux = aux_domains(task);
  Ten<T> fused1 = s1[static_cast<std::size_t>(task)];
  for (int a = 0; a < 2; ++a)
    fused1 = g.add(fused1, g.scale_rows(s1[static_cast<std::size_t>(aux[a])],
                                        g.slice_cols(c1, a, 1)));

  const std::string tb = hda_branch(task);
  Ten<T> u = g.relu(detail::hda_branch_bn(g, ps, tb, fused1, /*training=*/false));
  std::array<Ten<T>, 3> s2;
  for (int c = 0; c < 3; ++c)
    s2[static_cast<std::size_t>(c)] =
        nn::linear(g, ps, hda_branch(static_cast<DomainId>(c)) + ".fc2", u);
  Ten<T> c2 = detail::fusion_coefficients(g, ps, "hda.mlp2", fused1);
  Ten<T> fused = s2[static_cast<std::size_t>(task)];
  for (int a = 0; a < 2; ++a)
    fused = g.add(fused, g.scale_rows(s2[static_cast<std::size_t>(aux[a])],
                                      g.slice_cols(c2, a, 1)));

  if (trace) {
    for (int c = 0; c < 3; ++c) {
      trace->stage1_branch[static_cast<std::size_t>(c)] = g.val(s1[static_cast<std::size_t>(c)]);
      trace->stage2_branch[static_cast<std::size_t>(c)] = g.val(s2[static_cast<std::size_t>(c)]);
    }
    trace->coeff1 = g.val(c1);
    trace->fused1 = g.val(fused1);
    trace->coeff2 = g.val(c2);
    trace->fused = g.val(fused);
  }
  return fused;
}

/// Plain-value adaptation forward (builds a throwaway graph).
template <typename T>
typename Graph<T>::Mat hda_adapt_values(ParamStore<T>& ps, const Hda& hda,
                                        const typename Graph<T>::Mat& tokens,
                                        DomainId domain, bool training) {
  Graph<T> g;
  ps.bind(g);
  Ten<T> x = g.constant(tokens);
  return g.val(hda_adapt(g, ps, hda, x, domain, training));
}

/// Plain-value fusion forward with trace.
template <typename T>
typename Graph<T>::Mat hda_fuse_values(ParamStore<T>& ps, const Hda& hda,
                                       const typename Graph<T>::Mat& tokens,
                                       DomainId task,
                                       FusionTrace<T>* trace = nullptr) {
  Graph<T> g;
  ps.bind(g);
  Ten<T> x = g.constant(tokens);
  return g.val(hda_fuse(g, ps, hda, x, task, trace));
}

}  // namespace dapmae
