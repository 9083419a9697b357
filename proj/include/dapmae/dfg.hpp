// SPDX-License-Identifier: Apache-2.0
//
// Domain feature generator: a learnable class token and three domain
// tokens attend over the encoder features with one multi-head
// cross-attention application, yielding the class feature c and the
// domain feature d. The class token is only supervised in fine-tuning.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dapmae/autodiff.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/nn.hpp"
#include "dapmae/params.hpp"

namespace dapmae {

template <typename T>
void register_dfg(ParamStore<T>& ps, Rng& rng, const ModelDims& dims) {
  const int d = dims.d_model;
  ps.add("dfg.class_token", 1, d, rng, kInitSigma);
  for (int c = 0; c < 3; ++c)
    ps.add(std::string("dfg.token.") + domain_name(static_cast<DomainId>(c)), 1,
           d, rng, kInitSigma);
  nn::add_linear(ps, rng, "dfg.q", d, d);
  nn::add_linear(ps, rng, "dfg.k", d, d);
  nn::add_linear(ps, rng, "dfg.v", d, d);
}

/// Cross-attention of [class token ; selected domain token] over the
/// feature rows. Returns (c, d) as 1 x D nodes.
template <typename T>
std::pair<Ten<T>, Ten<T>> dfg_forward(Graph<T>& g, const ParamStore<T>& ps,
                                      const ModelDims& dims, Ten<T> features,
                                      DomainId domain) {
  if (g.val(features).rows() < 1)
    throw std::invalid_argument("dfg_forward: empty feature set");
  const Eigen::Index d = dims.d_model;
  const int heads = dims.dfg_heads;
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  Ten<T> queries = g.concat_rows(
      {ps.leaf("dfg.class_token"),
       ps.leaf(std::string("dfg.token.") + domain_name(domain))});
  Ten<T> q = nn::linear(g, ps, "dfg.q", queries);
  Ten<T> k = nn::linear(g, ps, "dfg.k", features);
  Ten<T> v = nn::linear(g, ps, "dfg.v", features);
  std::vector<Ten<T>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Ten<T> qh = g.slice_cols(q, h * dh, dh);
    Ten<T> kh = g.slice_cols(k, h * dh, dh);
    Ten<T> vh = g.slice_cols(v, h * dh, dh);
    Ten<T> att = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), scale));
    outs.push_back(g.matmul(att, vh));
  }
  Ten<T> both = g.concat_cols(outs);
  return {g.slice_rows(both, 0, 1), g.slice_rows(both, 1, 1)};
}

/// Concatenation of the row-wise mean and coordinate-wise max of the
/// feature rows (1 x 2D).
template <typename T>
Ten<T> pool_features(Graph<T>& g, Ten<T> features) {
  if (g.val(features).rows() < 1)
    throw std::invalid_argument("pool_features: empty feature set");
  return g.concat_cols({g.mean_rows(features), g.max_rows(features)});
}

}  // namespace dapmae
