// SPDX-License-Identifier: Apache-2.0
//
// Assembles the configured components (backbone, domain adapter, domain
// feature generator, task head) over one parameter store and provides
// the forward composites used by pre-training, fine-tuning and
// evaluation. Ablation switches: use_hda = false swaps the adapter for a
// single shared two-layer MLP of identical shape; use_dfg = false drops
// the contrastive path and feeds the head pooled features only.

#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dapmae/checkpoint.hpp"
#include "dapmae/config.hpp"
#include "dapmae/data.hpp"
#include "dapmae/dfg.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/hda.hpp"
#include "dapmae/losses.hpp"
#include "dapmae/nn.hpp"
#include "dapmae/params.hpp"

namespace dapmae {

constexpr std::uint64_t kInitTag = 0x1417ull;
constexpr std::uint64_t kMaskTag = 0x3a5cull;
constexpr std::uint64_t kDropTag = 0xd209ull;
constexpr std::uint64_t kAugTag = 0xa06ull;

template <typename T>
class Model {
 public:
  using Mat = typename Graph<T>::Mat;

  explicit Model(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, kInitTag));
    register_backbone(store_, rng, cfg_.dims, cfg_.k);
    if (cfg_.use_hda) {
      register_hda(store_, rng, cfg_.dims);
    } else {
      nn::add_linear(store_, rng, "adapter.fc1", cfg_.dims.d_in, cfg_.dims.hidden);
      store_.add_constant("adapter.bn.g", 1, cfg_.dims.hidden, T(1));
      store_.add_constant("adapter.bn.b", 1, cfg_.dims.hidden, T(0));
      store_.add_constant("adapter.bn.running_mean", 1, cfg_.dims.hidden, T(0), false);
      store_.add_constant("adapter.bn.running_var", 1, cfg_.dims.hidden, T(1), false);
      nn::add_linear(store_, rng, "adapter.fc2", cfg_.dims.hidden, cfg_.dims.d_model);
    }
    if (cfg_.use_dfg) register_dfg(store_, rng, cfg_.dims);
    if (cfg_.phase == "finetune") {
      nn::add_linear(store_, rng, "head.fc1", head_width(), cfg_.dims.head_hidden);
      nn::add_linear(store_, rng, "head.fc2", cfg_.dims.head_hidden, cfg_.n_classes);
    }
    for (const auto& prefix : cfg_.freeze) store_.set_trainable_prefix(prefix, false);
  }

  static Model from_checkpoint(const CheckpointData& ck) {
    TrainConfig cfg = cfgio::from_json(Json::parse(ck.config_json));
    Model m(cfg);
    m.load_params(ck);
    if (ck.hda_mode == static_cast<std::uint8_t>(HdaMode::Fusion))
      m.enter_fusion_mode();
    return m;
  }

  const TrainConfig& cfg() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  Hda& hda() { return hda_; }
  const Hda& hda() const { return hda_; }

  int head_width() const {
    return (cfg_.use_dfg ? 4 : 2) * cfg_.dims.d_model;
  }

  /// Fusion-mode switch for fine-tuning: freezes the nine FC/BN blocks,
  /// keeps MLP1/MLP2 trainable. The ablation baseline mirrors the freeze
  /// on its shared adapter so the comparison isolates HDA/DFG rather
  /// than frozen-versus-trainable stems.
  void enter_fusion_mode() {
    if (!cfg_.use_hda) {
      store_.set_trainable_prefix("adapter.", false);
      adapter_frozen_ = true;
      return;
    }
    hda_.mode = HdaMode::Fusion;
    freeze_hda_branches(store_);
    hda_.branches_frozen = true;
  }

  // ---- adapter dispatch ----------------------------------------------------

  /// Embeds the selected patches of every cloud and runs the adapter.
  /// Adaptation mode routes per-domain sub-batches through their branch
  /// (batch statistics are computed per routed sub-batch); fusion mode
  /// fuses every token toward the task domain.
  std::vector<Ten<T>> adapted_tokens(Graph<T>& g,
                                     const std::vector<PatchSet>& sets,
                                     const std::vector<DomainId>& domains,
                                     PatchSel sel, bool training) {
    const std::size_t n = sets.size();
    std::vector<Ten<T>> initial(n);
    std::vector<Eigen::Index> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
      initial[i] = embed_patches(g, store_, sets[i], sel);
      rows[i] = g.val(initial[i]).rows();
    }
    std::vector<Ten<T>> out(n);
    if (!cfg_.use_hda) {
      Ten<T> stacked = g.concat_rows(initial);
      Ten<T> x = nn::linear(g, store_, "adapter.fc1", stacked);
      auto& rm = store_.at("adapter.bn.running_mean").value;
      auto& rv = store_.at("adapter.bn.running_var").value;
      x = g.relu(g.batch_norm(x, store_.leaf("adapter.bn.g"),
                              store_.leaf("adapter.bn.b"), &rm, &rv,
                              training && !adapter_frozen_, T(kBnMomentum),
                              T(kNormEps)));
      Ten<T> y = nn::linear(g, store_, "adapter.fc2", x);
      Eigen::Index at = 0;
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = g.slice_rows(y, at, rows[i]);
        at += rows[i];
      }
      return out;
    }
    if (hda_.mode == HdaMode::Adaptation) {
      for (int c = 0; c < 3; ++c) {
        auto domain = static_cast<DomainId>(c);
        std::vector<std::size_t> members;
        std::vector<Ten<T>> parts;
        for (std::size_t i = 0; i < n; ++i) {
          if (domains[i] == domain) {
            members.push_back(i);
            parts.push_back(initial[i]);
          }
        }
        if (members.empty()) continue;
        Ten<T> y = hda_adapt(g, store_, hda_, g.concat_rows(parts), domain, training);
        Eigen::Index at = 0;
        for (std::size_t i : members) {
          out[i] = g.slice_rows(y, at, rows[i]);
          at += rows[i];
        }
      }
      return out;
    }
    Ten<T> y = hda_fuse(g, store_, hda_, g.concat_rows(initial), cfg_.task());
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = g.slice_rows(y, at, rows[i]);
      at += rows[i];
    }
    return out;
  }

  // ---- pre-training composite ----------------------------------------------

  struct PretrainOut {
    Ten<T> loss;
    LossReport report;
  };

  /// Full pre-training step loss over one batch: masked reconstruction
  /// plus the domain contrastive term (when the DFG is enabled).
  PretrainOut pretrain_loss(Graph<T>& g, const Batch& batch,
                            std::uint64_t step_seed) {
    if (hda_.mode != HdaMode::Adaptation && cfg_.use_hda)
      throw StateError("pretrain_loss: adapter must be in adaptation mode");
    const std::size_t n = batch.size();
    std::vector<PatchSet> sets(n);
    for (std::size_t i = 0; i < n; ++i) {
      PatchSet full = patchify(batch.clouds[i], std::size_t(cfg_.g),
                               std::size_t(cfg_.k),
                               stable_start(batch.clouds[i].points));
      sets[i] = mask_split(full, MaskSpec{cfg_.mask_ratio, mix_seed(step_seed, i)});
    }
    auto tokens = adapted_tokens(g, sets, batch.domains, PatchSel::Visible,
                                 /*training=*/true);

    std::vector<Ten<T>> preds;
    std::vector<Mat> gt;
    std::vector<Ten<T>> d_rows;
    for (std::size_t i = 0; i < n; ++i) {
      Points vis_centers, mask_centers;
      for (std::size_t p = 0; p < sets[i].g; ++p)
        (sets[i].vis_mask[p] ? vis_centers : mask_centers)
            .push_back(sets[i].centers[p]);
      Ten<T> pos_vis = pos_embed(g, store_, vis_centers);
      Ten<T> pos_mask = pos_embed(g, store_, mask_centers);
      Ten<T> f_vis = encode(g, store_, cfg_.dims, tokens[i], pos_vis);
      preds.push_back(decode(g, store_, cfg_.dims, f_vis, pos_vis, pos_mask));
      for (std::size_t p = 0; p < sets[i].g; ++p) {
        if (sets[i].vis_mask[p]) continue;
        Mat m(static_cast<Eigen::Index>(cfg_.k), 3);
        for (int j = 0; j < cfg_.k; ++j)
          for (int c = 0; c < 3; ++c)
            m(j, c) = T(sets[i].patches[p][static_cast<std::size_t>(j)][c]);
        gt.push_back(std::move(m));
      }
      if (cfg_.use_dfg)
        d_rows.push_back(dfg_forward(g, store_, cfg_.dims, f_vis, batch.domains[i]).second);
    }

    PretrainOut out;
    Ten<T> l_rec = recon_loss(g, g.concat_rows(preds), gt, &out.report.per_patch_chamfer);
    out.report.l_rec = double(g.val(l_rec)(0, 0));
    if (cfg_.use_dfg) {
      std::vector<T> pair_terms;
      Ten<T> l_con = contrastive_loss(g, g.concat_rows(d_rows), batch.domains,
                                      cfg_.loss, &pair_terms,
                                      &out.report.clamped_norms);
      out.report.l_con = double(g.val(l_con)(0, 0));
      out.report.per_pair_terms.assign(pair_terms.begin(), pair_terms.end());
      out.loss = total_loss(g, l_rec, l_con, cfg_.loss);
    } else {
      out.loss = g.scale(l_rec, T(cfg_.loss.w1));
    }
    out.report.l_total = total_loss_value(out.report.l_rec, out.report.l_con, cfg_.loss);
    return out;
  }

  // ---- fine-tuning composite -------------------------------------------------

  struct FinetuneOut {
    Ten<T> loss;
    double ce = 0.0;
    int correct = 0;
  };

  /// Classification loss over a labeled batch: full (unmasked) patches,
  /// fused adapter, encoder over all tokens, head over
  /// [c || d || f_pooled] (or pooled features only without the DFG).
  FinetuneOut finetune_loss(Graph<T>& g, const Batch& batch, bool training,
                            Rng* drop_rng) {
    if (batch.labels.empty())
      throw ConfigError("finetune: corpus provides no labels");
    const std::size_t n = batch.size();
    std::vector<PatchSet> sets(n);
    for (std::size_t i = 0; i < n; ++i)
      sets[i] = patchify(batch.clouds[i], std::size_t(cfg_.g), std::size_t(cfg_.k),
                         stable_start(batch.clouds[i].points));
    auto tokens = adapted_tokens(g, sets, batch.domains, PatchSel::All, training);
    DropPath dp{cfg_.drop_path, training ? drop_rng : nullptr};

    std::vector<Ten<T>> head_rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.labels[i] < 0 || batch.labels[i] >= cfg_.n_classes)
        throw ConfigError("finetune: label " + std::to_string(batch.labels[i]) +
                          " outside n_classes");
      Ten<T> pos = pos_embed(g, store_, sets[i].centers);
      Ten<T> f = encode(g, store_, cfg_.dims, tokens[i], pos, dp);
      Ten<T> pooled = pool_features(g, f);
      if (cfg_.use_dfg) {
        auto [c, d] = dfg_forward(g, store_, cfg_.dims, f, batch.domains[i]);
        head_rows.push_back(g.concat_cols({c, d, pooled}));
      } else {
        head_rows.push_back(pooled);
      }
      labels.push_back(batch.labels[i]);
    }
    Ten<T> x = g.concat_rows(head_rows);
    Ten<T> logits = nn::linear(g, store_, "head.fc2",
                               g.relu(nn::linear(g, store_, "head.fc1", x)));
    FinetuneOut out;
    out.loss = g.cross_entropy(logits, labels);
    out.ce = double(g.val(out.loss)(0, 0));
    const Mat& lv = g.val(logits);
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < lv.cols(); ++c)
        if (lv(r, c) > lv(r, best)) best = c;
      if (best == labels[static_cast<std::size_t>(r)]) out.correct++;
    }
    return out;
  }

  // ---- inference helpers -------------------------------------------------------

  struct CloudFeatures {
    Mat c;         // 1 x D (zero when DFG disabled)
    Mat d;         // 1 x D (zero when DFG disabled)
    Mat f_pooled;  // 1 x 2D
  };

  /// Deterministic feature extraction for one normalized, sampled cloud
  /// (full patches, inference statistics, no masking).
  CloudFeatures features(const PointCloud& cloud) {
    Graph<T> g;
    store_.bind(g);
    std::vector<PatchSet> sets{
        patchify(cloud, std::size_t(cfg_.g), std::size_t(cfg_.k),
                 stable_start(cloud.points))};
    auto tokens = adapted_tokens(g, sets, {cloud.domain}, PatchSel::All,
                                 /*training=*/false);
    Ten<T> pos = pos_embed(g, store_, sets[0].centers);
    Ten<T> f = encode(g, store_, cfg_.dims, tokens[0], pos);
    CloudFeatures out;
    out.f_pooled = g.val(pool_features(g, f));
    if (cfg_.use_dfg) {
      auto [c, d] = dfg_forward(g, store_, cfg_.dims, f, cloud.domain);
      out.c = g.val(c);
      out.d = g.val(d);
    } else {
      out.c = Mat::Zero(1, cfg_.dims.d_model);
      out.d = Mat::Zero(1, cfg_.dims.d_model);
    }
    return out;
  }

  /// Masked-reconstruction loss of one cloud under a fixed mask seed
  /// (inference-mode adapter statistics; no parameter updates).
  double recon_value(const PointCloud& cloud, std::uint64_t mask_seed) {
    Graph<T> g;
    store_.bind(g);
    std::vector<PatchSet> sets{mask_split(
        patchify(cloud, std::size_t(cfg_.g), std::size_t(cfg_.k),
                 stable_start(cloud.points)),
        MaskSpec{cfg_.mask_ratio, mask_seed})};
    auto tokens = adapted_tokens(g, sets, {cloud.domain}, PatchSel::Visible,
                                 /*training=*/false);
    Points vis_centers, mask_centers;
    for (std::size_t p = 0; p < sets[0].g; ++p)
      (sets[0].vis_mask[p] ? vis_centers : mask_centers).push_back(sets[0].centers[p]);
    Ten<T> pos_vis = pos_embed(g, store_, vis_centers);
    Ten<T> pos_mask = pos_embed(g, store_, mask_centers);
    Ten<T> f_vis = encode(g, store_, cfg_.dims, tokens[0], pos_vis);
    Ten<T> pred = decode(g, store_, cfg_.dims, f_vis, pos_vis, pos_mask);
    std::vector<Mat> gt;
    for (std::size_t p = 0; p < sets[0].g; ++p) {
      if (sets[0].vis_mask[p]) continue;
      Mat m(static_cast<Eigen::Index>(cfg_.k), 3);
      for (int j = 0; j < cfg_.k; ++j)
        for (int c = 0; c < 3; ++c)
          m(j, c) = T(sets[0].patches[p][static_cast<std::size_t>(j)][c]);
      gt.push_back(std::move(m));
    }
    return double(g.val(recon_loss(g, pred, gt))(0, 0));
  }

  /// Fine-tune logits for one labeled batch without gradients.
  std::vector<int> predict(const Batch& batch) {
    Graph<T> g;
    store_.bind(g);
    const std::size_t n = batch.size();
    std::vector<PatchSet> sets(n);
    for (std::size_t i = 0; i < n; ++i)
      sets[i] = patchify(batch.clouds[i], std::size_t(cfg_.g), std::size_t(cfg_.k),
                         stable_start(batch.clouds[i].points));
    auto tokens = adapted_tokens(g, sets, batch.domains, PatchSel::All, false);
    std::vector<Ten<T>> head_rows;
    for (std::size_t i = 0; i < n; ++i) {
      Ten<T> pos = pos_embed(g, store_, sets[i].centers);
      Ten<T> f = encode(g, store_, cfg_.dims, tokens[i], pos);
      Ten<T> pooled = pool_features(g, f);
      if (cfg_.use_dfg) {
        auto [c, d] = dfg_forward(g, store_, cfg_.dims, f, batch.domains[i]);
        head_rows.push_back(g.concat_cols({c, d, pooled}));
      } else {
        head_rows.push_back(pooled);
      }
    }
    Ten<T> x = g.concat_rows(head_rows);
    Ten<T> logits = nn::linear(g, store_, "head.fc2",
                               g.relu(nn::linear(g, store_, "head.fc1", x)));
    const Mat& lv = g.val(logits);
    std::vector<int> out(n);
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < lv.cols(); ++c)
        if (lv(r, c) > lv(r, best)) best = c;
      out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
  }

  // ---- checkpointing -------------------------------------------------------

  CheckpointData to_checkpoint(std::uint32_t epoch, std::uint64_t rng_state,
                               const std::string& metrics_tail) const {
    CheckpointData ck;
    ck.phase = cfg_.phase == "finetune" ? 1 : 0;
    ck.hda_mode = static_cast<std::uint8_t>(hda_.mode);
    ck.use_hda = cfg_.use_hda ? 1 : 0;
    ck.use_dfg = cfg_.use_dfg ? 1 : 0;
    ck.epoch = epoch;
    ck.rng_state = rng_state;
    ck.config_json = cfgio::to_json(cfg_).dump();
    ck.metrics_tail = metrics_tail;
    for (const auto& p : store_.all()) {
      ParamBlob b;
      b.path = p.path;
      b.rows = static_cast<std::uint32_t>(p.value.rows());
      b.cols = static_cast<std::uint32_t>(p.value.cols());
      b.trainable = p.trainable;
      b.data.resize(static_cast<std::size_t>(p.value.size()));
      std::size_t at = 0;
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c)
          b.data[at++] = float(p.value(r, c));
      ck.params.push_back(std::move(b));
    }
    return ck;
  }

  /// Installs checkpoint parameters into this model. Unknown stored
  /// paths are a format error; parameters this model expects but the
  /// checkpoint lacks are allowed only for the task head (fresh at
  /// fine-tune start).
  void load_params(const CheckpointData& ck) {
    std::vector<bool> seen(store_.size(), false);
    for (const auto& b : ck.params) {
      if (!store_.contains(b.path))
        throw FormatError("checkpoint: unknown parameter path " + b.path,
                          b.file_offset);
      auto& p = store_.at(b.path);
      if (p.value.rows() != static_cast<Eigen::Index>(b.rows) ||
          p.value.cols() != static_cast<Eigen::Index>(b.cols))
        throw FormatError("checkpoint: shape mismatch for " + b.path, b.file_offset);
      std::size_t at = 0;
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c)
          p.value(r, c) = T(b.data[at++]);
      p.adam_m.setZero();
      p.adam_v.setZero();
      seen[store_.index_of(b.path)] = true;
    }
    for (std::size_t i = 0; i < store_.size(); ++i) {
      if (!seen[i] && store_.all()[i].path.rfind("head.", 0) != 0)
        throw ConfigError("checkpoint is missing parameter " + store_.all()[i].path);
    }
  }

 private:
  TrainConfig cfg_;
  ParamStore<T> store_;
  Hda hda_;
  bool adapter_frozen_ = false;
};

}  // namespace dapmae
