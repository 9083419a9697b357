// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: pre-training (adaptation mode), fine-tuning
// (fusion mode, frozen HDA branches), deterministic evaluation with a
// closed-form linear domain probe, and the finite-difference gradient
// checker. Metrics are emitted as one JSON object per epoch.

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dapmae/model.hpp"
#include "dapmae/optim.hpp"

namespace dapmae {

constexpr std::uint64_t kEpochTag = 0xe90cull;
constexpr std::uint64_t kEvalTag = 0xe7a1ull;

/// Collects metrics lines; optionally mirrors them to a JSONL file.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path = "") {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw std::runtime_error("metrics: cannot open " + path);
    }
  }

  void emit(const Json& j) {
    lines_.push_back(j.dump());
    if (file_.is_open()) file_ << lines_.back() << "\n" << std::flush;
  }

  const std::vector<std::string>& lines() const { return lines_; }
  std::string tail() const { return lines_.empty() ? std::string() : lines_.back(); }

 private:
  std::ofstream file_;
  std::vector<std::string> lines_;
};

template <typename T>
struct RunResult {
  Model<T> model;
  CheckpointData checkpoint;
  std::vector<std::string> metrics_lines;
};

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

template <typename T>
RunResult<T> pretrain(const TrainConfig& cfg, const Corpus& corpus,
                      MetricsWriter* metrics = nullptr) {
  if (cfg.phase != "pretrain") throw ConfigError("pretrain: config phase mismatch");
  if (corpus.clouds.empty()) throw std::invalid_argument("pretrain: empty corpus");
  if (corpus.domain_count() < 2)
    std::fprintf(stderr,
                 "warning: single-domain corpus; contrastive pairs are all "
                 "same-domain\n");

  Model<T> model(cfg);
  std::uint32_t start_epoch = 0;
  Rng step_rng(mix_seed(cfg.seed, kMaskTag));
  if (!cfg.paths.checkpoint_in.empty()) {
    CheckpointData ck = load_checkpoint(cfg.paths.checkpoint_in);
    if (ck.hda_mode == static_cast<std::uint8_t>(HdaMode::Fusion))
      throw ConfigError("pretrain: checkpoint is already in fusion mode");
    model.load_params(ck);
    start_epoch = ck.epoch;
    step_rng.set_state(ck.rng_state);
  }

  AdamW<T> opt(cfg.optimizer);
  MetricsWriter local;
  MetricsWriter& mw = metrics ? *metrics : local;

  const auto first = make_batches(corpus, std::size_t(cfg.batch_size),
                                  std::size_t(cfg.n_points),
                                  mix_seed(mix_seed(cfg.seed, kEpochTag), 1));
  const double steps_per_epoch = double(first.size());
  std::int64_t global_step = std::int64_t(start_epoch) * std::int64_t(first.size());

  for (std::uint32_t epoch = start_epoch + 1; epoch <= std::uint32_t(cfg.epochs); ++epoch) {
    auto batches = make_batches(corpus, std::size_t(cfg.batch_size),
                                std::size_t(cfg.n_points),
                                mix_seed(mix_seed(cfg.seed, kEpochTag), epoch));
    double sum_rec = 0.0, sum_con = 0.0, sum_total = 0.0, last_lr = 0.0;
    for (const Batch& batch : batches) {
      last_lr = lr_at(cfg.optimizer.lr, cfg.warmup_epochs, double(cfg.epochs),
                      double(global_step) / steps_per_epoch);
      Graph<T> g;
      model.params().bind(g);
      auto out = model.pretrain_loss(g, batch, step_rng.next_u64());
      if (!std::isfinite(out.report.l_total))
        throw DivergenceError("pretrain: non-finite loss", global_step);
      g.backward(out.loss);
      model.params().pull_grads(g);
      opt.step(model.params(), last_lr);
      sum_rec += out.report.l_rec;
      sum_con += out.report.l_con;
      sum_total += out.report.l_total;
      ++global_step;
    }
    const double nb = double(batches.size());
    Json line;
    line["epoch"] = epoch;
    line["l_rec"] = sum_rec / nb;
    line["l_con"] = sum_con / nb;
    line["l_total"] = sum_total / nb;
    line["lr"] = last_lr;
    mw.emit(line);
  }

  CheckpointData ck = model.to_checkpoint(std::uint32_t(cfg.epochs),
                                          step_rng.state(), mw.tail());
  if (!cfg.paths.checkpoint_out.empty()) save_checkpoint(cfg.paths.checkpoint_out, ck);
  return RunResult<T>{std::move(model), std::move(ck), mw.lines()};
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

template <typename T>
RunResult<T> finetune(const TrainConfig& cfg, const CheckpointData& source,
                      const Corpus& corpus, MetricsWriter* metrics = nullptr) {
  if (cfg.phase != "finetune") throw ConfigError("finetune: config phase mismatch");
  if (!corpus.labeled()) throw ConfigError("finetune: corpus provides no labels");
  for (int label : corpus.labels)
    if (label < 0 || label >= cfg.n_classes)
      throw ConfigError("finetune: corpus label outside n_classes");
  if (source.hda_mode == static_cast<std::uint8_t>(HdaMode::Fusion) &&
      !cfg.allow_fusion_checkpoint)
    throw ConfigError(
        "finetune: checkpoint is already in fusion mode (pass "
        "allow_fusion_checkpoint to override)");
  if ((source.use_hda != 0) != cfg.use_hda || (source.use_dfg != 0) != cfg.use_dfg)
    throw ConfigError("finetune: use_hda/use_dfg flags disagree with the checkpoint");

  Model<T> model(cfg);
  model.load_params(source);
  model.enter_fusion_mode();

  AdamW<T> opt(cfg.optimizer);
  MetricsWriter local;
  MetricsWriter& mw = metrics ? *metrics : local;
  Rng drop_rng(mix_seed(cfg.seed, kDropTag));
  Rng aug_rng(mix_seed(cfg.seed, kAugTag));

  const auto first = make_batches(corpus, std::size_t(cfg.batch_size),
                                  std::size_t(cfg.n_points),
                                  mix_seed(mix_seed(cfg.seed, kEpochTag), 1));
  const double steps_per_epoch = double(first.size());
  std::int64_t global_step = 0;

  for (std::uint32_t epoch = 1; epoch <= std::uint32_t(cfg.epochs); ++epoch) {
    auto batches = make_batches(corpus, std::size_t(cfg.batch_size),
                                std::size_t(cfg.n_points),
                                mix_seed(mix_seed(cfg.seed, kEpochTag), epoch));
    double sum_loss = 0.0, last_lr = 0.0;
    int correct = 0, total = 0;
    for (Batch& batch : batches) {
      if (cfg.augment)
        for (auto& cloud : batch.clouds) cloud = augment_cloud(cloud, aug_rng);
      last_lr = lr_at(cfg.optimizer.lr, cfg.warmup_epochs, double(cfg.epochs),
                      double(global_step) / steps_per_epoch);
      Graph<T> g;
      model.params().bind(g);
      auto out = model.finetune_loss(g, batch, /*training=*/true, &drop_rng);
      if (!std::isfinite(out.ce))
        throw DivergenceError("finetune: non-finite loss", global_step);
      g.backward(out.loss);
      model.params().pull_grads(g);
      opt.step(model.params(), last_lr);
      sum_loss += out.ce;
      correct += out.correct;
      total += int(batch.size());
      ++global_step;
    }
    Json line;
    line["epoch"] = epoch;
    line["l_total"] = sum_loss / double(batches.size());
    line["lr"] = last_lr;
    line["accuracy"] = double(correct) / double(total);
    mw.emit(line);
  }

  CheckpointData ck = model.to_checkpoint(std::uint32_t(cfg.epochs),
                                          drop_rng.state(), mw.tail());
  if (!cfg.paths.checkpoint_out.empty()) save_checkpoint(cfg.paths.checkpoint_out, ck);
  return RunResult<T>{std::move(model), std::move(ck), mw.lines()};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  bool has_recon = false;
  double mean_recon = 0.0;
  bool has_accuracy = false;
  double accuracy = 0.0;
  bool has_probe = false;
  double probe_accuracy = 0.0;
};

namespace detail {

/// Closed-form ridge classifier on (features, labels): one-vs-all least
/// squares with a bias column; returns held-out accuracy.
inline double linear_probe_accuracy(const Eigen::MatrixXd& x_train,
                                    const std::vector<int>& y_train,
                                    const Eigen::MatrixXd& x_test,
                                    const std::vector<int>& y_test, int classes) {
  const Eigen::Index n = x_train.rows(), d = x_train.cols();
  Eigen::MatrixXd xa(n, d + 1);
  xa << x_train, Eigen::VectorXd::Ones(n);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) y(i, y_train[std::size_t(i)]) = 1.0;
  Eigen::MatrixXd gram = xa.transpose() * xa;
  gram.diagonal().array() += 1e-4;
  Eigen::MatrixXd w = gram.ldlt().solve(xa.transpose() * y);
  Eigen::MatrixXd xt(x_test.rows(), d + 1);
  xt << x_test, Eigen::VectorXd::Ones(x_test.rows());
  Eigen::MatrixXd pred = xt * w;
  int correct = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < classes; ++c)
      if (pred(i, c) > pred(i, best)) best = c;
    if (int(best) == y_test[std::size_t(i)]) ++correct;
  }
  return double(correct) / double(pred.rows());
}

}  // namespace detail

/// Deterministic evaluation: mean masked-reconstruction loss, task
/// accuracy (fine-tuned models on labeled corpora), and the linear
/// domain-probe accuracy on DFG domain features (50/50 stratified
/// split of the given corpus, fit on the first half).
template <typename T>
EvalReport evaluate(Model<T>& model, const Corpus& corpus,
                    bool want_accuracy = false) {
  const TrainConfig& cfg = model.cfg();
  EvalReport report;
  if (corpus.clouds.empty()) throw std::invalid_argument("evaluate: empty corpus");
  if (want_accuracy && !corpus.labeled())
    throw ConfigError("evaluate: accuracy requested but corpus has no labels");

  // Reconstruction over the corpus under fixed eval masks.
  std::vector<PointCloud> prepared(corpus.clouds.size());
  for (std::size_t i = 0; i < corpus.clouds.size(); ++i) {
    Rng rng(mix_seed(mix_seed(cfg.eval_seed, kEvalTag), i));
    prepared[i] = detail::subsample(normalize_cloud(corpus.clouds[i]),
                                        std::size_t(cfg.n_points), rng);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < prepared.size(); ++i)
    sum += model.recon_value(prepared[i], mix_seed(cfg.eval_seed, 0x11aa + i));
  report.mean_recon = sum / double(prepared.size());
  report.has_recon = true;

  if (want_accuracy) {
    auto batches = make_batches(corpus, std::size_t(cfg.batch_size),
                                std::size_t(cfg.n_points), cfg.eval_seed);
    int correct = 0, total = 0;
    for (const Batch& b : batches) {
      auto pred = model.predict(b);
      for (std::size_t i = 0; i < b.size(); ++i)
        correct += pred[i] == b.labels[i] ? 1 : 0;
      total += int(b.size());
    }
    report.accuracy = double(correct) / double(total);
    report.has_accuracy = true;
  }

  if (cfg.use_dfg && corpus.domain_count() >= 2) {
    // Stratified 50/50 split per domain, train on the first half.
    std::array<std::vector<std::size_t>, 3> by_domain;
    for (std::size_t i = 0; i < corpus.clouds.size(); ++i)
      by_domain[std::size_t(corpus.clouds[i].domain)].push_back(i);
    std::vector<std::size_t> train_idx, test_idx;
    for (auto& group : by_domain) {
      for (std::size_t j = 0; j < group.size(); ++j)
        (j < group.size() / 2 ? train_idx : test_idx).push_back(group[j]);
    }
    auto collect = [&](const std::vector<std::size_t>& idx, Eigen::MatrixXd& x,
                       std::vector<int>& y) {
      x.resize(Eigen::Index(idx.size()), cfg.dims.d_model);
      y.clear();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        auto feats = model.features(prepared[idx[r]]);
        for (int c = 0; c < cfg.dims.d_model; ++c)
          x(Eigen::Index(r), c) = double(feats.d(0, c));
        y.push_back(int(corpus.clouds[idx[r]].domain));
      }
    };
    Eigen::MatrixXd x_train, x_test;
    std::vector<int> y_train, y_test;
    collect(train_idx, x_train, y_train);
    collect(test_idx, x_test, y_test);
    report.probe_accuracy =
        detail::linear_probe_accuracy(x_train, y_train, x_test, y_test, 3);
    report.has_probe = true;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckBlock {
  std::string path;
  double max_rel_err = 0.0;
  bool has_grad = false;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_err = 0.0;
  bool passed = true;

  Json to_json() const {
    Json j;
    j["max_rel_err"] = max_rel_err;
    j["passed"] = passed;
    Json arr = Json::array();
    for (const auto& b : blocks) {
      Json e;
      e["path"] = b.path;
      if (b.has_grad) e["max_rel_err"] = b.max_rel_err;
      else e["max_rel_err"] = "no gradient";
      arr.push_back(e);
    }
    j["blocks"] = arr;
    return j;
  }
};

/// Tiny double-precision dimensions for the gradient suite. Unit loss
/// weights keep the finite differences well conditioned.
inline TrainConfig gradcheck_defaults() {
  TrainConfig c = TrainConfig::defaults("pretrain");
  c.precision = "f64";
  c.dims.d_model = 8;
  c.dims.d_in = 8;
  c.dims.hidden = 8;
  c.dims.enc_layers = 1;
  c.dims.dec_layers = 1;
  c.dims.heads = 2;
  c.dims.dfg_heads = 2;
  c.dims.patch_hidden = 8;
  c.dims.pos_hidden = 8;
  c.dims.fusion_hidden = 8;
  c.dims.head_hidden = 16;
  c.g = 6;
  c.k = 4;
  c.n_points = 32;
  c.mask_ratio = 0.5;
  c.batch_size = 3;
  c.epochs = 1;
  c.loss.w1 = 1.0;
  c.loss.w2 = 1.0;
  c.loss.margin = 0.2;
  c.drop_path = 0.0;
  c.seed = 411;
  return c;
}

namespace detail {

// Central-difference step. At the tiny check dims the loss has steep
// third derivatives (cosine terms over small-norm features, batch norm
// over few rows), so the step must stay well inside the locally linear
// region; 1e-6 in double keeps truncation ~1e-7 while rounding stays
// below 1e-9.
constexpr double kFdStep = 1e-6;
constexpr double kGradTol = 1e-5;

/// Moves the check to a generic point in parameter space. Fresh zero
/// biases park every ReLU preactivation exactly on its kink, where
/// finite differences straddle two slopes.
inline void jitter_params(Model<double>& model, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x71773ull));
  for (auto& p : model.params().all()) {
    if (p.path.find(".bn.running_") != std::string::npos) continue;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c)
        p.value(r, c) += 0.02 * rng.normal();
  }
}

inline double rel_err(double a, double b) {
  double scale = std::max(1.0, std::max(std::fabs(a), std::fabs(b)));
  return std::fabs(a - b) / scale;
}

template <typename LossFn>
void fd_check_composite(Model<double>& model, LossFn&& loss_fn,
                        const std::string& filter,
                        std::map<std::string, GradCheckBlock>& blocks,
                        const std::function<void(const std::string&,
                                                 Eigen::MatrixXd&)>& corrupt) {
  Graph<double> g;
  model.params().bind(g);
  Ten<double> loss = loss_fn(g);
  g.backward(loss);
  model.params().pull_grads(g);

  for (auto& p : model.params().all()) {
    if (!filter.empty() && p.path.rfind(filter, 0) != 0) continue;
    auto& block = blocks[p.path];
    block.path = p.path;
    if (!p.trainable || !p.has_grad) continue;
    block.has_grad = true;
    Eigen::MatrixXd analytic = p.grad;
    if (corrupt) corrupt(p.path, analytic);
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        const double saved = p.value(r, c);
        p.value(r, c) = saved + kFdStep;
        Graph<double> gp;
        model.params().bind(gp);
        const double up = gp.val(loss_fn(gp))(0, 0);
        p.value(r, c) = saved - kFdStep;
        Graph<double> gm;
        model.params().bind(gm);
        const double dn = gm.val(loss_fn(gm))(0, 0);
        p.value(r, c) = saved;
        const double fd = (up - dn) / (2.0 * kFdStep);
        block.max_rel_err = std::max(block.max_rel_err, rel_err(fd, analytic(r, c)));
      }
    }
  }
}

}  // namespace detail

/// Central finite differences (step 1e-4, double precision) against the
/// reverse-mode gradients of the full pre-training loss and of the
/// fine-tuning loss, for every trainable block whose path starts with
/// `filter`. The optional corruption hook perturbs analytic gradients
/// (negative-control testing).
inline GradCheckReport grad_check(
    const TrainConfig& base, const std::string& filter = "",
    const std::function<void(const std::string&, Eigen::MatrixXd&)>& corrupt = nullptr) {
  TrainConfig cfg = base;
  cfg.phase = "pretrain";
  cfg.precision = "f64";
  cfg.drop_path = 0.0;
  cfg.paths.checkpoint_in.clear();
  cfg.validate();

  // One cloud per domain, prepared the same way training prepares them.
  Batch batch;
  for (int c = 0; c < 3; ++c) {
    Rng rng(mix_seed(cfg.seed, 0x6e + std::uint64_t(c)));
    PointCloud cloud = gen_synthetic(static_cast<DomainId>(c),
                                     mix_seed(cfg.seed, std::uint64_t(c)),
                                     std::size_t(std::max(cfg.n_points, 16)));
    batch.clouds.push_back(
        detail::subsample(normalize_cloud(cloud), std::size_t(cfg.n_points), rng));
    batch.domains.push_back(static_cast<DomainId>(c));
  }

  std::map<std::string, GradCheckBlock> blocks;

  Model<double> pre(cfg);
  detail::jitter_params(pre, cfg.seed);
  const std::uint64_t step_seed = mix_seed(cfg.seed, 0x57e9ull);
  detail::fd_check_composite(
      pre,
      [&](Graph<double>& g) { return pre.pretrain_loss(g, batch, step_seed).loss; },
      filter, blocks, corrupt);

  // Fine-tuning composite: fusion-mode adapter, labeled object batch.
  TrainConfig ft = cfg;
  ft.phase = "finetune";
  ft.task_domain = "object";
  ft.n_classes = 4;
  ft.paths.checkpoint_in = "-";  // satisfied structurally; no file involved
  ft.validate();
  Batch fbatch;
  for (int i = 0; i < 3; ++i) {
    Rng rng(mix_seed(cfg.seed, 0x8f + std::uint64_t(i)));
    int label = 0;
    PointCloud cloud = gen_labeled_object(mix_seed(cfg.seed, 0x90 + std::uint64_t(i)),
                                          std::size_t(std::max(cfg.n_points, 16)), &label);
    fbatch.clouds.push_back(
        detail::subsample(normalize_cloud(cloud), std::size_t(cfg.n_points), rng));
    fbatch.domains.push_back(DomainId::Object);
    fbatch.labels.push_back(label % ft.n_classes);
  }
  Model<double> fin(ft);
  detail::jitter_params(fin, cfg.seed + 1);
  fin.enter_fusion_mode();
  detail::fd_check_composite(
      fin,
      [&](Graph<double>& g) {
        return fin.finetune_loss(g, fbatch, /*training=*/true, nullptr).loss;
      },
      filter, blocks, corrupt);

  GradCheckReport report;
  for (auto& [path, block] : blocks) {
    report.blocks.push_back(block);
    if (block.has_grad) {
      report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
      if (block.max_rel_err > detail::kGradTol) report.passed = false;
    }
  }
  return report;
}

}  // namespace dapmae
