// SPDX-License-Identifier: Apache-2.0
//
// Training configuration: documented defaults per phase, strict JSON
// parsing (unknown keys rejected), and dotted-path overrides for the
// CLI's --set flag.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dapmae/common.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/losses.hpp"
#include "dapmae/nn.hpp"
#include "dapmae/optim.hpp"

namespace dapmae {

using Json = nlohmann::json;

struct PathsConfig {
  std::string corpus;
  std::string checkpoint_in;
  std::string checkpoint_out;
  std::string metrics;
  std::string report;
};

struct TrainConfig {
  std::string phase = "pretrain";  // pretrain | finetune
  std::uint64_t seed = 42;
  std::uint64_t eval_seed = 9001;
  std::string precision = "f32";  // f32 | f64
  ModelDims dims;
  int g = 128;
  int k = 32;
  int n_points = 4096;
  double mask_ratio = 0.6;
  int batch_size = 512;
  int epochs = 300;
  OptimConfig optimizer;
  double warmup_epochs = 10.0;
  LossConfig loss;
  bool use_hda = true;
  bool use_dfg = true;
  double drop_path = 0.0;
  std::string task_domain = "object";
  int n_classes = 4;
  bool augment = true;
  std::vector<std::string> freeze;
  bool allow_fusion_checkpoint = false;
  PathsConfig paths;

  static TrainConfig defaults(const std::string& phase) {
    TrainConfig c;
    c.phase = phase;
    if (phase == "finetune") {
      c.batch_size = 32;
      c.optimizer.lr = 5e-5;
      c.n_points = 2048;
      c.drop_path = 0.1;
    }
    return c;
  }

  DomainId task() const {
    for (int c = 0; c < 3; ++c)
      if (task_domain == domain_name(static_cast<DomainId>(c)))
        return static_cast<DomainId>(c);
    throw ConfigError("task_domain must be object, face or scene, got '" +
                      task_domain + "'");
  }

  void validate() const {
    if (phase != "pretrain" && phase != "finetune")
      throw ConfigError("phase must be pretrain or finetune");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64");
    dims.validate();
    optimizer.validate();
    loss.validate();
    if (g < 1 || k < 1 || n_points < 1) throw ConfigError("patches: g, k, n_points must be >= 1");
    if (g > n_points || k > n_points)
      throw ConfigError("patches: g and k cannot exceed n_points");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
      throw ConfigError("patches: mask_ratio must lie in [0, 1)");
    if (batch_size < 1 || epochs < 1) throw ConfigError("batch_size and epochs must be >= 1");
    if (phase == "pretrain" && batch_size < 2)
      throw ConfigError("pretrain: batch_size must be >= 2 (contrastive pairs)");
    if (warmup_epochs < 0.0) throw ConfigError("schedule: warmup_epochs must be >= 0");
    if (drop_path < 0.0 || drop_path >= 1.0) throw ConfigError("drop_path must lie in [0, 1)");
    if (phase == "finetune") {
      (void)task();
      if (n_classes < 2) throw ConfigError("finetune: n_classes must be >= 2");
      if (paths.checkpoint_in.empty())
        throw ConfigError("finetune: paths.checkpoint_in is required");
    }
  }
};

namespace cfgio {

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["phase"] = c.phase;
  j["seed"] = c.seed;
  j["eval_seed"] = c.eval_seed;
  j["precision"] = c.precision;
  j["dims"] = {{"d_model", c.dims.d_model},
               {"d_in", c.dims.d_in},
               {"hidden", c.dims.hidden},
               {"enc_layers", c.dims.enc_layers},
               {"dec_layers", c.dims.dec_layers},
               {"heads", c.dims.heads},
               {"dfg_heads", c.dims.dfg_heads},
               {"patch_hidden", c.dims.patch_hidden},
               {"pos_hidden", c.dims.pos_hidden},
               {"fusion_hidden", c.dims.fusion_hidden},
               {"head_hidden", c.dims.head_hidden}};
  j["patches"] = {{"g", c.g},
                  {"k", c.k},
                  {"n_points", c.n_points},
                  {"mask_ratio", c.mask_ratio}};
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  j["schedule"] = {{"warmup_epochs", c.warmup_epochs}};
  j["loss"] = {{"w1", c.loss.w1},
               {"w2", c.loss.w2},
               {"margin", c.loss.margin},
               {"pair_reduction",
                c.loss.pair_reduction == PairReduction::Sum ? "sum" : "mean"}};
  j["use_hda"] = c.use_hda;
  j["use_dfg"] = c.use_dfg;
  j["drop_path"] = c.drop_path;
  j["task_domain"] = c.task_domain;
  j["n_classes"] = c.n_classes;
  j["augment"] = c.augment;
  j["freeze"] = c.freeze;
  j["allow_fusion_checkpoint"] = c.allow_fusion_checkpoint;
  j["paths"] = {{"corpus", c.paths.corpus},
                {"checkpoint_in", c.paths.checkpoint_in},
                {"checkpoint_out", c.paths.checkpoint_out},
                {"metrics", c.paths.metrics},
                {"report", c.paths.report}};
  return j;
}

/// Rejects any key in `doc` that the schema (default document) does not
/// know, recursively. Paths are reported dotted.
inline void reject_unknown_keys(const Json& doc, const Json& schema,
                                const std::string& prefix = "") {
  if (!doc.is_object()) return;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key()))
      throw ConfigError("unknown config key '" + path + "'");
    if (it.value().is_object()) reject_unknown_keys(it.value(), schema.at(it.key()), path);
  }
}

template <typename V>
V get_as(const Json& j, const std::string& dotted) {
  try {
    return j.get<V>();
  } catch (const Json::exception&) {
    throw ConfigError("config key '" + dotted + "' has the wrong type (value: " +
                      j.dump() + ")");
  }
}

/// Parses a config document on top of the phase defaults. Unknown keys
/// and type mismatches raise ConfigError naming the key.
inline TrainConfig from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  std::string phase = "pretrain";
  if (doc.contains("phase")) phase = get_as<std::string>(doc.at("phase"), "phase");
  TrainConfig c = TrainConfig::defaults(phase);
  Json schema = to_json(c);
  reject_unknown_keys(doc, schema);
  Json merged = schema;
  merged.merge_patch(doc);

  c.phase = get_as<std::string>(merged.at("phase"), "phase");
  c.seed = get_as<std::uint64_t>(merged.at("seed"), "seed");
  c.eval_seed = get_as<std::uint64_t>(merged.at("eval_seed"), "eval_seed");
  c.precision = get_as<std::string>(merged.at("precision"), "precision");
  const Json& d = merged.at("dims");
  c.dims.d_model = get_as<int>(d.at("d_model"), "dims.d_model");
  c.dims.d_in = get_as<int>(d.at("d_in"), "dims.d_in");
  c.dims.hidden = get_as<int>(d.at("hidden"), "dims.hidden");
  c.dims.enc_layers = get_as<int>(d.at("enc_layers"), "dims.enc_layers");
  c.dims.dec_layers = get_as<int>(d.at("dec_layers"), "dims.dec_layers");
  c.dims.heads = get_as<int>(d.at("heads"), "dims.heads");
  c.dims.dfg_heads = get_as<int>(d.at("dfg_heads"), "dims.dfg_heads");
  c.dims.patch_hidden = get_as<int>(d.at("patch_hidden"), "dims.patch_hidden");
  c.dims.pos_hidden = get_as<int>(d.at("pos_hidden"), "dims.pos_hidden");
  c.dims.fusion_hidden = get_as<int>(d.at("fusion_hidden"), "dims.fusion_hidden");
  c.dims.head_hidden = get_as<int>(d.at("head_hidden"), "dims.head_hidden");
  const Json& p = merged.at("patches");
  c.g = get_as<int>(p.at("g"), "patches.g");
  c.k = get_as<int>(p.at("k"), "patches.k");
  c.n_points = get_as<int>(p.at("n_points"), "patches.n_points");
  c.mask_ratio = get_as<double>(p.at("mask_ratio"), "patches.mask_ratio");
  c.batch_size = get_as<int>(merged.at("batch_size"), "batch_size");
  c.epochs = get_as<int>(merged.at("epochs"), "epochs");
  const Json& o = merged.at("optimizer");
  c.optimizer.lr = get_as<double>(o.at("lr"), "optimizer.lr");
  c.optimizer.weight_decay = get_as<double>(o.at("weight_decay"), "optimizer.weight_decay");
  c.optimizer.beta1 = get_as<double>(o.at("beta1"), "optimizer.beta1");
  c.optimizer.beta2 = get_as<double>(o.at("beta2"), "optimizer.beta2");
  c.optimizer.eps = get_as<double>(o.at("eps"), "optimizer.eps");
  c.warmup_epochs = get_as<double>(merged.at("schedule").at("warmup_epochs"),
                                   "schedule.warmup_epochs");
  const Json& l = merged.at("loss");
  c.loss.w1 = get_as<double>(l.at("w1"), "loss.w1");
  c.loss.w2 = get_as<double>(l.at("w2"), "loss.w2");
  c.loss.margin = get_as<double>(l.at("margin"), "loss.margin");
  std::string red = get_as<std::string>(l.at("pair_reduction"), "loss.pair_reduction");
  if (red == "sum") c.loss.pair_reduction = PairReduction::Sum;
  else if (red == "mean") c.loss.pair_reduction = PairReduction::Mean;
  else throw ConfigError("loss.pair_reduction must be sum or mean");
  c.use_hda = get_as<bool>(merged.at("use_hda"), "use_hda");
  c.use_dfg = get_as<bool>(merged.at("use_dfg"), "use_dfg");
  c.drop_path = get_as<double>(merged.at("drop_path"), "drop_path");
  c.task_domain = get_as<std::string>(merged.at("task_domain"), "task_domain");
  c.n_classes = get_as<int>(merged.at("n_classes"), "n_classes");
  c.augment = get_as<bool>(merged.at("augment"), "augment");
  c.freeze = get_as<std::vector<std::string>>(merged.at("freeze"), "freeze");
  c.allow_fusion_checkpoint =
      get_as<bool>(merged.at("allow_fusion_checkpoint"), "allow_fusion_checkpoint");
  const Json& pa = merged.at("paths");
  c.paths.corpus = get_as<std::string>(pa.at("corpus"), "paths.corpus");
  c.paths.checkpoint_in = get_as<std::string>(pa.at("checkpoint_in"), "paths.checkpoint_in");
  c.paths.checkpoint_out = get_as<std::string>(pa.at("checkpoint_out"), "paths.checkpoint_out");
  c.paths.metrics = get_as<std::string>(pa.at("metrics"), "paths.metrics");
  c.paths.report = get_as<std::string>(pa.at("report"), "paths.report");
  c.validate();
  return c;
}

/// Applies one `--set a.b.c=value` override onto a raw config document.
/// The value parses as JSON when possible, else as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;  // unquoted string
  }
  Json* at = &doc;
  std::size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos
                                                                  : dot - start);
    if (part.empty()) throw ConfigError("--set key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*at)[part] = value;
      break;
    }
    at = &(*at)[part];
    start = dot + 1;
  }
}

}  // namespace cfgio

}  // namespace dapmae
