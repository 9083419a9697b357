// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: synthetic data generation, pre-training,
// fine-tuning, evaluation, gradient checking and checkpoint inspection.
// Exit codes: 0 success, 1 training divergence, 2 configuration/format
// error, 3 gradient-check failure. Every error is also printed as a
// single-line JSON object on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dapmae/config.hpp"
#include "dapmae/corpus_io.hpp"
#include "dapmae/model.hpp"
#include "dapmae/trainer.hpp"

namespace {

using dapmae::Json;

void print_error(int code, const std::string& message, const std::string& context) {
  Json j;
  j["code"] = code;
  j["message"] = message;
  j["context"] = context;
  std::cerr << j.dump() << "\n";
}

dapmae::TrainConfig load_config(const std::string& path,
                                const std::vector<std::string>& overrides,
                                const std::string& phase_default) {
  Json doc = Json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw dapmae::ConfigError("cannot open config file " + path);
    try {
      f >> doc;
    } catch (const Json::exception& e) {
      throw dapmae::ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
  }
  if (!doc.contains("phase")) doc["phase"] = phase_default;
  for (const auto& ov : overrides) dapmae::cfgio::apply_override(doc, ov);
  return dapmae::cfgio::from_json(doc);
}

dapmae::Corpus corpus_for(const dapmae::TrainConfig& cfg) {
  if (cfg.paths.corpus.empty())
    throw dapmae::ConfigError("paths.corpus is required for this command");
  return dapmae::load_corpus(cfg.paths.corpus);
}

int run_gen_data(const std::string& domain, int count, int points,
                 std::uint64_t seed, const std::string& out) {
  if (count < 1) throw dapmae::ConfigError("count must be >= 1");
  if (points < 16) throw dapmae::ConfigError("points must be >= 16");
  std::array<std::size_t, 3> per{0, 0, 0};
  if (domain == "all") {
    per = {std::size_t(count), std::size_t(count), std::size_t(count)};
  } else {
    bool known = false;
    for (int c = 0; c < 3; ++c) {
      if (domain == dapmae::domain_name(static_cast<dapmae::DomainId>(c))) {
        per[std::size_t(c)] = std::size_t(count);
        known = true;
      }
    }
    if (!known)
      throw dapmae::ConfigError("domain must be object, face, scene or all, got '" +
                                domain + "'");
  }
  const bool with_labels = domain == "object";
  dapmae::Corpus corpus =
      dapmae::make_synthetic_corpus(per, seed, std::size_t(points), with_labels);
  dapmae::save_corpus(corpus, out, seed);
  std::printf("wrote %zu clouds to %s\n", corpus.clouds.size(), out.c_str());
  return 0;
}

template <typename T>
int run_pretrain_t(const dapmae::TrainConfig& cfg) {
  dapmae::Corpus corpus = corpus_for(cfg);
  dapmae::MetricsWriter metrics(cfg.paths.metrics);
  auto result = dapmae::pretrain<T>(cfg, corpus, &metrics);
  std::printf("pretrain done: %d epochs, checkpoint %s\n", cfg.epochs,
              cfg.paths.checkpoint_out.empty() ? "(not written)"
                                               : cfg.paths.checkpoint_out.c_str());
  if (!result.metrics_lines.empty())
    std::printf("last epoch: %s\n", result.metrics_lines.back().c_str());
  return 0;
}

template <typename T>
int run_finetune_t(const dapmae::TrainConfig& cfg) {
  dapmae::Corpus corpus = corpus_for(cfg);
  dapmae::CheckpointData source = dapmae::load_checkpoint(cfg.paths.checkpoint_in);
  dapmae::MetricsWriter metrics(cfg.paths.metrics);
  auto result = dapmae::finetune<T>(cfg, source, corpus, &metrics);
  std::printf("finetune done: %d epochs, checkpoint %s\n", cfg.epochs,
              cfg.paths.checkpoint_out.empty() ? "(not written)"
                                               : cfg.paths.checkpoint_out.c_str());
  if (!result.metrics_lines.empty())
    std::printf("last epoch: %s\n", result.metrics_lines.back().c_str());
  return 0;
}

template <typename T>
int run_eval_t(const dapmae::TrainConfig& cli_cfg, bool want_accuracy) {
  if (cli_cfg.paths.checkpoint_in.empty())
    throw dapmae::ConfigError("eval: paths.checkpoint_in is required");
  dapmae::CheckpointData ck = dapmae::load_checkpoint(cli_cfg.paths.checkpoint_in);
  auto model = dapmae::Model<T>::from_checkpoint(ck);
  dapmae::Corpus corpus = dapmae::load_corpus(cli_cfg.paths.corpus);
  const bool accuracy =
      want_accuracy || (ck.phase == 1 && corpus.labeled());
  auto report = dapmae::evaluate(model, corpus, accuracy);
  Json j;
  j["mean_recon"] = report.mean_recon;
  if (report.has_accuracy) j["accuracy"] = report.accuracy;
  if (report.has_probe) j["probe_accuracy"] = report.probe_accuracy;
  std::cout << j.dump() << "\n";
  if (!cli_cfg.paths.report.empty()) {
    std::ofstream f(cli_cfg.paths.report, std::ios::trunc);
    f << j.dump() << "\n";
  }
  return 0;
}

int run_gradcheck(const std::string& config_path,
                  const std::vector<std::string>& overrides,
                  const std::string& filter) {
  dapmae::TrainConfig cfg;
  if (config_path.empty()) {
    Json doc = dapmae::cfgio::to_json(dapmae::gradcheck_defaults());
    for (const auto& ov : overrides) dapmae::cfgio::apply_override(doc, ov);
    cfg = dapmae::cfgio::from_json(doc);
  } else {
    cfg = load_config(config_path, overrides, "pretrain");
  }
  auto report = dapmae::grad_check(cfg, filter);
  std::cout << report.to_json().dump() << "\n";
  if (!cfg.paths.report.empty()) {
    std::ofstream f(cfg.paths.report, std::ios::trunc);
    f << report.to_json().dump(2) << "\n";
  }
  if (!report.passed) {
    for (const auto& b : report.blocks)
      if (b.has_grad && b.max_rel_err > 1e-5)
        std::fprintf(stderr, "gradcheck: block %s rel err %.3e\n", b.path.c_str(),
                     b.max_rel_err);
    return 3;
  }
  return 0;
}

int run_inspect(const std::string& path) {
  dapmae::CheckpointData ck = dapmae::load_checkpoint(path);
  std::map<std::string, std::size_t> per_module;
  std::size_t total = 0;
  for (const auto& b : ck.params) {
    auto dot = b.path.find('.');
    std::string module = dot == std::string::npos ? b.path : b.path.substr(0, dot);
    per_module[module] += std::size_t(b.rows) * b.cols;
    total += std::size_t(b.rows) * b.cols;
  }
  std::printf("version: %u\n", ck.version);
  std::printf("phase: %s\n", ck.phase == 1 ? "finetune" : "pretrain");
  std::printf("hda_mode: %s\n", ck.hda_mode == 1 ? "fusion" : "adaptation");
  std::printf("epoch: %u\n", ck.epoch);
  std::printf("parameters per module:\n");
  for (const auto& [module, count] : per_module)
    std::printf("  %-12s %zu\n", module.c_str(), count);
  std::printf("total parameters: %zu\n", total);
  std::printf("total bytes: %ju\n",
              static_cast<std::uintmax_t>(std::filesystem::file_size(path)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-domain masked-autoencoder trainer for point clouds"};
  app.require_subcommand(1);

  std::string domain = "object", out_dir = "corpus";
  int count = 0, points = 1024;
  std::uint64_t seed = 42;
  auto* gen = app.add_subcommand("gen-data", "generate synthetic DPC1 clouds");
  gen->add_option("--domain", domain, "object|face|scene|all");
  gen->add_option("--count", count, "clouds per domain")->required();
  gen->add_option("--points", points, "points per cloud");
  gen->add_option("--seed", seed, "base seed");
  gen->add_option("--out", out_dir, "output directory")->required();

  std::string config_path, filter, checkpoint_path;
  std::vector<std::string> overrides;
  bool want_accuracy = false;
  auto add_common = [&](CLI::App* cmd, bool config_required) {
    auto* opt = cmd->add_option("--config", config_path, "JSON config file");
    if (config_required) opt->required();
    cmd->add_option("--set", overrides, "dotted-path override key=value");
  };
  auto* pre = app.add_subcommand("pretrain", "masked-autoencoder pre-training");
  add_common(pre, true);
  auto* fin = app.add_subcommand("finetune", "classification fine-tuning");
  add_common(fin, true);
  auto* eva = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eva, true);
  eva->add_flag("--accuracy", want_accuracy, "require task accuracy");
  auto* grc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grc, false);
  grc->add_option("--filter", filter, "parameter path prefix");
  auto* ins = app.add_subcommand("inspect", "summarize a checkpoint");
  ins->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gen-data") return run_gen_data(domain, count, points, seed, out_dir);
    if (cmd == "gradcheck") return run_gradcheck(config_path, overrides, filter);
    if (cmd == "inspect") return run_inspect(checkpoint_path);
    dapmae::TrainConfig cfg = load_config(
        config_path, overrides, cmd == "finetune" ? "finetune" : "pretrain");
    if (cmd == "pretrain") {
      if (cfg.phase != "pretrain") throw dapmae::ConfigError("config phase must be pretrain");
      return cfg.precision == "f64" ? run_pretrain_t<double>(cfg)
                                    : run_pretrain_t<float>(cfg);
    }
    if (cmd == "finetune") {
      if (cfg.phase != "finetune") throw dapmae::ConfigError("config phase must be finetune");
      return cfg.precision == "f64" ? run_finetune_t<double>(cfg)
                                    : run_finetune_t<float>(cfg);
    }
    if (cmd == "eval")
      return cfg.precision == "f64" ? run_eval_t<double>(cfg, want_accuracy)
                                    : run_eval_t<float>(cfg, want_accuracy);
    throw dapmae::ConfigError("unknown command " + cmd);
  } catch (const dapmae::DivergenceError& e) {
    print_error(1, e.what(), cmd);
    return 1;
  } catch (const dapmae::FormatError& e) {
    print_error(2, e.what(), cmd);
    return 2;
  } catch (const dapmae::ConfigError& e) {
    print_error(2, e.what(), cmd);
    return 2;
  } catch (const dapmae::StateError& e) {
    print_error(2, e.what(), cmd);
    return 2;
  } catch (const std::invalid_argument& e) {
    print_error(2, e.what(), cmd);
    return 2;
  } catch (const std::exception& e) {
    print_error(2, e.what(), cmd);
    return 2;
  }
}
