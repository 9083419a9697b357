// SPDX-License-Identifier: Apache-2.0
//
// Corpus persistence: DPC1 files plus a manifest.json listing paths,
// domain codes and optional labels.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dapmae/common.hpp"
#include "dapmae/data.hpp"

namespace dapmae {

/// Writes every cloud as {domain}_{seed}_{i}.dpc plus manifest.json.
/// `base_seed` only feeds the file names; indices restart per domain.
inline void save_corpus(const Corpus& corpus, const std::string& dir,
                        std::uint64_t base_seed) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  nlohmann::json entries = nlohmann::json::array();
  std::array<std::size_t, 3> next{0, 0, 0};
  std::array<std::size_t, 3> counts{0, 0, 0};
  for (std::size_t i = 0; i < corpus.clouds.size(); ++i) {
    const auto& cloud = corpus.clouds[i];
    const auto dcode = static_cast<std::size_t>(cloud.domain);
    std::string name = std::string(domain_name(cloud.domain)) + "_" +
                       std::to_string(base_seed) + "_" +
                       std::to_string(next[dcode]++) + ".dpc";
    save_dpc(cloud, (fs::path(dir) / name).string());
    nlohmann::json e;
    e["path"] = name;
    e["domain"] = static_cast<int>(cloud.domain);
    if (corpus.labeled()) e["label"] = corpus.labels[i];
    entries.push_back(e);
    counts[dcode]++;
  }
  nlohmann::json manifest;
  manifest["entries"] = entries;
  manifest["counts"] = {{"object", counts[0]}, {"face", counts[1]}, {"scene", counts[2]}};
  std::ofstream f((fs::path(dir) / "manifest.json").string(), std::ios::trunc);
  if (!f) throw std::runtime_error("save_corpus: cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream f(mpath);
  if (!f) throw std::runtime_error("load_corpus: cannot open " + mpath);
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_corpus: invalid manifest JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("entries") || !manifest["entries"].is_array())
    throw ConfigError("load_corpus: manifest has no entries array");
  Corpus corpus;
  bool any_label = false;
  for (const auto& e : manifest["entries"]) {
    PointCloud cloud = load_dpc((fs::path(dir) / e.at("path").get<std::string>()).string());
    auto domain = domain_from_code(static_cast<std::uint8_t>(e.at("domain").get<int>()));
    if (domain != cloud.domain)
      throw ConfigError("load_corpus: manifest domain disagrees with " +
                        e.at("path").get<std::string>());
    cloud.id = e.at("path").get<std::string>();
    corpus.clouds.push_back(std::move(cloud));
    if (e.contains("label")) {
      any_label = true;
      corpus.labels.push_back(e.at("label").get<int>());
    } else if (any_label) {
      throw ConfigError("load_corpus: labels must cover every cloud");
    }
  }
  if (any_label && corpus.labels.size() != corpus.clouds.size())
    throw ConfigError("load_corpus: labels must cover every cloud");
  corpus.recount();
  if (manifest.contains("counts")) {
    const auto& c = manifest["counts"];
    if (c.value("object", 0) != static_cast<int>(corpus.manifest[0]) ||
        c.value("face", 0) != static_cast<int>(corpus.manifest[1]) ||
        c.value("scene", 0) != static_cast<int>(corpus.manifest[2]))
      throw ConfigError("load_corpus: manifest counts disagree with entries");
  }
  return corpus;
}

}  // namespace dapmae
