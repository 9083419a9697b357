// SPDX-License-Identifier: Apache-2.0
//
// DAPM checkpoint container.
//
// Little-endian layout:
//   "DAPM" | version u32 | phase u8 | hda_mode u8 | use_hda u8 |
//   use_dfg u8 | epoch u32 | rng_state u64 |
//   config_len u32 | config JSON bytes |
//   metrics_len u32 | metrics tail bytes |
//   param_count u32 | { path_len u16 | path | rows u32 | cols u32 |
//                       trainable u8 | dtype u8 (0 = f32) | f32 data } *
//
// No timestamps anywhere, so identical runs write identical bytes.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dapmae/common.hpp"

namespace dapmae {

constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamBlob {
  std::string path;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  bool trainable = true;
  std::vector<float> data;        // row-major
  std::uint64_t file_offset = 0;  // where this blob started, when loaded
};

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::uint8_t phase = 0;     // 0 pretrain, 1 finetune
  std::uint8_t hda_mode = 0;  // 0 adaptation, 1 fusion
  std::uint8_t use_hda = 1;
  std::uint8_t use_dfg = 1;
  std::uint32_t epoch = 0;
  std::uint64_t rng_state = 0;
  std::string config_json;
  std::string metrics_tail;
  std::vector<ParamBlob> params;
};

namespace ckio {

template <typename V>
void put(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::ifstream& f, std::uint64_t& offset, const char* what) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (f.gcount() != sizeof(V))
    throw FormatError(std::string("checkpoint: truncated ") + what, offset);
  offset += sizeof(V);
  return v;
}

inline std::string take_str(std::ifstream& f, std::uint64_t& offset,
                            std::uint64_t len, const char* what) {
  std::string s(len, '\0');
  f.read(s.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(f.gcount()) != len)
    throw FormatError(std::string("checkpoint: truncated ") + what, offset);
  offset += len;
  return s;
}

}  // namespace ckio

inline void save_checkpoint(const std::string& path, const CheckpointData& ck) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write("DAPM", 4);
  ckio::put(f, ck.version);
  ckio::put(f, ck.phase);
  ckio::put(f, ck.hda_mode);
  ckio::put(f, ck.use_hda);
  ckio::put(f, ck.use_dfg);
  ckio::put(f, ck.epoch);
  ckio::put(f, ck.rng_state);
  auto clen = static_cast<std::uint32_t>(ck.config_json.size());
  ckio::put(f, clen);
  f.write(ck.config_json.data(), clen);
  auto mlen = static_cast<std::uint32_t>(ck.metrics_tail.size());
  ckio::put(f, mlen);
  f.write(ck.metrics_tail.data(), mlen);
  auto n = static_cast<std::uint32_t>(ck.params.size());
  ckio::put(f, n);
  for (const auto& b : ck.params) {
    auto plen = static_cast<std::uint16_t>(b.path.size());
    ckio::put(f, plen);
    f.write(b.path.data(), plen);
    ckio::put(f, b.rows);
    ckio::put(f, b.cols);
    std::uint8_t tr = b.trainable ? 1 : 0;
    ckio::put(f, tr);
    std::uint8_t dtype = 0;
    ckio::put(f, dtype);
    f.write(reinterpret_cast<const char*>(b.data.data()),
            static_cast<std::streamsize>(b.data.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::uint64_t offset = 0;
  char magic[4] = {};
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "DAPM", 4) != 0)
    throw FormatError("checkpoint: bad magic", 0);
  offset = 4;
  CheckpointData ck;
  ck.version = ckio::take<std::uint32_t>(f, offset, "version");
  if (ck.version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(ck.version),
                      offset - 4);
  ck.phase = ckio::take<std::uint8_t>(f, offset, "phase");
  if (ck.phase > 1) throw FormatError("checkpoint: bad phase flag", offset - 1);
  ck.hda_mode = ckio::take<std::uint8_t>(f, offset, "hda_mode");
  if (ck.hda_mode > 1) throw FormatError("checkpoint: bad mode flag", offset - 1);
  ck.use_hda = ckio::take<std::uint8_t>(f, offset, "use_hda");
  ck.use_dfg = ckio::take<std::uint8_t>(f, offset, "use_dfg");
  ck.epoch = ckio::take<std::uint32_t>(f, offset, "epoch");
  ck.rng_state = ckio::take<std::uint64_t>(f, offset, "rng_state");
  auto clen = ckio::take<std::uint32_t>(f, offset, "config length");
  ck.config_json = ckio::take_str(f, offset, clen, "config JSON");
  auto mlen = ckio::take<std::uint32_t>(f, offset, "metrics length");
  ck.metrics_tail = ckio::take_str(f, offset, mlen, "metrics tail");
  auto n = ckio::take<std::uint32_t>(f, offset, "parameter count");
  ck.params.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ParamBlob b;
    b.file_offset = offset;
    auto plen = ckio::take<std::uint16_t>(f, offset, "parameter path length");
    b.path = ckio::take_str(f, offset, plen, "parameter path");
    b.rows = ckio::take<std::uint32_t>(f, offset, "parameter rows");
    b.cols = ckio::take<std::uint32_t>(f, offset, "parameter cols");
    b.trainable = ckio::take<std::uint8_t>(f, offset, "trainable flag") != 0;
    auto dtype = ckio::take<std::uint8_t>(f, offset, "dtype");
    if (dtype != 0)
      throw FormatError("checkpoint: unsupported dtype for " + b.path, offset - 1);
    const std::uint64_t count = std::uint64_t(b.rows) * b.cols;
    b.data.resize(count);
    f.read(reinterpret_cast<char*>(b.data.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::uint64_t>(f.gcount()) != count * sizeof(float))
      throw FormatError("checkpoint: truncated data for " + b.path, offset);
    offset += count * sizeof(float);
    ck.params.push_back(std::move(b));
  }
  return ck;
}

}  // namespace dapmae
