// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sste/tensor.hpp"

namespace sste {

/// One named tensor included in a checkpoint. The same entry list is used
/// both to write and to restore, so ids and shapes must line up.
struct CheckpointEntry {
  std::string id;
  Tensor* tensor;
};

namespace detail {

inline void write_f64_le(std::ofstream& f, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  if (!f) throw std::runtime_error("checkpoint: truncated data file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

/// Write tensors as raw little-endian doubles plus a JSON manifest. `extra`
/// rides along in the manifest for run-defined state (scales, counters).
inline void save_checkpoint(const std::filesystem::path& dir,
                            const std::vector<CheckpointEntry>& entries,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["byte_order"] = "little";
  manifest["extra"] = extra;
  nlohmann::json tensors = nlohmann::json::array();

  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("checkpoint: cannot open params.bin for writing");
  std::uint64_t offset = 0;
  for (const CheckpointEntry& e : entries) {
    nlohmann::json t;
    t["id"] = e.id;
    t["shape"] = e.tensor->shape();
    t["offset"] = offset;
    t["count"] = e.tensor->size();
    tensors.push_back(t);
    for (double v : e.tensor->flat()) detail::write_f64_le(bin, v);
    offset += e.tensor->size();
  }
  manifest["tensors"] = tensors;

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("checkpoint: cannot open manifest.json for writing");
  mf << manifest.dump(2) << '\n';
}

/// Restore tensors in place by id; shapes must match what was saved.
/// Returns the manifest's `extra` payload.
inline nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                                      const std::vector<CheckpointEntry>& entries) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("checkpoint: missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("byte_order", "") != "little") {
    throw std::runtime_error("checkpoint: unsupported byte order");
  }

  std::map<std::string, nlohmann::json> index;
  for (const auto& t : manifest.at("tensors")) index.emplace(t.at("id").get<std::string>(), t);

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: missing params.bin in " + dir.string());

  for (const CheckpointEntry& e : entries) {
    auto it = index.find(e.id);
    if (it == index.end()) throw std::runtime_error("checkpoint: no tensor named " + e.id);
    const auto shape = it->second.at("shape").get<std::vector<std::size_t>>();
    if (shape != e.tensor->shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + e.id);
    }
    const std::uint64_t offset = it->second.at("offset").get<std::uint64_t>();
    bin.seekg(static_cast<std::streamoff>(offset * 8));
    for (std::size_t i = 0; i < e.tensor->size(); ++i) (*e.tensor)[i] = detail::read_f64_le(bin);
  }
  return manifest.value("extra", nlohmann::json::object());
}

}  // namespace sste
