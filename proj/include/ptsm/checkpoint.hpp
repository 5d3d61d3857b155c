#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ptsm/tensor.hpp"

namespace ptsm {

/// Trained-state container: named tensors (parameters, batch-norm running
/// statistics, optimizer moments) plus a JSON metadata block. Bit-exact on
/// disk; no timestamps or other environment-dependent content.
struct Checkpoint {
  u64 config_hash = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;  // insertion-ordered
  nlohmann::json meta;

  const Tensor* find(const std::string& name) const;
  void add(const std::string& name, const Tensor& t);
};

/// Binary layout: magic "PTSC", version byte, u64 config hash, u32 tensor
/// count, per tensor (u32 name length, name bytes, u32 rank, u32 dims,
/// f64 data), u32 metadata length + UTF-8 JSON, CRC32 trailer. All integers
/// and floats little-endian.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ptsm
