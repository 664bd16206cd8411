// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint file.
//
// Layout (all integers little-endian):
//   "SACK" | u32 version (1) | u32 tensor count
//   per tensor: u16 name length | name bytes (UTF-8) | u8 dtype (0 = f64)
//               | u8 trainable | u8 ndim | u32 dims[ndim] | f64 data[prod(dims)]
//   u32 CRC-32 (zlib polynomial) of every preceding byte
//
// Run metadata travels as reserved tensors under the "meta." prefix:
// meta.config holds the JSON text one byte per element, meta.epoch,
// meta.best_val_dice and meta.seed (low and high 32-bit halves).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellprompt/nn.hpp"

namespace cellprompt {

struct CheckpointTensor {
  std::string name;
  bool trainable = false;
  Tensor value;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;  // model parameters, no meta.* entries
  std::string config_json;
  std::uint64_t epoch = 0;
  double best_val_dice = 0.0;
  std::uint64_t seed = 0;

  const CheckpointTensor* find(const std::string& name) const;
};

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError (with the byte offset) on any malformed input.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of parameter values and trainable flags.
std::vector<CheckpointTensor> capture_params(const NamedParams& params);

/// Copies values and trainable flags into `params`. The name sets and shapes
/// must match exactly; nothing is modified if they do not.
void restore_params(const NamedParams& params, const std::vector<CheckpointTensor>& tensors);

}  // namespace cellprompt
