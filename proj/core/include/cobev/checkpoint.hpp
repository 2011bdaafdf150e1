// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "cobev/dmoe.hpp"

namespace cobev {

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'B', 'E', 'V', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json config;
  NamedTensors tensors;

  // Throws CheckpointError when the name is absent.
  const Tensor& at(const std::string& name) const;
};

// Layout (all integers little-endian):
//   8 bytes  magic "COBEVCKP"
//   u32      format version
//   u64      header length L
//   L bytes  UTF-8 JSON header {format, version, config, tensors:[{name, shape, offset, count}]}
//   ...      IEEE-754 binary64 values, little-endian, concatenated in header order
// `offset` and `count` are in elements from the start of the value block.
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                      const NamedTensors& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Same encoding in memory.
std::string encode_checkpoint(const nlohmann::json& config, const NamedTensors& tensors);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace cobev
