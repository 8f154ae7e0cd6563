// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "condflow/dynamics.hpp"
#include "condflow/numerics.hpp"

namespace condflow::cli {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t world_seed = 0;
  std::uint64_t world_fingerprint = 0;
  std::size_t world_attr_dim = 0;  // the model may condition on a subset
  FlowModel model;
  Vector world_std;          // per world channel, from the training data
  std::string config_echo;   // canonical config text of the training run
  std::vector<double> loss_curve;
};

/// Byte layout is documented in docs/FORMATS.md.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// IntegrityError on bad magic, version, section CRC, or truncation.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace condflow::cli
