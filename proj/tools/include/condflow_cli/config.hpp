// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "condflow/odeint.hpp"

namespace condflow::cli {

/// Everything a run can be configured with. Defaults follow the reference
/// training setup: d = 512, L = 17, 10k samples at truncation 0.7, 4 blocks,
/// 10 epochs of batch 5 at lr 1e-3, dopri5 at 1e-5 with 10 probes.
struct RunConfig {
  // [world]
  std::uint64_t world_seed = 0;
  std::size_t latent_dim = 512;
  std::size_t attr_dim = 17;

  // [data]
  std::string data_path = "dataset.cfds";
  std::size_t data_size = 10000;
  std::uint64_t data_seed = 1;
  double truncation = 0.7;

  // [train]
  std::size_t epochs = 10;
  std::size_t batch_size = 5;
  double lr = 1e-3;
  std::size_t blocks = 4;
  std::uint64_t train_seed = 2;
  std::size_t threads = 0;
  std::size_t max_iterations = 0;
  bool tanh_on_last = true;
  bool recalibrate = true;  // batch-averaged norm statistics after training
  std::vector<std::string> channels;  // empty = every world channel

  // [solver]
  SolverConfig solver;

  // [edit]
  std::string edit_table;  // empty = built-in table
  std::size_t sites = 18;

  // [eval]
  std::uint64_t eval_seed = 3;
  std::size_t eval_starts = 20;
  std::size_t diffvec_starts = 50;
  std::size_t path_samples = 20;
  double eval_shift = 1.0;
  double identity_quantile = 0.95;
  std::optional<double> identity_threshold;
  std::string identity_edit = "yaw";
  std::string diffvec_edit = "yaw";
  std::string leakage_edit = "yaw";

  // [output]
  std::string output_dir = ".";
  std::string checkpoint = "model.ckpt";
  std::string report = "report.txt";
  std::string report_json = "report.json";
  std::string samples = "samples.txt";
  std::string edited = "edited.txt";

  /// Canonical text: every key in a fixed order, doubles round-trippable.
  std::string to_text() const;
};

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
/// Unknown sections or keys, duplicates and malformed values are ConfigErrors
/// naming the line.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// Environment variable that overrides [output] dir.
inline constexpr const char* kOutputDirEnv = "CONDFLOW_OUTPUT_DIR";

/// Relative paths resolve against $CONDFLOW_OUTPUT_DIR, else [output] dir.
std::filesystem::path resolve_output(const RunConfig& cfg, const std::string& path);

}  // namespace condflow::cli
