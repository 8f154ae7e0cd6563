// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "condflow/errors.hpp"
#include "condflow_cli/config.hpp"

namespace condflow::cli {

struct GenDataArgs {
  std::optional<std::string> out;
  std::optional<std::size_t> n;
};

struct TrainArgs {
  std::optional<std::string> data;
  std::optional<std::string> out;
  std::optional<std::size_t> blocks;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> max_iterations;
  bool init_only = false;
};

struct SampleArgs {
  std::string checkpoint;
  std::vector<std::string> sets;  // "name=value"
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::optional<double> truncation;
  std::optional<std::string> out;
};

struct EditArgs {
  std::string checkpoint;
  std::string input;
  std::string script;
  std::string variant = "v2";
  std::optional<std::string> table;
  std::optional<std::string> out;
  std::optional<std::string> log;
};

struct EvalArgs {
  std::string checkpoint;
  std::string suite = "all";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> json;
};

void cmd_gen_data(const RunConfig& cfg, const GenDataArgs& args, std::ostream& out);
void cmd_train(RunConfig cfg, const TrainArgs& args, std::ostream& out);
void cmd_sample(const RunConfig& cfg, const SampleArgs& args, std::ostream& out);
void cmd_edit(const RunConfig& cfg, const EditArgs& args, std::ostream& out);
void cmd_eval(const RunConfig& cfg, const EvalArgs& args, std::ostream& out);
void cmd_inspect(const std::string& checkpoint, std::ostream& out);

/// 1 for usage/config-type errors, 2 for numeric and integrity errors.
int exit_code_for(ErrorKind kind);

/// Parses the command line and runs one command; returns the exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace condflow::cli
