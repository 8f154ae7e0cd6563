// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "condflow/editpipe.hpp"

namespace condflow::cli {

enum class ValueKind { absolute, delta };

/// One `name = value [mode]` statement of an edit script.
struct ScriptStep {
  std::size_t line = 0;
  std::string edit;
  std::vector<double> values;  // one value, or one per channel of the edit
  ValueKind kind = ValueKind::absolute;
  EditMode mode = EditMode::accurate;
};

/// Statements are separated by newlines or `;`, `#` starts a comment.
/// A value with a leading sign is a delta from the current attribute;
/// `abs:` marks an absolute value (needed for negative targets). Lists are
/// comma-separated. ConfigError names the offending line.
std::vector<ScriptStep> parse_edit_script(std::string_view text);

/// Text latent file: header `latents <count> <rows> <dim>`, then one row of
/// numbers per line. `#` lines are comments.
std::vector<ExtendedLatent> read_latents(const std::filesystem::path& path);
std::string format_latents(const std::vector<ExtendedLatent>& latents);

}  // namespace condflow::cli
