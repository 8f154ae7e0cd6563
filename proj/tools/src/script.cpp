// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow_cli/script.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "condflow/errors.hpp"

namespace condflow::cli {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void script_error(std::size_t line, const std::string& msg) {
  throw ConfigError("edit script line " + std::to_string(line) + ": " + msg);
}

double parse_number(std::string_view s, std::size_t line) {
  const std::string text(trim(s));
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
    script_error(line, "bad number '" + text + "'");
  }
  return v;
}

ScriptStep parse_statement(std::string_view stmt, std::size_t line) {
  const auto eq = stmt.find('=');
  if (eq == std::string_view::npos) script_error(line, "expected 'name = value [mode]'");
  ScriptStep step;
  step.line = line;
  step.edit = std::string(trim(stmt.substr(0, eq)));
  if (step.edit.empty()) script_error(line, "missing edit name");
  std::string_view rest = trim(stmt.substr(eq + 1));

  const auto space = rest.find_last_of(" \t");
  if (space != std::string_view::npos) {
    const std::string_view last = rest.substr(space + 1);
    if (last == "fast" || last == "accurate") {
      step.mode = last == "fast" ? EditMode::fast : EditMode::accurate;
      rest = trim(rest.substr(0, space));
    } else if (std::isalpha(static_cast<unsigned char>(last.front()))) {
      script_error(line, "unknown mode '" + std::string(last) + "' (expected fast or accurate)");
    }
  }
  if (rest.empty()) script_error(line, "missing value");
  if (rest.substr(0, 4) == "abs:") {
    step.kind = ValueKind::absolute;
    rest = trim(rest.substr(4));
  } else if (rest.front() == '+' || rest.front() == '-') {
    step.kind = ValueKind::delta;
  }
  while (true) {
    const auto comma = rest.find(',');
    step.values.push_back(parse_number(rest.substr(0, comma), line));
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return step;
}

}  // namespace

std::vector<ScriptStep> parse_edit_script(std::string_view text) {
  std::vector<ScriptStep> steps;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    while (true) {
      const auto semi = line.find(';');
      const auto stmt = trim(line.substr(0, semi));
      if (!stmt.empty()) steps.push_back(parse_statement(stmt, line_no));
      if (semi == std::string_view::npos) break;
      line = line.substr(semi + 1);
    }
  }
  return steps;
}

std::vector<ExtendedLatent> read_latents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read latent file " + path.string());
  std::string line;
  std::size_t count = 0, rows = 0, dim = 0;
  bool have_header = false;
  std::vector<double> values;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream ls{std::string(t)};
    if (!have_header) {
      std::string word;
      if (!(ls >> word >> count >> rows >> dim) || word != "latents" || rows == 0 || dim == 0) {
        throw IntegrityError("latent file " + path.string() + ": bad header");
      }
      have_header = true;
      continue;
    }
    std::string tok;
    while (ls >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size() || !std::isfinite(v)) {
        throw IntegrityError("latent file " + path.string() + ": bad number '" + tok + "'");
      }
      values.push_back(v);
    }
  }
  if (!have_header) throw IntegrityError("latent file " + path.string() + ": missing header");
  if (values.size() != count * rows * dim) throw IntegrityError("latent file " + path.string() + ": value count mismatch");
  std::vector<ExtendedLatent> out;
  for (std::size_t i = 0; i < count; ++i) {
    ExtendedLatent e{DenseMatrix(rows, dim)};
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(i * rows * dim), rows * dim, e.rows.data().begin());
    out.push_back(std::move(e));
  }
  return out;
}

std::string format_latents(const std::vector<ExtendedLatent>& latents) {
  const std::size_t rows = latents.empty() ? 1 : latents.front().count();
  const std::size_t dim = latents.empty() ? 1 : latents.front().dim();
  std::string out = "latents " + std::to_string(latents.size()) + " " + std::to_string(rows) + " " +
                    std::to_string(dim) + "\n";
  char buf[40];
  for (const auto& e : latents) {
    if (e.count() != rows || e.dim() != dim) throw ShapeError("format_latents: mixed latent shapes");
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = e.rows.row(r);
      for (std::size_t c = 0; c < dim; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", row[c]);
        out += buf;
        out += c + 1 == dim ? '\n' : ' ';
      }
    }
  }
  return out;
}

}  // namespace condflow::cli
