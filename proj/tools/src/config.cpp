// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow_cli/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "condflow/errors.hpp"

namespace condflow::cli {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::size_t line, std::string_view key, std::string_view value,
                            const char* expected) {
  throw ConfigError("config line " + std::to_string(line) + ": '" + std::string(key) +
                    "' expects " + expected + ", got '" + std::string(value) + "'");
}

std::uint64_t to_u64(std::string_view v, std::size_t line, std::string_view key) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    bad_value(line, key, v, "a non-negative integer");
  }
  return out;
}

double to_f64(std::string_view v, std::size_t line, std::string_view key) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out)) {
    bad_value(line, key, v, "a finite number");
  }
  return out;
}

bool to_bool(std::string_view v, std::size_t line, std::string_view key) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(line, key, v, "true or false");
}

TraceMode to_trace(std::string_view v, std::size_t line, std::string_view key) {
  if (v == "hutchinson") return TraceMode::hutchinson;
  if (v == "exact") return TraceMode::exact;
  if (v == "none") return TraceMode::none;
  bad_value(line, key, v, "hutchinson, exact or none");
}

const char* trace_name(TraceMode m) {
  switch (m) {
    case TraceMode::hutchinson: return "hutchinson";
    case TraceMode::exact: return "exact";
    case TraceMode::none: return "none";
  }
  return "?";
}

std::vector<std::string> to_list(std::string_view v) {
  std::vector<std::string> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    v = v.substr(comma + 1);
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(RunConfig&, std::string_view value, std::size_t line)>;

struct Key {
  const char* section;
  const char* name;
  Setter set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Key size_key(const char* sec, const char* name, T RunConfig::*field) {
  return {sec, name,
          [field, name](RunConfig& c, std::string_view v, std::size_t l) { c.*field = static_cast<T>(to_u64(v, l, name)); },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

Key real_key(const char* sec, const char* name, double RunConfig::*field) {
  return {sec, name, [field, name](RunConfig& c, std::string_view v, std::size_t l) { c.*field = to_f64(v, l, name); },
          [field](const RunConfig& c) { return fmt(c.*field); }};
}

Key string_key(const char* sec, const char* name, std::string RunConfig::*field) {
  return {sec, name, [field](RunConfig& c, std::string_view v, std::size_t) { c.*field = std::string(v); },
          [field](const RunConfig& c) { return c.*field; }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      size_key("world", "seed", &RunConfig::world_seed),
      size_key("world", "latent_dim", &RunConfig::latent_dim),
      size_key("world", "attr_dim", &RunConfig::attr_dim),

      string_key("data", "path", &RunConfig::data_path),
      size_key("data", "size", &RunConfig::data_size),
      size_key("data", "seed", &RunConfig::data_seed),
      real_key("data", "truncation", &RunConfig::truncation),

      size_key("train", "epochs", &RunConfig::epochs),
      size_key("train", "batch_size", &RunConfig::batch_size),
      real_key("train", "lr", &RunConfig::lr),
      size_key("train", "blocks", &RunConfig::blocks),
      size_key("train", "seed", &RunConfig::train_seed),
      size_key("train", "threads", &RunConfig::threads),
      size_key("train", "max_iterations", &RunConfig::max_iterations),
      {"train", "tanh_on_last",
       [](RunConfig& c, std::string_view v, std::size_t l) { c.tanh_on_last = to_bool(v, l, "tanh_on_last"); },
       [](const RunConfig& c) { return std::string(c.tanh_on_last ? "true" : "false"); }},
      {"train", "recalibrate",
       [](RunConfig& c, std::string_view v, std::size_t l) { c.recalibrate = to_bool(v, l, "recalibrate"); },
       [](const RunConfig& c) { return std::string(c.recalibrate ? "true" : "false"); }},
      {"train", "channels", [](RunConfig& c, std::string_view v, std::size_t) { c.channels = to_list(v); },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.channels.size(); ++i) s += (i ? "," : "") + c.channels[i];
         return s;
       }},

      {"solver", "rtol", [](RunConfig& c, std::string_view v, std::size_t l) { c.solver.rtol = to_f64(v, l, "rtol"); },
       [](const RunConfig& c) { return fmt(c.solver.rtol); }},
      {"solver", "atol", [](RunConfig& c, std::string_view v, std::size_t l) { c.solver.atol = to_f64(v, l, "atol"); },
       [](const RunConfig& c) { return fmt(c.solver.atol); }},
      {"solver", "max_steps",
       [](RunConfig& c, std::string_view v, std::size_t l) { c.solver.max_steps = to_u64(v, l, "max_steps"); },
       [](const RunConfig& c) { return std::to_string(c.solver.max_steps); }},
      {"solver", "probes",
       [](RunConfig& c, std::string_view v, std::size_t l) { c.solver.probe_count = to_u64(v, l, "probes"); },
       [](const RunConfig& c) { return std::to_string(c.solver.probe_count); }},
      {"solver", "trace", [](RunConfig& c, std::string_view v, std::size_t l) { c.solver.trace_mode = to_trace(v, l, "trace"); },
       [](const RunConfig& c) { return std::string(trace_name(c.solver.trace_mode)); }},

      string_key("edit", "table", &RunConfig::edit_table),
      size_key("edit", "sites", &RunConfig::sites),

      size_key("eval", "seed", &RunConfig::eval_seed),
      size_key("eval", "starts", &RunConfig::eval_starts),
      size_key("eval", "diffvec_starts", &RunConfig::diffvec_starts),
      size_key("eval", "path_samples", &RunConfig::path_samples),
      real_key("eval", "shift", &RunConfig::eval_shift),
      real_key("eval", "identity_quantile", &RunConfig::identity_quantile),
      {"eval", "identity_threshold",
       [](RunConfig& c, std::string_view v, std::size_t l) {
         if (v == "auto") {
           c.identity_threshold.reset();
         } else {
           c.identity_threshold = to_f64(v, l, "identity_threshold");
         }
       },
       [](const RunConfig& c) { return c.identity_threshold ? fmt(*c.identity_threshold) : std::string("auto"); }},
      string_key("eval", "identity_edit", &RunConfig::identity_edit),
      string_key("eval", "diffvec_edit", &RunConfig::diffvec_edit),
      string_key("eval", "leakage_edit", &RunConfig::leakage_edit),

      string_key("output", "dir", &RunConfig::output_dir),
      string_key("output", "checkpoint", &RunConfig::checkpoint),
      string_key("output", "report", &RunConfig::report),
      string_key("output", "report_json", &RunConfig::report_json),
      string_key("output", "samples", &RunConfig::samples),
      string_key("output", "edited", &RunConfig::edited),
  };
  return table;
}

}  // namespace

std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    if (section != k.section) {
      if (!section.empty()) os << '\n';
      section = k.section;
      os << '[' << section << "]\n";
    }
    os << k.name << " = " << k.get(*this) << '\n';
  }
  return os.str();
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      const bool known = std::any_of(keys().begin(), keys().end(), [&](const Key& k) { return section == k.section; });
      if (!known) throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
    const std::string name(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = std::find_if(keys().begin(), keys().end(),
                                 [&](const Key& k) { return section == k.section && name == k.name; });
    if (it == keys().end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + name + "' in [" + section + "]");
    }
    if (!seen.insert(section + "." + name).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + name + "'");
    }
    it->set(cfg, value, line_no);
  }
  cfg.solver.validate();
  if (cfg.batch_size == 0) throw ConfigError("config: train.batch_size must be positive");
  if (!(cfg.lr > 0)) throw ConfigError("config: train.lr must be positive");
  if (cfg.blocks == 0) throw ConfigError("config: train.blocks must be positive");
  if (!(cfg.truncation > 0 && cfg.truncation <= 1)) throw ConfigError("config: data.truncation must lie in (0, 1]");
  if (cfg.sites == 0) throw ConfigError("config: edit.sites must be positive");
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::filesystem::path resolve_output(const RunConfig& cfg, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return p;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') {
    return std::filesystem::path(env) / p;
  }
  return std::filesystem::path(cfg.output_dir) / p;
}

}  // namespace condflow::cli
