// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/editpipe.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>

#include "condflow/cflow.hpp"
#include "condflow/errors.hpp"
#include "condflow/parallel.hpp"

namespace condflow {

ExtendedLatent ExtendedLatent::broadcast(std::span<const double> w, std::size_t count) {
  if (count == 0) throw ConfigError("ExtendedLatent: need at least one row");
  ExtendedLatent e{DenseMatrix(count, w.size())};
  for (std::size_t r = 0; r < count; ++r) std::copy(w.begin(), w.end(), e.rows.row(r).begin());
  return e;
}

Vector readout(const ExtendedLatent& state, std::span<const double> weights) {
  const std::size_t K = state.count();
  if (!weights.empty() && weights.size() != K) {
    throw ShapeError("readout: expected " + std::to_string(K) + " weights");
  }
  Vector out(state.dim(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < K; ++r) {
    const double wt = weights.empty() ? 1.0 : weights[r];
    total += wt;
    const auto row = state.rows.row(r);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wt * row[i];
  }
  if (total == 0.0) throw ConfigError("readout: weights sum to zero");
  for (double& x : out) x /= total;
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::size_t parse_index(std::string_view s, std::size_t line) {
  s = trim(s);
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("edit table line " + std::to_string(line) + ": bad row index '" +
                      std::string(s) + "'");
  }
  return v;
}

bool valid_name(std::string_view s) {
  if (s.empty() || !(std::islower(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_';
  });
}

}  // namespace

EditTable EditTable::builtin() {
  return parse(
      "light = 7-11\n"
      "expression = 4-5\n"
      "yaw = 0-3\n"
      "pitch = 0-3\n"
      "age = 4-7\n"
      "gender = 0-7\n"
      "remove_glasses = 0-2\n"
      "add_glasses = 0-5\n"
      "baldness = 0-5\n"
      "facial_hair = 5-7, 10\n");
}

EditTable EditTable::parse(std::string_view text) {
  EditTable table;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("edit table line " + std::to_string(line_no) + ": expected 'name = rows'");
    }
    const std::string_view name = trim(line.substr(0, eq));
    if (!valid_name(name)) {
      throw ConfigError("edit table line " + std::to_string(line_no) + ": bad edit name '" +
                        std::string(name) + "'");
    }
    if (table.contains(name)) {
      throw ConfigError("edit table line " + std::to_string(line_no) + ": duplicate edit '" +
                        std::string(name) + "'");
    }
    std::set<std::size_t> rows;
    std::string_view spec = line.substr(eq + 1);
    while (true) {
      const auto comma = spec.find(',');
      const std::string_view item = trim(spec.substr(0, comma));
      if (item.empty()) {
        throw ConfigError("edit table line " + std::to_string(line_no) + ": empty row item");
      }
      if (const auto dash = item.find('-'); dash != std::string_view::npos) {
        const std::size_t lo = parse_index(item.substr(0, dash), line_no);
        const std::size_t hi = parse_index(item.substr(dash + 1), line_no);
        if (hi < lo) {
          throw ConfigError("edit table line " + std::to_string(line_no) + ": descending range");
        }
        for (std::size_t r = lo; r <= hi; ++r) rows.insert(r);
      } else {
        rows.insert(parse_index(item, line_no));
      }
      if (comma == std::string_view::npos) break;
      spec = spec.substr(comma + 1);
    }
    table.kinds_.push_back(EditKind{std::string(name), {rows.begin(), rows.end()}});
  }
  return table;
}

const EditKind& EditTable::at(std::string_view name) const {
  for (const auto& k : kinds_)
    if (k.name == name) return k;
  throw ConfigError("unknown edit '" + std::string(name) + "'");
}

bool EditTable::contains(std::string_view name) const {
  return std::any_of(kinds_.begin(), kinds_.end(), [&](const EditKind& k) { return k.name == name; });
}

std::string EditTable::to_text() const {
  std::ostringstream os;
  for (const auto& k : kinds_) {
    os << k.name << " = ";
    for (std::size_t i = 0; i < k.rows.size(); ++i) os << (i ? "," : "") << k.rows[i];
    os << '\n';
  }
  return os.str();
}

const char* to_string(EditMode mode) { return mode == EditMode::fast ? "fast" : "accurate"; }
const char* to_string(PipelineVariant v) { return v == PipelineVariant::v1 ? "V1" : "V2"; }

namespace {

SolverConfig map_config(const SolverConfig& cfg) {
  SolverConfig c = cfg;
  c.trace_mode = TraceMode::none;
  return c;
}

}  // namespace

Vector jre(const FlowModel& model, std::span<const double> w, std::span<const double> attrs,
           const SolverConfig& cfg) {
  return reverse_map(model, w, attrs, map_config(cfg)).value;
}

Vector cfe(const FlowModel& model, std::span<const double> z0,
           std::span<const double> target_attrs, const SolverConfig& cfg) {
  return forward_map(model, z0, target_attrs, map_config(cfg)).value;
}

ExtendedLatent subset_select(const ExtendedLatent& w_plus, std::span<const double> w_new,
                             const EditKind& kind) {
  if (w_new.size() != w_plus.dim()) throw ShapeError("subset_select: latent length mismatch");
  for (std::size_t r : kind.rows) {
    if (r >= w_plus.count()) {
      throw ConfigError("edit '" + kind.name + "' targets row " + std::to_string(r) +
                        " but the extended latent has " + std::to_string(w_plus.count()) +
                        " rows");
    }
  }
  ExtendedLatent out = w_plus;
  for (std::size_t r : kind.rows) std::copy(w_new.begin(), w_new.end(), out.rows.row(r).begin());
  return out;
}

Vector edit_targets(std::span<const double> current, const EditRequest& req) {
  Vector target(current.begin(), current.end());
  for (const auto& t : req.targets) {
    if (t.channel >= target.size()) {
      throw ConfigError("edit '" + req.kind.name + "' targets attribute channel " +
                        std::to_string(t.channel) + " outside the model's " +
                        std::to_string(target.size()) + " channels");
    }
    target[t.channel] = t.value;
  }
  return target;
}

namespace {

// Identical rows (the common broadcast case) are encoded once.
std::vector<Vector> encode_rows(const FlowModel& model, const ExtendedLatent& state,
                                std::span<const double> attrs, const EditOptions& opts) {
  const std::size_t K = state.count();
  std::vector<std::size_t> source(K);
  std::vector<std::size_t> unique;
  for (std::size_t r = 0; r < K; ++r) {
    source[r] = r;
    const auto row = state.rows.row(r);
    for (std::size_t u : unique) {
      const auto other = state.rows.row(u);
      if (std::equal(row.begin(), row.end(), other.begin())) {
        source[r] = u;
        break;
      }
    }
    if (source[r] == r) unique.push_back(r);
  }
  std::vector<Vector> codes(K);
  parallel_for(unique.size(), opts.threads, [&](std::size_t i) {
    codes[unique[i]] = jre(model, state.rows.row(unique[i]), attrs, opts.solver);
  });
  for (std::size_t r = 0; r < K; ++r)
    if (source[r] != r) codes[r] = codes[source[r]];
  return codes;
}

}  // namespace

EditSession apply_edit(const FlowModel& model, const EditSession& session,
                       const EditRequest& req, const EditOptions& opts) {
  const ExtendedLatent& state = session.state;
  if (state.dim() != model.latent_dim) throw ShapeError("apply_edit: latent length mismatch");
  const Vector target = edit_targets(session.attributes, req);

  std::vector<std::size_t> rows;
  if (req.variant == PipelineVariant::v2) {
    rows = req.kind.rows;
    for (std::size_t r : rows) {
      if (r >= state.count()) {
        throw ConfigError("edit '" + req.kind.name + "' targets row " + std::to_string(r) +
                          " outside [0, " + std::to_string(state.count()) + ")");
      }
    }
  } else {
    for (std::size_t r = 0; r < state.count(); ++r) rows.push_back(r);
  }

  EditSession next;
  next.state = state;
  std::vector<Vector> edited(rows.size());
  if (req.mode == EditMode::fast) {
    std::vector<Vector> codes = session.z0 ? *session.z0 : encode_rows(model, state, session.attributes, opts);
    if (codes.size() != state.count()) throw ShapeError("apply_edit: cached codes do not match the state");
    parallel_for(rows.size(), opts.threads, [&](std::size_t i) {
      edited[i] = cfe(model, codes[rows[i]], target, opts.solver);
    });
    next.z0 = std::move(codes);
  } else {
    parallel_for(rows.size(), opts.threads, [&](std::size_t i) {
      const auto row = state.rows.row(rows[i]);
      edited[i] = cfe(model, jre(model, row, session.attributes, opts.solver), target, opts.solver);
    });
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(edited[i].begin(), edited[i].end(), next.state.rows.row(rows[i]).begin());
  }
  next.attributes =
      opts.measure ? opts.measure(readout(next.state, opts.readout_weights)) : target;
  return next;
}

std::pair<ExtendedLatent, Vector> apply_edit(const FlowModel& model, const ExtendedLatent& state,
                                             std::span<const double> current_attrs,
                                             const EditRequest& req, const EditOptions& opts) {
  EditSession s{state, Vector(current_attrs.begin(), current_attrs.end()), std::nullopt};
  EditSession out = apply_edit(model, s, req, opts);
  return {std::move(out.state), std::move(out.attributes)};
}

std::vector<Vector> interpolate_attribute(const FlowModel& model, std::span<const double> z0,
                                          std::span<const double> a_from,
                                          std::span<const double> a_to, std::size_t steps,
                                          const SolverConfig& cfg, std::size_t threads) {
  if (steps < 2) throw ConfigError("interpolate_attribute: steps must be at least 2");
  if (a_from.size() != a_to.size()) throw ShapeError("interpolate_attribute: attribute lengths differ");
  std::vector<Vector> out(steps);
  parallel_for(steps, threads, [&](std::size_t i) {
    const double s = static_cast<double>(i) / static_cast<double>(steps - 1);
    Vector a(a_from.size());
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = (1.0 - s) * a_from[k] + s * a_to[k];
    out[i] = cfe(model, z0, a, cfg);
  });
  return out;
}

}  // namespace condflow
