// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "condflow/errors.hpp"
#include "condflow/parallel.hpp"

namespace condflow {

std::vector<std::size_t> model_channels(const FlowModel& model, const WorldSpec& world) {
  if (!model.channels.empty()) {
    for (std::size_t c : model.channels) {
      if (c >= world.attr_dim) throw ConfigError("model conditions on a channel the world lacks");
    }
    return model.channels;
  }
  if (model.attr_dim != world.attr_dim) {
    throw ConfigError("model attribute width " + std::to_string(model.attr_dim) +
                      " does not match the world's " + std::to_string(world.attr_dim));
  }
  std::vector<std::size_t> all(world.attr_dim);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

std::optional<std::size_t> model_channel_of(const FlowModel& model, const WorldSpec& world,
                                            std::size_t world_channel) {
  const auto ch = model_channels(model, world);
  const auto it = std::find(ch.begin(), ch.end(), world_channel);
  if (it == ch.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ch.begin());
}

Vector measure_model_attributes(const FlowModel& model, const WorldSpec& world,
                                std::span<const double> code) {
  const Vector a = attribute_fn(world, code);
  return select_channels(a, model_channels(model, world));
}

AttributeMeasure world_measure(const FlowModel& model, const WorldSpec& world) {
  return [&model, &world](std::span<const double> code) {
    return measure_model_attributes(model, world, code);
  };
}

std::vector<std::size_t> edit_channels(const WorldSpec& world, std::string_view edit_name) {
  std::vector<std::size_t> out;
  if (edit_name == "light") {
    for (std::size_t k = 0; k < world.channel_names.size(); ++k) {
      if (world.channel_names[k].rfind("light_", 0) == 0) out.push_back(k);
    }
    return out;
  }
  const std::string_view channel =
      (edit_name == "remove_glasses" || edit_name == "add_glasses") ? "eyeglasses" : edit_name;
  if (const auto k = world.channel_index(channel)) out.push_back(*k);
  return out;
}

EditRequest shifted_edit(const FlowModel& model, const WorldSpec& world, const EditKind& kind,
                         std::span<const double> current, double shift,
                         std::span<const double> world_scale, EditMode mode,
                         PipelineVariant variant) {
  if (world_scale.size() != world.attr_dim) throw ShapeError("shifted_edit: scale length mismatch");
  EditRequest req{kind, {}, mode, variant};
  for (std::size_t ch : edit_channels(world, kind.name)) {
    const auto m = model_channel_of(model, world, ch);
    if (!m) continue;
    if (*m >= current.size()) throw ShapeError("shifted_edit: attribute length mismatch");
    double v = current[*m] + shift * world_scale[ch];
    if (world.links[ch] == LinkKind::logistic) v = std::clamp(v, 0.01, 0.99);
    req.targets.push_back({*m, v});
  }
  if (req.targets.empty()) {
    throw ConfigError("edit '" + kind.name + "' has no channel the model conditions on");
  }
  return req;
}

std::vector<Vector> sample_starts(const WorldSpec& world, std::size_t n, std::uint64_t seed,
                                  double truncation) {
  RngStream stream(seed);
  std::vector<Vector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector z = sample_gaussian(stream, world.dim);
    out.push_back(mapping_f(world, z, truncation));
  }
  return out;
}

IdentityScores identity_scores(std::span<const double> e1, std::span<const double> e2) {
  if (e1.size() != e2.size()) throw ShapeError("identity_scores: embedding lengths differ");
  const double n1 = norm2(e1);
  const double n2 = norm2(e2);
  if (n1 == 0.0 || n2 == 0.0) {
    throw UndefinedMetricError("identity_scores: cosine of a zero embedding");
  }
  double dist2 = 0.0;
  for (std::size_t i = 0; i < e1.size(); ++i) dist2 += (e1[i] - e2[i]) * (e1[i] - e2[i]);
  return {std::clamp(dot(e1, e2) / (n1 * n2), -1.0, 1.0), std::sqrt(dist2)};
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw UndefinedMetricError("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

std::optional<double> probed_target(const EditSequence& seq, std::size_t model_channel) {
  for (const auto& req : seq)
    for (const auto& t : req.targets)
      if (t.channel == model_channel) return t.value;
  return std::nullopt;
}

Vector run_sequence(const FlowModel& model, const WorldSpec& world, const ExtendedLatent& w_plus,
                    const EditSequence& seq, const EditOptions& opts) {
  EditSession s{w_plus, opts.measure(readout(w_plus, opts.readout_weights)), std::nullopt};
  for (EditRequest req : seq) {
    req.mode = EditMode::accurate;
    s = apply_edit(model, s, req, opts);
  }
  return attribute_fn(world, readout(s.state, opts.readout_weights));
}

}  // namespace

double edit_consistency(const FlowModel& model, const WorldSpec& world, const ExtendedLatent& w_plus,
                        const EditSequence& seq_a, const EditSequence& seq_b,
                        std::size_t world_channel, const EditOptions& opts) {
  if (seq_a.empty() || seq_b.empty()) throw ConfigError("edit_consistency: empty edit sequence");
  const auto m = model_channel_of(model, world, world_channel);
  if (!m) throw ConfigError("edit_consistency: probed channel is not conditioned on");
  const auto ta = probed_target(seq_a, *m);
  const auto tb = probed_target(seq_b, *m);
  if (!ta || !tb || *ta != *tb) {
    throw ConfigError("edit_consistency: both sequences must set the probed channel to the same value");
  }
  EditOptions o = opts;
  if (!o.measure) o.measure = world_measure(model, world);
  const Vector fa = run_sequence(model, world, w_plus, seq_a, o);
  const Vector fb = run_sequence(model, world, w_plus, seq_b, o);
  return std::abs(fa[world_channel] - fb[world_channel]);
}

DiffVecStats diffvec_stats(const FlowModel& model, const WorldSpec& world, const EditRequest& edit,
                           std::span<const Vector> starts, const EditOptions& opts) {
  if (starts.size() < 2) throw ConfigError("diffvec_stats: need at least two starts");
  std::vector<Vector> diffs(starts.size());
  parallel_for(starts.size(), opts.threads, [&](std::size_t i) {
    const Vector& w = starts[i];
    const Vector a = measure_model_attributes(model, world, w);
    const Vector target = edit_targets(a, edit);
    const Vector edited = cfe(model, jre(model, w, a, opts.solver), target, opts.solver);
    Vector d(w.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = edited[k] - w[k];
    diffs[i] = std::move(d);
  });
  DiffVecStats out;
  std::vector<double> norms(diffs.size());
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    norms[i] = norm2(diffs[i]);
    out.mean_norm += norms[i];
  }
  out.mean_norm /= static_cast<double>(diffs.size());
  double min_cos = 1.0;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (norms[i] == 0.0) continue;
    for (std::size_t j = i + 1; j < diffs.size(); ++j) {
      if (norms[j] == 0.0) continue;
      min_cos = std::min(min_cos, dot(diffs[i], diffs[j]) / (norms[i] * norms[j]));
    }
  }
  out.max_pairwise_angle_deg = std::acos(std::clamp(min_cos, -1.0, 1.0)) * 180.0 / std::numbers::pi;
  return out;
}

double path_deviation(const FlowModel& model, std::span<const double> z0,
                      std::span<const double> a_from, std::span<const double> a_to,
                      std::size_t samples, const SolverConfig& cfg, std::size_t threads) {
  if (samples < 2) throw ConfigError("path_deviation: need at least two samples");
  const auto path = interpolate_attribute(model, z0, a_from, a_to, samples, cfg, threads);
  const Vector& p0 = path.front();
  const Vector& p1 = path.back();
  const std::size_t d = p0.size();
  double chord = 0.0;
  for (std::size_t k = 0; k < d; ++k) chord += (p1[k] - p0[k]) * (p1[k] - p0[k]);
  chord = std::sqrt(chord);
  double total = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double s = static_cast<double>(i) / static_cast<double>(samples - 1);
    double dev = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double lin = (1.0 - s) * p0[k] + s * p1[k];
      dev += (path[i][k] - lin) * (path[i][k] - lin);
    }
    total += std::sqrt(dev);
  }
  if (chord == 0.0) {
    const bool still = std::all_of(path.begin(), path.end(), [&](const Vector& p) { return p == p0; });
    if (still) return 0.0;
    throw UndefinedMetricError("path_deviation: path endpoints coincide");
  }
  const double mean_dev = total / static_cast<double>(samples);
  const double step = chord / static_cast<double>(samples - 1);
  return mean_dev / step;
}

double leakage(const FlowModel& model, const WorldSpec& world,
               std::span<const ChannelTarget> world_targets, std::span<const Vector> starts,
               std::span<const double> world_std, const EditOptions& opts) {
  if (starts.empty()) throw ConfigError("leakage: need at least one start");
  if (world_std.size() != world.attr_dim) throw ShapeError("leakage: std length mismatch");
  std::vector<bool> targeted(world.attr_dim, false);
  EditRequest req;
  for (const auto& t : world_targets) {
    if (t.channel >= world.attr_dim) throw ConfigError("leakage: target channel out of range");
    const auto m = model_channel_of(model, world, t.channel);
    if (!m) {
      throw ConfigError("leakage: model does not condition on '" +
                        world.channel_names[t.channel] + "'");
    }
    targeted[t.channel] = true;
    req.targets.push_back({*m, t.value});
  }
  std::size_t untargeted = 0;
  for (std::size_t k = 0; k < world.attr_dim; ++k) {
    if (targeted[k]) continue;
    if (!(world_std[k] > 0.0)) throw UndefinedMetricError("leakage: zero channel std");
    ++untargeted;
  }
  if (untargeted == 0) throw UndefinedMetricError("leakage: every channel is targeted");

  std::vector<double> per_start(starts.size());
  parallel_for(starts.size(), opts.threads, [&](std::size_t i) {
    const Vector& w = starts[i];
    const Vector before = attribute_fn(world, w);
    const Vector a = select_channels(before, model_channels(model, world));
    const Vector edited = cfe(model, jre(model, w, a, opts.solver), edit_targets(a, req), opts.solver);
    const Vector after = attribute_fn(world, edited);
    double sum = 0.0;
    for (std::size_t k = 0; k < world.attr_dim; ++k) {
      if (!targeted[k]) sum += std::abs(after[k] - before[k]) / world_std[k];
    }
    per_start[i] = sum / static_cast<double>(untargeted);
  });
  double total = 0.0;
  for (double v : per_start) total += v;
  return total / static_cast<double>(starts.size());
}

// ---- reports ----------------------------------------------------------------

void MetricReport::set(const std::string& key, double value) {
  if (!std::isfinite(value)) throw NumericError("metric '" + key + "' is not finite");
  values_[key] = value;
}

void MetricReport::note(const std::string& key, const std::string& text) { notes_[key] = text; }

double MetricReport::at(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("report has no metric '" + key + "'");
  return it->second;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  for (const auto& [k, v] : values_) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << k << '=' << buf << '\n';
  }
  for (const auto& [k, v] : notes_) os << "# " << k << ": " << v << '\n';
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = "condflow.metrics";
  j["version"] = kReportSchemaVersion;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values_) j["metrics"][k] = v;
  j["notes"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : notes_) j["notes"][k] = v;
  return j.dump(2) + "\n";
}

EvalSuite parse_suite(std::string_view name) {
  if (name == "identity") return EvalSuite::identity;
  if (name == "consistency") return EvalSuite::consistency;
  if (name == "diffvec") return EvalSuite::diffvec;
  if (name == "path") return EvalSuite::path;
  if (name == "leakage") return EvalSuite::leakage;
  if (name == "all") return EvalSuite::all;
  throw ConfigError("unknown suite '" + std::string(name) +
                    "' (expected identity, consistency, diffvec, path, leakage or all)");
}

const char* to_string(EvalSuite suite) {
  switch (suite) {
    case EvalSuite::identity: return "identity";
    case EvalSuite::consistency: return "consistency";
    case EvalSuite::diffvec: return "diffvec";
    case EvalSuite::path: return "path";
    case EvalSuite::leakage: return "leakage";
    case EvalSuite::all: return "all";
  }
  return "?";
}

namespace {

struct SuiteContext {
  const FlowModel& model;
  const WorldSpec& world;
  const EvalSettings& settings;
  EditOptions inner;  // single-threaded; parallelism is over starts
  std::size_t threads;
};

Vector mean_of(std::span<const Vector> vs) {
  Vector m(vs.front().size(), 0.0);
  for (const auto& v : vs)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
  for (double& x : m) x /= static_cast<double>(vs.size());
  return m;
}

void run_identity(const SuiteContext& c, MetricReport& r) {
  const auto starts = sample_starts(c.world, c.settings.starts, c.settings.seed, c.settings.truncation);
  const EditKind& kind = c.settings.table.at(c.settings.identity_edit);
  std::vector<IdentityScores> edited(starts.size());
  std::vector<double> null_dist(starts.size());
  parallel_for(starts.size(), c.threads, [&](std::size_t i) {
    const Vector& w = starts[i];
    const Vector a = measure_model_attributes(c.model, c.world, w);
    const Vector z0 = jre(c.model, w, a, c.inner.solver);
    const EditRequest req = shifted_edit(c.model, c.world, kind, a, c.settings.shift,
                                         c.settings.world_std, EditMode::accurate, PipelineVariant::v2);
    const Vector e0 = identity_embed(c.world, w);
    edited[i] = identity_scores(e0, identity_embed(c.world, cfe(c.model, z0, edit_targets(a, req), c.inner.solver)));
    null_dist[i] = identity_scores(e0, identity_embed(c.world, cfe(c.model, z0, a, c.inner.solver))).euclid;
  });
  const double threshold = c.settings.identity_threshold
                               ? *c.settings.identity_threshold
                               : quantile(null_dist, c.settings.identity_quantile);
  double cos = 0.0, euc = 0.0, hits = 0.0, null_mean = 0.0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    cos += edited[i].cosine;
    euc += edited[i].euclid;
    hits += edited[i].euclid <= threshold ? 1.0 : 0.0;
    null_mean += null_dist[i];
  }
  const double n = static_cast<double>(starts.size());
  r.set("identity.cosine", cos / n);
  r.set("identity.euclid", euc / n);
  r.set("identity.accuracy", hits / n);
  r.set("identity.threshold", threshold);
  r.set("identity.null_euclid", null_mean / n);
  r.note("identity.edit", c.settings.identity_edit);
}

struct ConsistencyProbe {
  const char* key;
  std::vector<const char*> seq_a;
  std::vector<const char*> seq_b;
  const char* probed_edit;
};

void run_consistency(const SuiteContext& c, MetricReport& r) {
  const std::vector<ConsistencyProbe> probes = {
      {"pose_ep_pl", {"expression", "yaw"}, {"yaw", "light"}, "yaw"},
      {"light_le_pl", {"light", "expression"}, {"yaw", "light"}, "light"},
      {"facial_hair_fl_pf", {"facial_hair", "light"}, {"yaw", "facial_hair"}, "facial_hair"},
  };
  const auto starts = sample_starts(c.world, c.settings.starts, c.settings.seed, c.settings.truncation);
  std::string skipped;
  for (const auto& probe : probes) {
    bool usable = c.settings.table.contains(probe.probed_edit);
    for (const auto* list : {&probe.seq_a, &probe.seq_b}) {
      for (const char* name : *list) {
        if (!c.settings.table.contains(name)) { usable = false; continue; }
        bool any = false;
        for (std::size_t ch : edit_channels(c.world, name)) any |= model_channel_of(c.model, c.world, ch).has_value();
        usable &= any;
      }
    }
    if (!usable) {
      skipped += skipped.empty() ? probe.key : std::string(",") + probe.key;
      continue;
    }
    const std::size_t probe_channel = edit_channels(c.world, probe.probed_edit).front();
    for (const auto variant : {PipelineVariant::v1, PipelineVariant::v2}) {
      std::vector<double> scores(starts.size());
      parallel_for(starts.size(), c.threads, [&](std::size_t i) {
        const ExtendedLatent w_plus = ExtendedLatent::broadcast(starts[i], c.settings.sites);
        const Vector a = measure_model_attributes(c.model, c.world, starts[i]);
        auto build = [&](const std::vector<const char*>& names) {
          EditSequence seq;
          for (const char* name : names) {
            seq.push_back(shifted_edit(c.model, c.world, c.settings.table.at(name), a, c.settings.shift,
                                       c.settings.world_std, EditMode::accurate, variant));
          }
          return seq;
        };
        scores[i] = edit_consistency(c.model, c.world, w_plus, build(probe.seq_a), build(probe.seq_b),
                                     probe_channel, c.inner);
      });
      double mean = 0.0;
      for (double s : scores) mean += s;
      r.set(std::string("consistency.") + probe.key + (variant == PipelineVariant::v1 ? ".v1" : ".v2"),
            mean / static_cast<double>(scores.size()));
    }
  }
  if (!skipped.empty()) r.note("consistency.skipped", skipped + " (channels absent from world or model)");
}

void run_diffvec(const SuiteContext& c, MetricReport& r) {
  const auto starts =
      sample_starts(c.world, c.settings.diffvec_starts, c.settings.seed, c.settings.truncation);
  std::vector<Vector> attrs;
  for (const auto& w : starts) attrs.push_back(measure_model_attributes(c.model, c.world, w));
  const EditRequest req =
      shifted_edit(c.model, c.world, c.settings.table.at(c.settings.diffvec_edit), mean_of(attrs),
                   c.settings.shift, c.settings.world_std, EditMode::accurate, PipelineVariant::v2);
  EditOptions o = c.inner;
  o.threads = c.threads;
  const DiffVecStats s = diffvec_stats(c.model, c.world, req, starts, o);
  r.set("diffvec.mean_norm", s.mean_norm);
  r.set("diffvec.max_pairwise_angle_deg", s.max_pairwise_angle_deg);
  r.note("diffvec.edit", c.settings.diffvec_edit);
}

void run_path(const SuiteContext& c, MetricReport& r) {
  const auto starts = sample_starts(c.world, c.settings.starts, c.settings.seed, c.settings.truncation);
  const EditKind& kind = c.settings.table.at(c.settings.diffvec_edit);
  std::vector<double> dev(starts.size());
  parallel_for(starts.size(), c.threads, [&](std::size_t i) {
    const Vector a = measure_model_attributes(c.model, c.world, starts[i]);
    const Vector z0 = jre(c.model, starts[i], a, c.inner.solver);
    const EditRequest req = shifted_edit(c.model, c.world, kind, a, c.settings.shift, c.settings.world_std,
                                         EditMode::accurate, PipelineVariant::v2);
    dev[i] = path_deviation(c.model, z0, a, edit_targets(a, req), c.settings.path_samples,
                            c.inner.solver, 1);
  });
  double mean = 0.0;
  for (double d : dev) mean += d;
  r.set("path.deviation_factor", mean / static_cast<double>(dev.size()));
  r.note("path.deviation_factor",
         "mean distance to the straight chord divided by the mean chord step");
}

void run_leakage(const SuiteContext& c, MetricReport& r) {
  const auto starts = sample_starts(c.world, c.settings.starts, c.settings.seed, c.settings.truncation);
  std::vector<Vector> attrs;
  for (const auto& w : starts) attrs.push_back(attribute_fn(c.world, w));
  const Vector mean = mean_of(attrs);
  std::vector<ChannelTarget> targets;
  for (std::size_t ch : edit_channels(c.world, c.settings.leakage_edit)) {
    double v = mean[ch] + c.settings.shift * c.settings.world_std[ch];
    if (c.world.links[ch] == LinkKind::logistic) v = std::clamp(v, 0.01, 0.99);
    targets.push_back({ch, v});
  }
  if (targets.empty()) throw ConfigError("leakage edit '" + c.settings.leakage_edit + "' has no world channel");
  EditOptions o = c.inner;
  o.threads = c.threads;
  r.set("leakage." + c.settings.leakage_edit,
        leakage(c.model, c.world, targets, starts, c.settings.world_std, o));
}

}  // namespace

MetricReport run_suite(const FlowModel& model, const WorldSpec& world, EvalSuite suite,
                       const EvalSettings& settings) {
  if (settings.world_std.size() != world.attr_dim) {
    throw ConfigError("evaluation needs the per-channel std of every world channel");
  }
  if (settings.starts == 0) throw ConfigError("evaluation needs at least one start");
  SuiteContext c{model, world, settings, settings.edit, settings.edit.threads};
  c.inner.threads = 1;
  c.inner.measure = world_measure(model, world);

  MetricReport r;
  r.note("fid", "not computed: requires a pretrained image network");
  r.note("suite", to_string(suite));
  const bool all = suite == EvalSuite::all;
  if (all || suite == EvalSuite::identity) run_identity(c, r);
  if (all || suite == EvalSuite::consistency) run_consistency(c, r);
  if (all || suite == EvalSuite::diffvec) run_diffvec(c, r);
  if (all || suite == EvalSuite::path) run_path(c, r);
  if (all || suite == EvalSuite::leakage) run_leakage(c, r);
  return r;
}

}  // namespace condflow
