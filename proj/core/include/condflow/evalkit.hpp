// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condflow/dynamics.hpp"
#include "condflow/editpipe.hpp"
#include "condflow/numerics.hpp"
#include "condflow/synthworld.hpp"

namespace condflow {

// ---- attribute plumbing between a model and its world ----------------------

/// World indices the model conditions on (all channels when unset).
std::vector<std::size_t> model_channels(const FlowModel& model, const WorldSpec& world);

/// Position of a world channel inside the model's attribute vector.
std::optional<std::size_t> model_channel_of(const FlowModel& model, const WorldSpec& world,
                                            std::size_t world_channel);

/// World attributes of `code`, restricted to the model's channels.
Vector measure_model_attributes(const FlowModel& model, const WorldSpec& world,
                                std::span<const double> code);

AttributeMeasure world_measure(const FlowModel& model, const WorldSpec& world);

/// World channels an edit name acts on: `light` covers every light_k,
/// the glasses edits act on `eyeglasses`, the rest on the channel of the same
/// name. Empty when the world lacks the channel.
std::vector<std::size_t> edit_channels(const WorldSpec& world, std::string_view edit_name);

/// Request moving every channel of `kind` by shift · scale[channel] from
/// `current` (model space). Logistic channels are clamped into [0.01, 0.99].
EditRequest shifted_edit(const FlowModel& model, const WorldSpec& world, const EditKind& kind,
                         std::span<const double> current, double shift,
                         std::span<const double> world_scale, EditMode mode,
                         PipelineVariant variant);

/// Starting latents drawn from the world mapping.
std::vector<Vector> sample_starts(const WorldSpec& world, std::size_t n, std::uint64_t seed,
                                  double truncation = kDefaultTruncation);

// ---- metrics ----------------------------------------------------------------

struct IdentityScores {
  double cosine = 0.0;
  double euclid = 0.0;
};

IdentityScores identity_scores(std::span<const double> e1, std::span<const double> e2);

/// Linear-interpolated quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

using EditSequence = std::vector<EditRequest>;

/// |A_c(seq_a(w+)) − A_c(seq_b(w+))| for world channel c, both sequences run
/// in accurate mode from the same start with world-measured bookkeeping.
double edit_consistency(const FlowModel& model, const WorldSpec& world, const ExtendedLatent& w_plus,
                        const EditSequence& seq_a, const EditSequence& seq_b,
                        std::size_t world_channel, const EditOptions& opts);

struct DiffVecStats {
  double mean_norm = 0.0;
  double max_pairwise_angle_deg = 0.0;
};

/// Difference vectors w′ − w of one edit over many starts. Zero differences
/// count toward the mean norm but are skipped for angles.
DiffVecStats diffvec_stats(const FlowModel& model, const WorldSpec& world, const EditRequest& edit,
                           std::span<const Vector> starts, const EditOptions& opts);

/// Mean distance between the attribute-interpolated path and the straight
/// segment joining its endpoints, divided by the mean straight step length.
/// A path that never moves scores 0; a closed loop is undefined.
double path_deviation(const FlowModel& model, std::span<const double> z0,
                      std::span<const double> a_from, std::span<const double> a_to,
                      std::size_t samples, const SolverConfig& cfg, std::size_t threads = 0);

/// Mean over starts of the average |Δa_k| / std_k across world channels not
/// named in `world_targets`. Targets are absolute world-channel values and
/// must all be conditioned on by the model.
double leakage(const FlowModel& model, const WorldSpec& world,
               std::span<const ChannelTarget> world_targets, std::span<const Vector> starts,
               std::span<const double> world_std, const EditOptions& opts);

// ---- reports ----------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

class MetricReport {
 public:
  /// NumericError on a non-finite value.
  void set(const std::string& key, double value);
  void note(const std::string& key, const std::string& text);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  double at(const std::string& key) const;
  const std::map<std::string, double>& values() const { return values_; }
  const std::map<std::string, std::string>& notes() const { return notes_; }

  std::string to_text() const;
  std::string to_json() const;

 private:
  std::map<std::string, double> values_;
  std::map<std::string, std::string> notes_;
};

enum class EvalSuite { identity, consistency, diffvec, path, leakage, all };

EvalSuite parse_suite(std::string_view name);
const char* to_string(EvalSuite suite);

struct EvalSettings {
  std::uint64_t seed = 0;
  std::size_t starts = 20;
  std::size_t diffvec_starts = 50;
  std::size_t path_samples = 20;
  double shift = 1.0;  // edit size in units of channel std
  double truncation = kDefaultTruncation;
  std::size_t sites = kDefaultInjectionSites;
  double identity_quantile = 0.95;
  std::optional<double> identity_threshold;
  std::string identity_edit = "yaw";
  std::string diffvec_edit = "yaw";
  std::string leakage_edit = "yaw";
  EditTable table = EditTable::builtin();
  EditOptions edit;
  Vector world_std;  // per world channel; required for leakage and shifts
};

MetricReport run_suite(const FlowModel& model, const WorldSpec& world, EvalSuite suite,
                       const EvalSettings& settings);

}  // namespace condflow
