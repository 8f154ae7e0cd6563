// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "condflow/dynamics.hpp"
#include "condflow/numerics.hpp"
#include "condflow/odeint.hpp"

namespace condflow {

inline constexpr std::size_t kDefaultInjectionSites = 18;

/// K rows of latent codes, one per generator injection site.
struct ExtendedLatent {
  DenseMatrix rows;

  static ExtendedLatent broadcast(std::span<const double> w, std::size_t count);
  std::size_t count() const { return rows.rows(); }
  std::size_t dim() const { return rows.cols(); }

  friend bool operator==(const ExtendedLatent&, const ExtendedLatent&) = default;
};

/// Weighted mean of the rows; empty weights mean a uniform average.
Vector readout(const ExtendedLatent& state, std::span<const double> weights = {});

struct EditKind {
  std::string name;
  std::vector<std::size_t> rows;
};

/// Edit name → injection rows. The built-in table holds the empirically
/// chosen ranges for a K = 18 face generator; other worlds load their own.
class EditTable {
 public:
  static EditTable builtin();

  /// One `name = rows` entry per line, rows as comma-separated indices or
  /// inclusive `a-b` ranges; `#` starts a comment. Errors name the line.
  static EditTable parse(std::string_view text);

  const EditKind& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<EditKind>& kinds() const { return kinds_; }
  std::string to_text() const;

 private:
  std::vector<EditKind> kinds_;
};

enum class EditMode { fast, accurate };
enum class PipelineVariant { v1, v2 };

const char* to_string(EditMode mode);
const char* to_string(PipelineVariant variant);

struct ChannelTarget {
  std::size_t channel;  // index into the model's attribute vector
  double value;         // absolute raw attribute value
};

struct EditRequest {
  EditKind kind;
  std::vector<ChannelTarget> targets;
  EditMode mode = EditMode::accurate;
  PipelineVariant variant = PipelineVariant::v2;
};

/// Maps a readout code to measured model-space attributes.
using AttributeMeasure = std::function<Vector(std::span<const double> code)>;

struct EditOptions {
  SolverConfig solver;     // trace mode is ignored; edits never need log-densities
  Vector readout_weights;  // empty = uniform
  AttributeMeasure measure;  // unset: attributes after an edit are the targets
  std::size_t threads = 0;
};

/// State carried between sequential edits. `z0` holds one prior code per row,
/// encoded at the first fast edit and reused by later fast edits instead of
/// re-projecting the edited rows.
struct EditSession {
  ExtendedLatent state;
  Vector attributes;
  std::optional<std::vector<Vector>> z0;
};

/// Joint reverse encoding: z0 = Ψ(w, a).
Vector jre(const FlowModel& model, std::span<const double> w, std::span<const double> attrs,
           const SolverConfig& cfg);

/// Conditional forward editing: w′ = Φ(z0, a_target).
Vector cfe(const FlowModel& model, std::span<const double> z0,
           std::span<const double> target_attrs, const SolverConfig& cfg);

/// Copy of w_plus with exactly kind.rows replaced by w_new. ConfigError on a
/// row outside [0, K).
ExtendedLatent subset_select(const ExtendedLatent& w_plus, std::span<const double> w_new,
                             const EditKind& kind);

Vector edit_targets(std::span<const double> current, const EditRequest& req);

EditSession apply_edit(const FlowModel& model, const EditSession& session,
                       const EditRequest& req, const EditOptions& opts);

/// Single edit from a bare state; returns (state′, a_new).
std::pair<ExtendedLatent, Vector> apply_edit(const FlowModel& model, const ExtendedLatent& state,
                                             std::span<const double> current_attrs,
                                             const EditRequest& req, const EditOptions& opts);

/// Φ(z0, (1 − s)·a_from + s·a_to) for s = 0, 1/(steps−1), …, 1.
std::vector<Vector> interpolate_attribute(const FlowModel& model, std::span<const double> z0,
                                          std::span<const double> a_from,
                                          std::span<const double> a_to, std::size_t steps,
                                          const SolverConfig& cfg, std::size_t threads = 0);

}  // namespace condflow
