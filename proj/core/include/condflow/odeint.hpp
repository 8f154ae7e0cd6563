// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>

#include "condflow/dynamics.hpp"
#include "condflow/numerics.hpp"

namespace condflow {

enum class TraceMode {
  hutchinson,
  exact,
  none,  // integrate z only; the log-density accumulator stays 0
};

struct SolverConfig {
  double rtol = 1e-5;
  double atol = 1e-5;
  std::size_t max_steps = 10000;
  std::optional<double> initial_step;
  std::size_t probe_count = 10;
  TraceMode trace_mode = TraceMode::hutchinson;

  void validate() const;
};

struct SolveStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t evaluations = 0;
  double final_step = 0.0;
};

using OdeFunction =
    std::function<void(double t, std::span<const double> y, std::span<double> dydt)>;

struct OdeSolution {
  Vector y;
  SolveStats stats;
};

/// Adaptive Dormand–Prince 5(4) with PI step control. Integrates from t0 to
/// t1 in either direction. A step is accepted when every component satisfies
/// |err_i| <= atol + rtol * max(|y_i|, |y_new_i|).
OdeSolution dopri5_integrate(const OdeFunction& f, std::span<const double> y0, double t0,
                             double t1, const SolverConfig& cfg);

/// Mean over probes of εᵀ J ε, with one vector–Jacobian product per probe.
double hutchinson_trace(
    const std::function<void(std::span<const double> v, std::span<double> out)>& vjp_z,
    std::size_t dim, std::span<const Vector> probes);

/// Probes for one solve under cfg.trace_mode (empty for TraceMode::none).
ProbeSet make_probes(const SolverConfig& cfg, std::size_t dim, RngStream& stream);

struct LogdetSolution {
  Vector z;
  double dlogp = 0.0;  // ∫_{t0}^{t1} −Tr(∂φ/∂z) dt
  SolveStats stats;
};

/// Integrates [φ(z, t ‖ a), −Tr ∂φ/∂z] from t0 to t1. `attrs` are the scaled
/// conditioning values seen by the dynamics.
LogdetSolution integrate_with_logdet(const FlowModel& model, std::span<const double> z_start,
                                     std::span<const double> attrs, double t0, double t1,
                                     const SolverConfig& cfg, const ProbeSet& probes);

LogdetSolution integrate_with_logdet(const FlowModel& model, std::span<const double> z_start,
                                     std::span<const double> attrs, double t0, double t1,
                                     const SolverConfig& cfg, RngStream& stream);

struct AdjointResult {
  Vector grad_z_start;
  Vector grad_theta;  // full parameter length; only block slots are filled
  double grad_t0 = 0.0;
  double grad_t1 = 0.0;
  Vector z_start;  // state reconstructed by the backward solve
  SolveStats stats;
};

/// Adjoint sensitivities of a scalar loss L(z(t1), dlogp) for a forward solve
/// that went t0 → t1 and ended at z_end. Integrates the adjoint system back
/// from t1 to t0 with the same probes as the forward pass.
AdjointResult adjoint_backward(const FlowModel& model, std::span<const double> attrs, double t0,
                               double t1, std::span<const double> z_end,
                               std::span<const double> loss_grad_z_end,
                               double loss_grad_dlogp, const SolverConfig& cfg,
                               const ProbeSet& probes);

}  // namespace condflow
