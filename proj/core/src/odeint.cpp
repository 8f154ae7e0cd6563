// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/odeint.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "condflow/errors.hpp"

namespace condflow {

void SolverConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver tolerances must be positive");
  if (probe_count == 0) throw ConfigError("solver probe_count must be at least 1");
  if (max_steps == 0) throw ConfigError("solver max_steps must be positive");
}

namespace {

// Dormand–Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0,
                 b5 = -2187.0 / 6784.0, b6 = 11.0 / 84.0;
// b - b* (difference between the 5th- and embedded 4th-order weights).
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 10.0;
constexpr double kBeta = 0.04;
constexpr double kAlpha = 0.2 - 0.75 * kBeta;

struct Counted {
  const OdeFunction& f;
  SolveStats& stats;
  void operator()(double t, std::span<const double> y, std::span<double> out) const {
    f(t, y, out);
    ++stats.evaluations;
    if (!all_finite(out)) {
      throw NumericError("ode: dynamics returned a non-finite value at t=" + std::to_string(t));
    }
  }
};

double rms_scaled(std::span<const double> v, std::span<const double> y, const SolverConfig& cfg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double sc = cfg.atol + cfg.rtol * std::abs(y[i]);
    acc += (v[i] / sc) * (v[i] / sc);
  }
  return std::sqrt(acc / static_cast<double>(std::max<std::size_t>(v.size(), 1)));
}

double initial_step(const Counted& f, double t0, std::span<const double> y0,
                    std::span<const double> f0, double direction, const SolverConfig& cfg) {
  const std::size_t n = y0.size();
  const double d0 = rms_scaled(y0, y0, cfg);
  const double d1 = rms_scaled(f0, y0, cfg);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  Vector y1(n), f1(n);
  for (std::size_t i = 0; i < n; ++i) y1[i] = y0[i] + direction * h0 * f0[i];
  f(t0 + direction * h0, y1, f1);
  Vector diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = f1[i] - f0[i];
  const double d2 = rms_scaled(diff, y0, cfg) / h0;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
  return std::min(100.0 * h0, h1);
}

}  // namespace

OdeSolution dopri5_integrate(const OdeFunction& fn, std::span<const double> y0, double t0,
                             double t1, const SolverConfig& cfg) {
  cfg.validate();
  if (!all_finite(y0)) throw NumericError("dopri5: non-finite initial state");
  OdeSolution sol;
  sol.y.assign(y0.begin(), y0.end());
  if (t0 == t1) return sol;

  const std::size_t n = y0.size();
  const double direction = t1 > t0 ? 1.0 : -1.0;
  const double span_len = std::abs(t1 - t0);
  Counted f{fn, sol.stats};

  Vector k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), ynew(n);
  Vector& y = sol.y;
  double t = t0;
  f(t, y, k1);

  double h = cfg.initial_step ? std::abs(*cfg.initial_step)
                              : initial_step(f, t0, y, k1, direction, cfg);
  h = std::min(h, span_len);
  double err_prev = 1e-4;
  bool last_rejected = false;

  while (direction * (t1 - t) > 0.0) {
    if (sol.stats.accepted + sol.stats.rejected >= cfg.max_steps) {
      throw DivergenceError("dopri5: exceeded max_steps=" + std::to_string(cfg.max_steps) +
                            " at t=" + std::to_string(t));
    }
    const double remaining = std::abs(t1 - t);
    bool final_step = false;
    if (h >= remaining) {
      h = remaining;
      final_step = true;
    }
    const double hs = direction * h;

    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + hs * a21 * k1[i];
    f(t + c2 * hs, ytmp, k2);
    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + hs * (a31 * k1[i] + a32 * k2[i]);
    f(t + c3 * hs, ytmp, k3);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + hs * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    f(t + c4 * hs, ytmp, k4);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + hs * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    f(t + c5 * hs, ytmp, k5);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + hs * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] +
                             a65 * k5[i]);
    const double t_new = final_step ? t1 : t + hs;
    f(t + hs, ytmp, k6);
    for (std::size_t i = 0; i < n; ++i)
      ynew[i] = y[i] + hs * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    f(t_new, ynew, k7);

    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = hs * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] +
                             e7 * k7[i]);
      const double sc = cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      err = std::max(err, std::abs(e) / sc);
    }
    if (!std::isfinite(err)) throw NumericError("dopri5: non-finite error estimate");

    if (err <= 1.0) {
      ++sol.stats.accepted;
      t = t_new;
      y.swap(ynew);
      k1.swap(k7);
      double factor = err == 0.0 ? kMaxFactor
                                 : kSafety * std::pow(err, -kAlpha) * std::pow(err_prev, kBeta);
      factor = std::clamp(factor, kMinFactor, kMaxFactor);
      if (last_rejected) factor = std::min(factor, 1.0);
      err_prev = std::max(err, 1e-4);
      sol.stats.final_step = h;
      h *= factor;
      last_rejected = false;
    } else {
      ++sol.stats.rejected;
      const double factor =
          std::max(kMinFactor, kSafety * std::pow(err, -kAlpha));
      h *= factor;
      last_rejected = true;
    }
    if (h < 1e-14 * std::max(1.0, std::abs(t))) {
      throw DivergenceError("dopri5: step size underflow at t=" + std::to_string(t));
    }
  }
  return sol;
}

double hutchinson_trace(
    const std::function<void(std::span<const double> v, std::span<double> out)>& vjp_z,
    std::size_t dim, std::span<const Vector> probes) {
  if (probes.empty()) return 0.0;
  Vector out(dim);
  double total = 0.0;
  for (const auto& eps : probes) {
    if (eps.size() != dim) throw ShapeError("hutchinson_trace: probe length mismatch");
    vjp_z(eps, out);
    total += dot(out, eps);
  }
  return total / static_cast<double>(probes.size());
}

ProbeSet make_probes(const SolverConfig& cfg, std::size_t dim, RngStream& stream) {
  switch (cfg.trace_mode) {
    case TraceMode::hutchinson: return ProbeSet::rademacher(stream, dim, cfg.probe_count);
    case TraceMode::exact: return ProbeSet::basis(dim);
    case TraceMode::none: return ProbeSet{};
  }
  return ProbeSet{};
}

LogdetSolution integrate_with_logdet(const FlowModel& model, std::span<const double> z_start,
                                     std::span<const double> attrs, double t0, double t1,
                                     const SolverConfig& cfg, const ProbeSet& probes) {
  const std::size_t d = model.latent_dim;
  if (z_start.size() != d) throw ShapeError("integrate_with_logdet: state length mismatch");
  DynamicsEvaluator ev(model, attrs);
  const bool with_trace = cfg.trace_mode != TraceMode::none;
  LogdetSolution out;
  if (!with_trace) {
    auto f = [&](double t, std::span<const double> y, std::span<double> dy) { ev.eval(y, t, dy); };
    auto sol = dopri5_integrate(f, z_start, t0, t1, cfg);
    out.z = std::move(sol.y);
    out.stats = sol.stats;
    return out;
  }
  Vector y0(d + 1, 0.0);
  std::copy(z_start.begin(), z_start.end(), y0.begin());
  auto f = [&](double t, std::span<const double> y, std::span<double> dy) {
    const double tr = ev.eval_with_trace(y.first(d), t, probes, dy.first(d));
    dy[d] = -tr;
  };
  auto sol = dopri5_integrate(f, y0, t0, t1, cfg);
  out.z.assign(sol.y.begin(), sol.y.begin() + static_cast<std::ptrdiff_t>(d));
  out.dlogp = sol.y[d];
  out.stats = sol.stats;
  return out;
}

LogdetSolution integrate_with_logdet(const FlowModel& model, std::span<const double> z_start,
                                     std::span<const double> attrs, double t0, double t1,
                                     const SolverConfig& cfg, RngStream& stream) {
  const ProbeSet probes = make_probes(cfg, model.latent_dim, stream);
  return integrate_with_logdet(model, z_start, attrs, t0, t1, cfg, probes);
}

AdjointResult adjoint_backward(const FlowModel& model, std::span<const double> attrs, double t0,
                               double t1, std::span<const double> z_end,
                               std::span<const double> loss_grad_z_end, double loss_grad_dlogp,
                               const SolverConfig& cfg, const ProbeSet& probes) {
  const std::size_t d = model.latent_dim;
  if (z_end.size() != d || loss_grad_z_end.size() != d) {
    throw ShapeError("adjoint_backward: state or gradient length mismatch");
  }
  const ParamLayout layout = param_layout(model);
  const std::size_t np = layout.blocks_total;
  const bool with_trace = cfg.trace_mode != TraceMode::none && !probes.empty();
  const double trace_weight = with_trace ? -loss_grad_dlogp : 0.0;
  const ProbeSet no_probes;
  const ProbeSet& used = with_trace ? probes : no_probes;

  AdjointResult result;
  result.grad_theta.assign(layout.total, 0.0);

  DynamicsEvaluator ev(model, attrs);
  Vector f_end(d), scratch_grad(d);
  const double trace_end = ev.augmented_vjp(z_end, t1, loss_grad_z_end, used, trace_weight,
                                            f_end, scratch_grad, {});
  result.grad_t1 = dot(loss_grad_z_end, f_end) - loss_grad_dlogp * (with_trace ? trace_end : 0.0);

  // State layout: [z (d), a_z (d), a_theta (np)].
  Vector y0(2 * d + np, 0.0);
  std::copy(z_end.begin(), z_end.end(), y0.begin());
  std::copy(loss_grad_z_end.begin(), loss_grad_z_end.end(), y0.begin() + static_cast<std::ptrdiff_t>(d));

  Vector grad_theta_tmp(layout.total);
  auto f = [&](double t, std::span<const double> y, std::span<double> dy) {
    std::fill(grad_theta_tmp.begin(), grad_theta_tmp.begin() + static_cast<std::ptrdiff_t>(np), 0.0);
    ev.augmented_vjp(y.first(d), t, y.subspan(d, d), used, trace_weight, dy.first(d),
                     dy.subspan(d, d), std::span<double>(grad_theta_tmp).first(layout.total));
    for (std::size_t i = 0; i < d; ++i) dy[d + i] = -dy[d + i];
    for (std::size_t i = 0; i < np; ++i) dy[2 * d + i] = -grad_theta_tmp[i];
  };
  auto sol = dopri5_integrate(f, y0, t1, t0, cfg);
  result.stats = sol.stats;
  result.z_start.assign(sol.y.begin(), sol.y.begin() + static_cast<std::ptrdiff_t>(d));
  result.grad_z_start.assign(sol.y.begin() + static_cast<std::ptrdiff_t>(d),
                             sol.y.begin() + static_cast<std::ptrdiff_t>(2 * d));
  std::copy(sol.y.begin() + static_cast<std::ptrdiff_t>(2 * d), sol.y.end(), result.grad_theta.begin());

  Vector f_start(d);
  const double trace_start = ev.augmented_vjp(result.z_start, t0, result.grad_z_start, used,
                                              trace_weight, f_start, scratch_grad, {});
  result.grad_t0 =
      -(dot(result.grad_z_start, f_start) - loss_grad_dlogp * (with_trace ? trace_start : 0.0));
  return result;
}

}  // namespace condflow
