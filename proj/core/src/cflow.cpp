// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/cflow.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "condflow/errors.hpp"
#include "condflow/parallel.hpp"

namespace condflow {

FlowOutput forward_map(const FlowModel& model, std::span<const double> z,
                       std::span<const double> attrs, const SolverConfig& cfg,
                       RngStream probes) {
  if (z.size() != model.latent_dim) throw ShapeError("forward_map: latent length mismatch");
  const Vector scaled = model.scaler.apply(attrs);
  const NormOutput pre = moving_norm_inverse(z, model.pre_norm);
  const LogdetSolution ode =
      integrate_with_logdet(model, pre.y, scaled, 0.0, model.end_time(), cfg, probes);
  NormOutput post = moving_norm_inverse(ode.z, model.post_norm);
  FlowOutput out;
  out.value = std::move(post.y);
  out.dlogp = -pre.logdet + ode.dlogp - post.logdet;
  out.stats = ode.stats;
  return out;
}

FlowOutput reverse_map(const FlowModel& model, std::span<const double> w,
                       std::span<const double> attrs, const SolverConfig& cfg,
                       RngStream probes) {
  if (w.size() != model.latent_dim) throw ShapeError("reverse_map: latent length mismatch");
  const Vector scaled = model.scaler.apply(attrs);
  const NormOutput post = moving_norm_forward(w, model.post_norm);
  const LogdetSolution ode =
      integrate_with_logdet(model, post.y, scaled, model.end_time(), 0.0, cfg, probes);
  NormOutput pre = moving_norm_forward(ode.z, model.pre_norm);
  FlowOutput out;
  out.value = std::move(pre.y);
  out.dlogp = -post.logdet + ode.dlogp - pre.logdet;
  out.stats = ode.stats;
  return out;
}

double standard_normal_logpdf(std::span<const double> z) {
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  return -0.5 * (static_cast<double>(z.size()) * log_two_pi + dot(z, z));
}

double log_likelihood(const FlowModel& model, std::span<const double> w,
                      std::span<const double> attrs, const SolverConfig& cfg,
                      RngStream probes) {
  const FlowOutput rev = reverse_map(model, w, attrs, cfg, probes);
  return standard_normal_logpdf(rev.value) - rev.dlogp;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  solver.validate();
}

void fit_attribute_scaler(FlowModel& model, std::span<const TrainingTriple> data) {
  const std::size_t L = model.attr_dim;
  AttributeScaler s = AttributeScaler::identity(L);
  if (data.empty()) {
    model.scaler = s;
    return;
  }
  const double n = static_cast<double>(data.size());
  for (std::size_t k = 0; k < L; ++k) {
    double mean = 0.0;
    for (const auto& t : data) mean += t.a[k];
    mean /= n;
    double var = 0.0;
    for (const auto& t : data) var += (t.a[k] - mean) * (t.a[k] - mean);
    var /= n;
    s.mean[k] = mean;
    s.scale[k] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  model.scaler = s;
}

namespace {

void check_triples(const FlowModel& model, std::span<const TrainingTriple> data) {
  for (const auto& t : data) {
    if (t.w.size() != model.latent_dim || t.a.size() != model.attr_dim) {
      throw ShapeError("training triple dims (" + std::to_string(t.w.size()) + ", " +
                       std::to_string(t.a.size()) + ") do not match model (" +
                       std::to_string(model.latent_dim) + ", " +
                       std::to_string(model.attr_dim) + ")");
    }
  }
}

}  // namespace

BatchLoss batch_nll_gradient(FlowModel& model, std::span<const TrainingTriple> batch,
                             const SolverConfig& cfg, const ProbeSet& probes, bool training,
                             std::size_t threads) {
  check_triples(model, batch);
  const std::size_t n = batch.size();
  const std::size_t d = model.latent_dim;
  const double T = model.end_time();
  const ParamLayout layout = param_layout(model);

  std::vector<Vector> ws(n);
  for (std::size_t i = 0; i < n; ++i) ws[i] = batch[i].w;
  std::vector<NormOutput> post = moving_norm_forward_batch(ws, model.post_norm, training);

  std::vector<Vector> scaled(n);
  for (std::size_t i = 0; i < n; ++i) scaled[i] = model.scaler.apply(batch[i].a);

  std::vector<LogdetSolution> ode(n);
  parallel_for(n, threads, [&](std::size_t i) {
    ode[i] = integrate_with_logdet(model, post[i].y, scaled[i], T, 0.0, cfg, probes);
  });

  std::vector<Vector> z0(n);
  for (std::size_t i = 0; i < n; ++i) z0[i] = ode[i].z;
  std::vector<NormOutput> pre = moving_norm_forward_batch(z0, model.pre_norm, training);

  BatchLoss out;
  out.grad.assign(layout.total, 0.0);
  std::vector<double> losses(n);
  std::vector<AdjointResult> adj(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& y2 = pre[i].y;
    losses[i] = -(standard_normal_logpdf(y2) + pre[i].logdet - ode[i].dlogp + post[i].logdet);
    Vector g_z0(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double s2 = std::exp(model.pre_norm.log_scale[j]) /
                        std::sqrt(model.pre_norm.running_var[j] + model.pre_norm.eps);
      g_z0[j] = y2[j] * s2;
    }
    adj[i] = adjoint_backward(model, scaled[i], T, 0.0, ode[i].z, g_z0, 1.0, cfg, probes);
  });

  // Fixed-order reduction.
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i] * inv_n;
    const auto& a = adj[i];
    for (std::size_t j = 0; j < layout.blocks_total; ++j) out.grad[j] += a.grad_theta[j] * inv_n;
    const auto& y2 = pre[i].y;
    for (std::size_t j = 0; j < d; ++j) {
      out.grad[layout.pre_norm + j] += (y2[j] * (y2[j] - model.pre_norm.shift[j]) - 1.0) * inv_n;
      out.grad[layout.pre_norm + d + j] += y2[j] * inv_n;
    }
    const auto& y1 = post[i].y;
    for (std::size_t j = 0; j < d; ++j) {
      const double g_y1 = a.grad_z_start[j];
      out.grad[layout.post_norm + j] += (g_y1 * (y1[j] - model.post_norm.shift[j]) - 1.0) * inv_n;
      out.grad[layout.post_norm + d + j] += g_y1 * inv_n;
    }
    out.grad[layout.end_time] += a.grad_t0 * sigmoid(model.end_time_param) * inv_n;
  }
  return out;
}

double mean_nll(const FlowModel& model, std::span<const TrainingTriple> data,
                const SolverConfig& cfg, std::uint64_t seed, std::size_t threads) {
  check_triples(model, data);
  if (data.empty()) return 0.0;
  std::vector<double> nll(data.size());
  const RngStream base(seed);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    nll[i] = -log_likelihood(model, data[i].w, data[i].a, cfg, base.child(i));
  });
  double total = 0.0;
  for (double x : nll) total += x;
  return total / static_cast<double>(data.size());
}

TrainResult train(FlowModel& model, std::span<const TrainingTriple> data,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  check_triples(model, data);
  model.validate();

  RngStream stream(cfg.seed);
  AdamState adam = AdamState::fresh(model.param_count(), cfg.lr);
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[stream.next_below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_iterations != 0 && result.iterations >= cfg.max_iterations) break;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<TrainingTriple> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);

      const FlowModel last_good = model;
      const ProbeSet probes = make_probes(cfg.solver, model.latent_dim, stream);
      BatchLoss bl;
      try {
        bl = batch_nll_gradient(model, batch, cfg.solver, probes, true, cfg.threads);
      } catch (const NumericError& e) {
        model = last_good;
        throw NumericError("train: aborted at epoch " + std::to_string(epoch + 1) +
                           ", iteration " + std::to_string(result.iterations + 1) + ": " +
                           e.what());
      }
      if (!std::isfinite(bl.loss) || !all_finite(bl.grad)) {
        model = last_good;
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           ", iteration " + std::to_string(result.iterations + 1));
      }
      Vector theta = model.parameters();
      adam_step(theta, bl.grad, adam);
      model.set_parameters(theta);
      epoch_loss += bl.loss;
      ++epoch_batches;
      ++result.iterations;
    }
    if (epoch_batches == 0) break;
    const double mean = epoch_loss / static_cast<double>(epoch_batches);
    result.loss_curve.push_back(mean);
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, mean);
  }
  return result;
}

namespace {

// Average of per-batch mean and (biased) variance, batches in data order.
void set_batch_averaged_stats(MovingNormParams& p, std::span<const Vector> xs,
                              std::size_t batch_size) {
  const std::size_t d = p.dim();
  const std::size_t full = xs.size() / batch_size;
  const std::size_t batches = full == 0 ? 1 : full;
  const std::size_t size = full == 0 ? xs.size() : batch_size;
  Vector mean_acc(d, 0.0), var_acc(d, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto batch = xs.subspan(b * size, size);
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (const auto& x : batch) m += x[j];
      m /= static_cast<double>(size);
      double v = 0.0;
      for (const auto& x : batch) v += (x[j] - m) * (x[j] - m);
      mean_acc[j] += m;
      var_acc[j] += v / static_cast<double>(size);
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    p.running_mean[j] = mean_acc[j] / static_cast<double>(batches);
    p.running_var[j] = var_acc[j] / static_cast<double>(batches);
  }
}

}  // namespace

void recalibrate_norms(FlowModel& model, std::span<const TrainingTriple> data,
                       std::size_t batch_size, const SolverConfig& cfg, std::size_t threads) {
  if (data.empty()) throw ConfigError("recalibrate_norms: empty dataset");
  if (batch_size == 0) throw ConfigError("recalibrate_norms: batch size must be positive");
  check_triples(model, data);
  std::vector<Vector> xs(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) xs[i] = data[i].w;
  set_batch_averaged_stats(model.post_norm, xs, batch_size);

  SolverConfig map_cfg = cfg;
  map_cfg.trace_mode = TraceMode::none;
  const double T = model.end_time();
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const NormOutput post = moving_norm_forward(data[i].w, model.post_norm);
    const Vector scaled = model.scaler.apply(data[i].a);
    xs[i] = integrate_with_logdet(model, post.y, scaled, T, 0.0, map_cfg, ProbeSet{}).z;
  });
  set_batch_averaged_stats(model.pre_norm, xs, batch_size);
}

std::vector<Vector> conditional_sample(const FlowModel& model, std::span<const double> attrs,
                                       std::size_t n, RngStream& stream,
                                       std::optional<double> truncation,
                                       const SolverConfig& cfg, std::size_t threads) {
  if (n == 0) throw Error(ErrorKind::empty_request, "conditional_sample: n must be positive");
  if (truncation && !(*truncation > 0.0)) {
    throw ConfigError("conditional_sample: truncation must be positive");
  }
  std::vector<Vector> z(n);
  for (auto& zi : z) {
    zi = sample_gaussian(stream, model.latent_dim);
    if (truncation) {
      for (double& x : zi) x *= *truncation;
    }
  }
  SolverConfig map_cfg = cfg;
  map_cfg.trace_mode = TraceMode::none;
  std::vector<Vector> out(n);
  parallel_for(n, threads, [&](std::size_t i) {
    out[i] = forward_map(model, z[i], attrs, map_cfg).value;
  });
  return out;
}

}  // namespace condflow
