// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "condflow/dynamics.hpp"
#include "condflow/numerics.hpp"
#include "condflow/odeint.hpp"

namespace condflow {

// Seed of the probe stream used when an inference call is not given one.
inline constexpr std::uint64_t kDefaultProbeSeed = 0x70726F6265ULL;

struct FlowOutput {
  Vector value;
  double dlogp = 0.0;  // log p(output) − log p(input) under the map
  SolveStats stats;
};

/// Generative direction z → w: pre-norm inverse, ODE from 0 to T, post-norm
/// inverse. `attrs` are raw attributes; the model's scaler is applied here.
FlowOutput forward_map(const FlowModel& model, std::span<const double> z,
                       std::span<const double> attrs, const SolverConfig& cfg,
                       RngStream probes = RngStream(kDefaultProbeSeed));

/// Density direction w → z, the exact inverse of forward_map up to solver
/// tolerance.
FlowOutput reverse_map(const FlowModel& model, std::span<const double> w,
                       std::span<const double> attrs, const SolverConfig& cfg,
                       RngStream probes = RngStream(kDefaultProbeSeed));

double standard_normal_logpdf(std::span<const double> z);

/// log p(w | a) = log N(z0; 0, I) − Δlogp with (z0, Δlogp) from reverse_map.
double log_likelihood(const FlowModel& model, std::span<const double> w,
                      std::span<const double> attrs, const SolverConfig& cfg,
                      RngStream probes = RngStream(kDefaultProbeSeed));

struct TrainingTriple {
  Vector w;
  Vector a;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 5;
  double lr = 1e-3;
  SolverConfig solver;
  std::uint64_t seed = 0;
  std::size_t threads = 0;         // 0 = hardware concurrency
  std::size_t max_iterations = 0;  // 0 = no cap
  std::function<void(std::size_t epoch, double mean_nll)> on_epoch;

  void validate() const;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean NLL per epoch
  std::size_t iterations = 0;
};

/// Fits the per-channel mean/std scaler on the training attributes.
void fit_attribute_scaler(FlowModel& model, std::span<const TrainingTriple> data);

struct BatchLoss {
  double loss = 0.0;  // mean negative log-likelihood over the batch
  Vector grad;        // gradient of `loss` w.r.t. FlowModel::parameters()
};

/// Mean NLL and its adjoint gradient for one batch. With `training` the
/// moving-norm buffers are updated from the batch first (running statistics
/// are treated as constants by the gradient).
BatchLoss batch_nll_gradient(FlowModel& model, std::span<const TrainingTriple> batch,
                             const SolverConfig& cfg, const ProbeSet& probes, bool training,
                             std::size_t threads = 1);

/// Mean NLL without gradients (probes drawn per sample from `seed`).
double mean_nll(const FlowModel& model, std::span<const TrainingTriple> data,
                const SolverConfig& cfg, std::uint64_t seed, std::size_t threads = 0);

/// Minibatch Adam on the mean NLL. Aborts with NumericError on a non-finite
/// loss or gradient, leaving `model` at the last good parameters.
TrainResult train(FlowModel& model, std::span<const TrainingTriple> data,
                  const TrainConfig& cfg);

/// Replaces the moving-norm running statistics by their average over the
/// training data split into consecutive batches of `batch_size` (the value a
/// noise-free moving average would settle on). The post-norm sees the data;
/// the pre-norm sees the reverse-integrated codes under the new post-norm.
void recalibrate_norms(FlowModel& model, std::span<const TrainingTriple> data,
                       std::size_t batch_size, const SolverConfig& cfg,
                       std::size_t threads = 0);

/// z ~ N(0, I), optionally scaled by `truncation`, mapped through forward_map
/// under fixed attributes.
std::vector<Vector> conditional_sample(const FlowModel& model, std::span<const double> attrs,
                                       std::size_t n, RngStream& stream,
                                       std::optional<double> truncation,
                                       const SolverConfig& cfg, std::size_t threads = 0);

}  // namespace condflow
