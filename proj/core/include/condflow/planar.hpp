// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "condflow/numerics.hpp"

namespace condflow {

/// z' = z + u · tanh(wᵀz + b).
struct PlanarLayer {
  Vector u;
  Vector w;
  double b = 0.0;
};

struct PlanarOutput {
  Vector z;
  double logdet = 0.0;  // Σ log |1 + uᵀ ξ(z)|, ξ(z) = tanh′(wᵀz + b) · w
};

/// Applies the layer chain. Throws Error(singular) when |1 + uᵀξ| < 1e-12.
PlanarOutput planar_forward(std::span<const double> z, std::span<const PlanarLayer> layers);

/// Density model x → (standardize) → planar chain → N(0, I), with the
/// invertibility constraint uᵀw ≥ −1 enforced through the usual û
/// reparameterization of the raw `u`.
class PlanarDensity {
 public:
  PlanarDensity(std::size_t dim, std::size_t layers, RngStream& stream);

  std::size_t dim() const { return mean_.size(); }
  std::size_t param_count() const;

  /// Sets the fixed standardization from the data mean and std.
  void fit_standardizer(std::span<const Vector> data);

  double log_density(std::span<const double> x) const;

  /// Mean negative log-density over `batch` and its gradient w.r.t. params().
  double batch_nll_gradient(std::span<const Vector> batch, Vector& grad) const;

  Vector params() const;
  void set_params(std::span<const double> theta);

  /// Layers with the constrained û substituted for u.
  std::vector<PlanarLayer> effective_layers() const;

 private:
  Vector mean_;
  Vector inv_std_;
  std::vector<PlanarLayer> raw_;
};

struct PlanarTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double lr = 5e-3;
  std::uint64_t seed = 0;
};

/// Minibatch Adam on the exact-logdet negative log-likelihood; returns the
/// per-epoch mean NLL.
std::vector<double> train_planar(PlanarDensity& model, std::span<const Vector> data,
                                 const PlanarTrainConfig& cfg);

}  // namespace condflow
