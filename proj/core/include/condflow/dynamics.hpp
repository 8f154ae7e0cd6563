// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "condflow/numerics.hpp"

namespace condflow {

/// One gate-bias ("ConcatSquash") layer:
///   out = (W·x + b) ⊙ σ(G·c + g) + H·c
/// where c is the time-augmented condition (t ‖ a).
struct ConcatSquashParams {
  DenseMatrix weight;        // d x d
  Vector bias;               // d
  DenseMatrix gate_weight;   // d x (L+1)
  Vector gate_bias;          // d
  DenseMatrix hyper_weight;  // d x (L+1), no bias term

  static ConcatSquashParams zeros(std::size_t dim, std::size_t cond_dim);
  static std::size_t count(std::size_t dim, std::size_t cond_dim) {
    return dim * dim + dim + 2 * dim * cond_dim + dim;
  }

  std::size_t dim() const { return bias.size(); }
  std::size_t cond_dim() const { return gate_weight.cols(); }
};

Vector concat_squash_forward(std::span<const double> x, std::span<const double> cond,
                             const ConcatSquashParams& p);

/// Invertible elementwise normalization with running statistics.
/// Forward: y = exp(γ) ⊙ (x − mean) / sqrt(var + eps) + β.
struct MovingNormParams {
  Vector log_scale;  // γ, learnable
  Vector shift;      // β, learnable
  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static MovingNormParams identity(std::size_t dim, double eps = 1e-5);
  std::size_t dim() const { return log_scale.size(); }
};

struct NormOutput {
  Vector y;
  double logdet = 0.0;
};

NormOutput moving_norm_forward(std::span<const double> x, const MovingNormParams& p);
NormOutput moving_norm_inverse(std::span<const double> y, const MovingNormParams& p);

/// Folds the batch mean and (biased) variance into the running buffers.
void moving_norm_update(MovingNormParams& p, std::span<const Vector> batch);

/// Batch forward. In training mode the running statistics are updated from
/// the batch first and the updated statistics normalize every member.
std::vector<NormOutput> moving_norm_forward_batch(std::span<const Vector> batch,
                                                  MovingNormParams& p, bool training);

/// Per-channel affine rescaling of raw attributes before conditioning.
struct AttributeScaler {
  Vector mean;
  Vector scale;

  static AttributeScaler identity(std::size_t dim);
  Vector apply(std::span<const double> raw) const;
  Vector unapply(std::span<const double> scaled) const;
};

inline constexpr double kMinEndTime = 0.1;

/// All learnable state of the conditional flow: the stacked dynamics blocks,
/// the two normalization layers around the ODE, and the integration end time
/// T = softplus(end_time_param) + kMinEndTime.
struct FlowModel {
  std::size_t latent_dim = 0;
  std::size_t attr_dim = 0;
  std::vector<ConcatSquashParams> blocks;
  MovingNormParams pre_norm;   // prior side
  MovingNormParams post_norm;  // data side
  double end_time_param = 0.0;
  bool tanh_on_last = true;
  AttributeScaler scaler;
  // Indices of the world attribute channels this model conditions on.
  std::vector<std::size_t> channels;

  /// All dynamics weights zero and exact identity norms (eps = 0), so the
  /// forward and reverse maps are the identity.
  static FlowModel identity(std::size_t latent_dim, std::size_t attr_dim, std::size_t blocks);
  /// Fan-in uniform main and gate weights, zero gate bias and hyper weights,
  /// T = 1.
  static FlowModel initialized(std::size_t latent_dim, std::size_t attr_dim,
                               std::size_t blocks, RngStream& stream);

  std::size_t cond_dim() const { return attr_dim + 1; }
  double end_time() const;
  std::size_t param_count() const;

  /// Flat parameter vector: blocks (W, b, G, g, H each), pre-norm (γ, β),
  /// post-norm (γ, β), end-time parameter.
  Vector parameters() const;
  void set_parameters(std::span<const double> theta);

  void validate() const;
};

std::size_t param_count(std::size_t latent_dim, std::size_t attr_dim, std::size_t blocks);

struct ParamLayout {
  std::size_t block_size = 0;
  std::size_t blocks_total = 0;
  std::size_t pre_norm = 0;   // offset of pre-norm γ, followed by β
  std::size_t post_norm = 0;  // offset of post-norm γ, followed by β
  std::size_t end_time = 0;
  std::size_t total = 0;
};

ParamLayout param_layout(const FlowModel& model);

double softplus(double x);
double sigmoid(double x);

/// Rademacher probes (scale 1/count) or the standard basis (scale 1, which
/// turns the estimator into the exact trace).
struct ProbeSet {
  std::vector<Vector> probes;
  double scale = 1.0;

  static ProbeSet rademacher(RngStream& stream, std::size_t dim, std::size_t count);
  static ProbeSet basis(std::size_t dim);
  bool empty() const { return probes.empty(); }
};

/// Evaluates φ(z, t ‖ a; θ) and its derivatives for one model and one
/// (already scaled) attribute vector. Holds scratch buffers, so one instance
/// per thread.
class DynamicsEvaluator {
 public:
  DynamicsEvaluator(const FlowModel& model, std::span<const double> attrs);

  const FlowModel& model() const { return *model_; }
  std::size_t dim() const { return model_->latent_dim; }

  void eval(std::span<const double> z, double t, std::span<double> out);

  /// out = vᵀ ∂φ/∂z at (z, t).
  void vjp_z(std::span<const double> z, double t, std::span<const double> v,
             std::span<double> out);

  /// φ(z, t) and scale · Σ_p ε_pᵀ (∂φ/∂z) ε_p in one pass (one vjp per probe).
  double eval_with_trace(std::span<const double> z, double t, const ProbeSet& probes,
                         std::span<double> out);

  /// Gradient of S = vᵀφ + trace_weight · scale · Σ_p ε_pᵀ (∂φ/∂z) ε_p with
  /// respect to z (written to grad_z) and the block parameters (accumulated
  /// into grad_theta at the block offsets; may be empty to skip). Also
  /// returns φ in f_out and the trace estimate.
  double augmented_vjp(std::span<const double> z, double t, std::span<const double> v,
                       const ProbeSet& probes, double trace_weight, std::span<double> f_out,
                       std::span<double> grad_z, std::span<double> grad_theta);

 private:
  struct BlockCache {
    Vector x, u, s, o, y;
  };

  void set_time(double t);
  void forward(std::span<const double> z, double t);
  bool act(std::size_t k) const { return model_->tanh_on_last || k + 1 < model_->blocks.size(); }

  const FlowModel* model_;
  Vector cond_;
  std::vector<BlockCache> cache_;
  std::vector<Vector> gate_pre_;  // G·c + g per block, for the current t
  std::vector<Vector> hyper_;     // H·c per block
  double cached_t_;
  bool have_time_ = false;
  Vector scratch_a_, scratch_b_;
};

Vector build_condition(double t, std::span<const double> attrs);

Vector dynamics_eval(std::span<const double> z, std::span<const double> attrs, double t,
                     const FlowModel& model);

struct DynamicsVjp {
  Vector vjp_z;
  Vector vjp_theta;  // full parameter length; norm and end-time slots are zero
};

DynamicsVjp dynamics_vjp(std::span<const double> z, std::span<const double> attrs, double t,
                         const FlowModel& model, std::span<const double> v);

}  // namespace condflow
