// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/dynamics.hpp"

#include <cmath>
#include <string>

#include "condflow/errors.hpp"

namespace condflow {

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

ConcatSquashParams ConcatSquashParams::zeros(std::size_t dim, std::size_t cond_dim) {
  ConcatSquashParams p;
  p.weight = DenseMatrix(dim, dim);
  p.bias.assign(dim, 0.0);
  p.gate_weight = DenseMatrix(dim, cond_dim);
  p.gate_bias.assign(dim, 0.0);
  p.hyper_weight = DenseMatrix(dim, cond_dim);
  return p;
}

Vector concat_squash_forward(std::span<const double> x, std::span<const double> cond,
                             const ConcatSquashParams& p) {
  const std::size_t d = p.dim();
  if (x.size() != d || p.weight.rows() != d || p.weight.cols() != d) {
    throw ShapeError("concat_squash_forward: input length " + std::to_string(x.size()) +
                     " does not match block width " + std::to_string(d));
  }
  if (cond.size() != p.cond_dim() || p.hyper_weight.cols() != cond.size()) {
    throw ShapeError("concat_squash_forward: condition length mismatch");
  }
  Vector main = matvec(p.weight, x);
  Vector gate = matvec(p.gate_weight, cond);
  Vector hyper = matvec(p.hyper_weight, cond);
  Vector out(d);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = (main[i] + p.bias[i]) * sigmoid(gate[i] + p.gate_bias[i]) + hyper[i];
  }
  return out;
}

MovingNormParams MovingNormParams::identity(std::size_t dim, double eps) {
  MovingNormParams p;
  p.log_scale.assign(dim, 0.0);
  p.shift.assign(dim, 0.0);
  p.running_mean.assign(dim, 0.0);
  p.running_var.assign(dim, 1.0);
  p.eps = eps;
  return p;
}

namespace {

void check_norm(std::span<const double> x, const MovingNormParams& p, const char* op) {
  if (x.size() != p.dim() || p.shift.size() != p.dim() || p.running_mean.size() != p.dim() ||
      p.running_var.size() != p.dim()) {
    throw ShapeError(std::string(op) + ": dimension mismatch");
  }
}

}  // namespace

NormOutput moving_norm_forward(std::span<const double> x, const MovingNormParams& p) {
  check_norm(x, p, "moving_norm_forward");
  NormOutput out;
  out.y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double var = p.running_var[i] + p.eps;
    out.y[i] = std::exp(p.log_scale[i]) * (x[i] - p.running_mean[i]) / std::sqrt(var) +
               p.shift[i];
    out.logdet += p.log_scale[i] - 0.5 * std::log(var);
  }
  return out;
}

NormOutput moving_norm_inverse(std::span<const double> y, const MovingNormParams& p) {
  check_norm(y, p, "moving_norm_inverse");
  NormOutput out;
  out.y.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double scale = std::exp(p.log_scale[i]);
    if (scale == 0.0) {
      throw NumericError("moving_norm_inverse: exp(log_scale) underflows at index " +
                         std::to_string(i));
    }
    const double var = p.running_var[i] + p.eps;
    out.y[i] = (y[i] - p.shift[i]) * std::sqrt(var) / scale + p.running_mean[i];
    out.logdet -= p.log_scale[i] - 0.5 * std::log(var);
  }
  return out;
}

void moving_norm_update(MovingNormParams& p, std::span<const Vector> batch) {
  if (batch.empty()) return;
  const std::size_t d = p.dim();
  const double n = static_cast<double>(batch.size());
  for (std::size_t i = 0; i < d; ++i) {
    double mean = 0.0;
    for (const auto& x : batch) mean += x[i];
    mean /= n;
    double var = 0.0;
    for (const auto& x : batch) var += (x[i] - mean) * (x[i] - mean);
    var /= n;
    p.running_mean[i] = (1.0 - p.momentum) * p.running_mean[i] + p.momentum * mean;
    p.running_var[i] = (1.0 - p.momentum) * p.running_var[i] + p.momentum * var;
  }
}

std::vector<NormOutput> moving_norm_forward_batch(std::span<const Vector> batch,
                                                  MovingNormParams& p, bool training) {
  if (training) moving_norm_update(p, batch);
  std::vector<NormOutput> out;
  out.reserve(batch.size());
  for (const auto& x : batch) out.push_back(moving_norm_forward(x, p));
  return out;
}

AttributeScaler AttributeScaler::identity(std::size_t dim) {
  return AttributeScaler{Vector(dim, 0.0), Vector(dim, 1.0)};
}

Vector AttributeScaler::apply(std::span<const double> raw) const {
  if (raw.size() != mean.size()) {
    throw ShapeError("attribute vector has length " + std::to_string(raw.size()) +
                     ", model expects " + std::to_string(mean.size()));
  }
  Vector out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mean[i]) / scale[i];
  return out;
}

Vector AttributeScaler::unapply(std::span<const double> scaled) const {
  Vector out(scaled.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) out[i] = scaled[i] * scale[i] + mean[i];
  return out;
}

std::size_t param_count(std::size_t latent_dim, std::size_t attr_dim, std::size_t blocks) {
  return blocks * ConcatSquashParams::count(latent_dim, attr_dim + 1) + 2 * (2 * latent_dim) + 1;
}

FlowModel FlowModel::identity(std::size_t latent_dim, std::size_t attr_dim, std::size_t blocks) {
  FlowModel m;
  m.latent_dim = latent_dim;
  m.attr_dim = attr_dim;
  for (std::size_t k = 0; k < blocks; ++k) {
    m.blocks.push_back(ConcatSquashParams::zeros(latent_dim, attr_dim + 1));
  }
  m.pre_norm = MovingNormParams::identity(latent_dim, 0.0);
  m.post_norm = MovingNormParams::identity(latent_dim, 0.0);
  m.end_time_param = std::log(std::expm1(1.0 - kMinEndTime));
  m.scaler = AttributeScaler::identity(attr_dim);
  for (std::size_t i = 0; i < attr_dim; ++i) m.channels.push_back(i);
  return m;
}

FlowModel FlowModel::initialized(std::size_t latent_dim, std::size_t attr_dim,
                                 std::size_t blocks, RngStream& stream) {
  FlowModel m = identity(latent_dim, attr_dim, blocks);
  m.pre_norm.eps = 1e-5;
  m.post_norm.eps = 1e-5;
  const double main_bound = 1.0 / std::sqrt(static_cast<double>(latent_dim));
  const double gate_bound = 1.0 / std::sqrt(static_cast<double>(attr_dim + 1));
  auto uniform = [&stream](double bound) { return bound * (2.0 * stream.next_uniform() - 1.0); };
  for (auto& block : m.blocks) {
    for (double& w : block.weight.data()) w = uniform(main_bound);
    for (double& b : block.bias) b = uniform(main_bound);
    for (double& g : block.gate_weight.data()) g = uniform(gate_bound);
  }
  return m;
}

double FlowModel::end_time() const { return softplus(end_time_param) + kMinEndTime; }

std::size_t FlowModel::param_count() const {
  return condflow::param_count(latent_dim, attr_dim, blocks.size());
}

ParamLayout param_layout(const FlowModel& model) {
  ParamLayout l;
  l.block_size = ConcatSquashParams::count(model.latent_dim, model.cond_dim());
  l.blocks_total = l.block_size * model.blocks.size();
  l.pre_norm = l.blocks_total;
  l.post_norm = l.pre_norm + 2 * model.latent_dim;
  l.end_time = l.post_norm + 2 * model.latent_dim;
  l.total = l.end_time + 1;
  return l;
}

namespace {

template <typename Dst, typename Src>
std::size_t copy_into(Dst& dst, std::size_t offset, const Src& src) {
  for (double x : src) dst[offset++] = x;
  return offset;
}

template <typename Dst, typename Src>
std::size_t copy_from(Dst& dst, const Src& src, std::size_t offset) {
  for (double& x : dst) x = src[offset++];
  return offset;
}

}  // namespace

Vector FlowModel::parameters() const {
  Vector theta(param_count());
  std::size_t o = 0;
  for (const auto& b : blocks) {
    o = copy_into(theta, o, b.weight.data());
    o = copy_into(theta, o, b.bias);
    o = copy_into(theta, o, b.gate_weight.data());
    o = copy_into(theta, o, b.gate_bias);
    o = copy_into(theta, o, b.hyper_weight.data());
  }
  o = copy_into(theta, o, pre_norm.log_scale);
  o = copy_into(theta, o, pre_norm.shift);
  o = copy_into(theta, o, post_norm.log_scale);
  o = copy_into(theta, o, post_norm.shift);
  theta[o] = end_time_param;
  return theta;
}

void FlowModel::set_parameters(std::span<const double> theta) {
  if (theta.size() != param_count()) {
    throw ShapeError("set_parameters: expected " + std::to_string(param_count()) +
                     " values, got " + std::to_string(theta.size()));
  }
  std::size_t o = 0;
  for (auto& b : blocks) {
    auto w = b.weight.data();
    o = copy_from(w, theta, o);
    o = copy_from(b.bias, theta, o);
    auto g = b.gate_weight.data();
    o = copy_from(g, theta, o);
    o = copy_from(b.gate_bias, theta, o);
    auto h = b.hyper_weight.data();
    o = copy_from(h, theta, o);
  }
  o = copy_from(pre_norm.log_scale, theta, o);
  o = copy_from(pre_norm.shift, theta, o);
  o = copy_from(post_norm.log_scale, theta, o);
  o = copy_from(post_norm.shift, theta, o);
  end_time_param = theta[o];
}

void FlowModel::validate() const {
  const std::size_t d = latent_dim;
  const std::size_t c = cond_dim();
  for (const auto& b : blocks) {
    if (b.weight.rows() != d || b.weight.cols() != d || b.bias.size() != d ||
        b.gate_weight.rows() != d || b.gate_weight.cols() != c || b.gate_bias.size() != d ||
        b.hyper_weight.rows() != d || b.hyper_weight.cols() != c) {
      throw ShapeError("FlowModel: block shapes inconsistent with latent/attribute dims");
    }
  }
  if (pre_norm.dim() != d || post_norm.dim() != d) {
    throw ShapeError("FlowModel: norm layer width differs from latent dim");
  }
  for (const auto* n : {&pre_norm, &post_norm}) {
    if (n->shift.size() != d || n->running_mean.size() != d || n->running_var.size() != d) {
      throw ShapeError("FlowModel: norm buffers differ from latent dim");
    }
    for (double v : n->running_var) {
      if (!(v > 0.0) && n->eps <= 0.0) throw NumericError("FlowModel: non-positive running variance");
    }
  }
  if (scaler.mean.size() != attr_dim || scaler.scale.size() != attr_dim) {
    throw ShapeError("FlowModel: attribute scaler width differs from attribute dim");
  }
  if (!channels.empty() && channels.size() != attr_dim) {
    throw ShapeError("FlowModel: channel list length differs from attribute dim");
  }
}

ProbeSet ProbeSet::rademacher(RngStream& stream, std::size_t dim, std::size_t count) {
  ProbeSet set;
  set.probes.reserve(count);
  for (std::size_t p = 0; p < count; ++p) set.probes.push_back(sample_rademacher(stream, dim));
  set.scale = 1.0 / static_cast<double>(count);
  return set;
}

ProbeSet ProbeSet::basis(std::size_t dim) {
  ProbeSet set;
  for (std::size_t i = 0; i < dim; ++i) {
    Vector e(dim, 0.0);
    e[i] = 1.0;
    set.probes.push_back(std::move(e));
  }
  set.scale = 1.0;
  return set;
}

Vector build_condition(double t, std::span<const double> attrs) {
  Vector c(attrs.size() + 1);
  c[0] = t;
  for (std::size_t i = 0; i < attrs.size(); ++i) c[i + 1] = attrs[i];
  return c;
}

DynamicsEvaluator::DynamicsEvaluator(const FlowModel& model, std::span<const double> attrs)
    : model_(&model), cond_(build_condition(0.0, attrs)), cached_t_(0.0) {
  if (attrs.size() != model.attr_dim) {
    throw ShapeError("dynamics: attribute vector has length " + std::to_string(attrs.size()) +
                     ", model expects " + std::to_string(model.attr_dim));
  }
  if (!all_finite(attrs)) throw NumericError("dynamics: non-finite attribute value");
  const std::size_t d = model.latent_dim;
  cache_.resize(model.blocks.size());
  for (auto& c : cache_) {
    c.x.resize(d);
    c.u.resize(d);
    c.s.resize(d);
    c.o.resize(d);
    c.y.resize(d);
  }
  gate_pre_.assign(model.blocks.size(), Vector(d));
  hyper_.assign(model.blocks.size(), Vector(d));
  scratch_a_.resize(d);
  scratch_b_.resize(d);
}

void DynamicsEvaluator::set_time(double t) {
  if (have_time_ && t == cached_t_) return;
  cond_[0] = t;
  for (std::size_t k = 0; k < model_->blocks.size(); ++k) {
    const auto& b = model_->blocks[k];
    matvec_into(b.gate_weight, cond_, gate_pre_[k]);
    for (std::size_t i = 0; i < gate_pre_[k].size(); ++i) gate_pre_[k][i] += b.gate_bias[i];
    matvec_into(b.hyper_weight, cond_, hyper_[k]);
    auto& s = cache_[k].s;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(gate_pre_[k][i]);
  }
  cached_t_ = t;
  have_time_ = true;
}

void DynamicsEvaluator::forward(std::span<const double> z, double t) {
  if (z.size() != dim()) {
    throw ShapeError("dynamics: state has length " + std::to_string(z.size()) +
                     ", model expects " + std::to_string(dim()));
  }
  if (!all_finite(z) || !std::isfinite(t)) throw NumericError("dynamics: non-finite input");
  set_time(t);
  const std::size_t d = dim();
  for (std::size_t k = 0; k < model_->blocks.size(); ++k) {
    const auto& b = model_->blocks[k];
    auto& c = cache_[k];
    if (k == 0) {
      std::copy(z.begin(), z.end(), c.x.begin());
    } else {
      c.x = cache_[k - 1].y;
    }
    matvec_into(b.weight, c.x, c.u);
    const bool squash = act(k);
    for (std::size_t i = 0; i < d; ++i) {
      c.u[i] += b.bias[i];
      c.o[i] = c.u[i] * c.s[i] + hyper_[k][i];
      c.y[i] = squash ? std::tanh(c.o[i]) : c.o[i];
    }
  }
}

void DynamicsEvaluator::eval(std::span<const double> z, double t, std::span<double> out) {
  if (model_->blocks.empty()) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  forward(z, t);
  const auto& y = cache_.back().y;
  std::copy(y.begin(), y.end(), out.begin());
}

void DynamicsEvaluator::vjp_z(std::span<const double> z, double t, std::span<const double> v,
                              std::span<double> out) {
  if (model_->blocks.empty()) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  forward(z, t);
  const std::size_t d = dim();
  Vector& ybar = scratch_a_;
  Vector& ubar = scratch_b_;
  std::copy(v.begin(), v.end(), ybar.begin());
  for (std::size_t k = model_->blocks.size(); k-- > 0;) {
    const auto& c = cache_[k];
    const bool squash = act(k);
    for (std::size_t i = 0; i < d; ++i) {
      const double obar = squash ? ybar[i] * (1.0 - c.y[i] * c.y[i]) : ybar[i];
      ubar[i] = obar * c.s[i];
    }
    std::fill(ybar.begin(), ybar.end(), 0.0);
    matvec_transposed_add(model_->blocks[k].weight, ubar, ybar);
  }
  std::copy(ybar.begin(), ybar.end(), out.begin());
}

double DynamicsEvaluator::eval_with_trace(std::span<const double> z, double t,
                                          const ProbeSet& probes, std::span<double> out) {
  if (model_->blocks.empty()) {
    std::fill(out.begin(), out.end(), 0.0);
    return 0.0;
  }
  forward(z, t);
  const auto& y = cache_.back().y;
  std::copy(y.begin(), y.end(), out.begin());
  const std::size_t d = dim();
  Vector& ybar = scratch_a_;
  Vector& ubar = scratch_b_;
  double total = 0.0;
  for (const auto& eps : probes.probes) {
    std::copy(eps.begin(), eps.end(), ybar.begin());
    for (std::size_t k = model_->blocks.size(); k-- > 0;) {
      const auto& c = cache_[k];
      const bool squash = act(k);
      for (std::size_t i = 0; i < d; ++i) {
        const double obar = squash ? ybar[i] * (1.0 - c.y[i] * c.y[i]) : ybar[i];
        ubar[i] = obar * c.s[i];
      }
      std::fill(ybar.begin(), ybar.end(), 0.0);
      matvec_transposed_add(model_->blocks[k].weight, ubar, ybar);
    }
    total += dot(ybar, eps);
  }
  return probes.scale * total;
}

double DynamicsEvaluator::augmented_vjp(std::span<const double> z, double t,
                                        std::span<const double> v, const ProbeSet& probes,
                                        double trace_weight, std::span<double> f_out,
                                        std::span<double> grad_z, std::span<double> grad_theta) {
  const std::size_t nblocks = model_->blocks.size();
  if (nblocks == 0) {
    std::fill(f_out.begin(), f_out.end(), 0.0);
    std::fill(grad_z.begin(), grad_z.end(), 0.0);
    return 0.0;
  }
  forward(z, t);
  const std::size_t d = dim();
  const std::size_t nprobe = probes.probes.size();
  std::copy(cache_.back().y.begin(), cache_.back().y.end(), f_out.begin());

  // Forward tangents ẋ, u̇, ȯ per probe and block.
  struct Tangent {
    std::vector<Vector> x, u, o;
  };
  std::vector<Tangent> tan(nprobe);
  double trace = 0.0;
  for (std::size_t p = 0; p < nprobe; ++p) {
    auto& tp = tan[p];
    tp.x.assign(nblocks, Vector(d));
    tp.u.assign(nblocks, Vector(d));
    tp.o.assign(nblocks, Vector(d));
    Vector xdot(probes.probes[p]);
    for (std::size_t k = 0; k < nblocks; ++k) {
      const auto& c = cache_[k];
      tp.x[k] = xdot;
      matvec_into(model_->blocks[k].weight, xdot, tp.u[k]);
      const bool squash = act(k);
      for (std::size_t i = 0; i < d; ++i) {
        tp.o[k][i] = tp.u[k][i] * c.s[i];
        xdot[i] = squash ? (1.0 - c.y[i] * c.y[i]) * tp.o[k][i] : tp.o[k][i];
      }
    }
    trace += dot(xdot, probes.probes[p]);
  }
  trace *= probes.scale;

  const double lambda = trace_weight * probes.scale;
  const ParamLayout layout = param_layout(*model_);
  const std::size_t c_dim = model_->cond_dim();
  const bool want_theta = !grad_theta.empty();

  Vector ybar(v.begin(), v.end());
  std::vector<Vector> ydot_bar(nprobe);
  for (std::size_t p = 0; p < nprobe; ++p) {
    ydot_bar[p] = probes.probes[p];
    for (double& x : ydot_bar[p]) x *= lambda;
  }
  Vector sbar(d), obar(d), ubar(d), odot_bar(d), udot_bar(d), next(d);

  for (std::size_t k = nblocks; k-- > 0;) {
    const auto& b = model_->blocks[k];
    const auto& c = cache_[k];
    const bool squash = act(k);
    const std::size_t off = k * layout.block_size;
    std::span<double> g_w, g_b, g_gw, g_gb, g_h;
    if (want_theta) {
      g_w = grad_theta.subspan(off, d * d);
      g_b = grad_theta.subspan(off + d * d, d);
      g_gw = grad_theta.subspan(off + d * d + d, d * c_dim);
      g_gb = grad_theta.subspan(off + d * d + d + d * c_dim, d);
      g_h = grad_theta.subspan(off + d * d + 2 * d + d * c_dim, d * c_dim);
    }
    std::fill(sbar.begin(), sbar.end(), 0.0);

    if (lambda != 0.0) {
      for (std::size_t p = 0; p < nprobe; ++p) {
        const auto& tp = tan[p];
        auto& ydb = ydot_bar[p];
        for (std::size_t i = 0; i < d; ++i) {
          const double deriv = squash ? 1.0 - c.y[i] * c.y[i] : 1.0;
          odot_bar[i] = deriv * ydb[i];
          if (squash) ybar[i] += -2.0 * c.y[i] * tp.o[k][i] * ydb[i];
          udot_bar[i] = odot_bar[i] * c.s[i];
          sbar[i] += odot_bar[i] * tp.u[k][i];
        }
        if (want_theta) add_outer(g_w, udot_bar, tp.x[k]);
        std::fill(next.begin(), next.end(), 0.0);
        matvec_transposed_add(b.weight, udot_bar, next);
        ydb.swap(next);
      }
    }

    for (std::size_t i = 0; i < d; ++i) {
      obar[i] = squash ? ybar[i] * (1.0 - c.y[i] * c.y[i]) : ybar[i];
      ubar[i] = obar[i] * c.s[i];
      sbar[i] += obar[i] * c.u[i];
    }
    if (want_theta) {
      add_outer(g_h, obar, cond_);
      Vector gate_bar(d);
      for (std::size_t i = 0; i < d; ++i) gate_bar[i] = sbar[i] * c.s[i] * (1.0 - c.s[i]);
      add_outer(g_gw, gate_bar, cond_);
      for (std::size_t i = 0; i < d; ++i) g_gb[i] += gate_bar[i];
      add_outer(g_w, ubar, c.x);
      for (std::size_t i = 0; i < d; ++i) g_b[i] += ubar[i];
    }
    std::fill(ybar.begin(), ybar.end(), 0.0);
    matvec_transposed_add(b.weight, ubar, ybar);
  }
  std::copy(ybar.begin(), ybar.end(), grad_z.begin());
  return trace;
}

Vector dynamics_eval(std::span<const double> z, std::span<const double> attrs, double t,
                     const FlowModel& model) {
  DynamicsEvaluator ev(model, attrs);
  Vector out(model.latent_dim);
  ev.eval(z, t, out);
  return out;
}

DynamicsVjp dynamics_vjp(std::span<const double> z, std::span<const double> attrs, double t,
                         const FlowModel& model, std::span<const double> v) {
  if (v.size() != model.latent_dim) throw ShapeError("dynamics_vjp: cotangent length mismatch");
  DynamicsEvaluator ev(model, attrs);
  DynamicsVjp out;
  out.vjp_z.assign(model.latent_dim, 0.0);
  out.vjp_theta.assign(model.param_count(), 0.0);
  Vector f(model.latent_dim);
  ev.augmented_vjp(z, t, v, ProbeSet{}, 0.0, f, out.vjp_z, out.vjp_theta);
  return out;
}

}  // namespace condflow
