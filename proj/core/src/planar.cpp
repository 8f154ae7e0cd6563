// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/planar.hpp"

#include <cmath>
#include <string>

#include "condflow/cflow.hpp"
#include "condflow/dynamics.hpp"
#include "condflow/errors.hpp"

namespace condflow {

PlanarOutput planar_forward(std::span<const double> z, std::span<const PlanarLayer> layers) {
  PlanarOutput out;
  out.z.assign(z.begin(), z.end());
  for (std::size_t n = 0; n < layers.size(); ++n) {
    const auto& l = layers[n];
    if (l.u.size() != z.size() || l.w.size() != z.size()) {
      throw ShapeError("planar_forward: layer " + std::to_string(n) + " has wrong width");
    }
    const double h = std::tanh(dot(l.w, out.z) + l.b);
    const double hp = 1.0 - h * h;
    const double det = 1.0 + hp * dot(l.u, l.w);
    if (std::abs(det) < 1e-12) {
      throw Error(ErrorKind::singular,
                  "planar_forward: layer " + std::to_string(n) + " is singular at this input");
    }
    out.logdet += std::log(std::abs(det));
    for (std::size_t i = 0; i < out.z.size(); ++i) out.z[i] += l.u[i] * h;
  }
  return out;
}

namespace {

// m(x) = −1 + softplus(x) keeps ûᵀw = m(uᵀw) > −1.
struct Constrained {
  Vector u_hat;
  double alpha = 0.0;  // uᵀw
  double k = 0.0;      // (m(α) − α) / ‖w‖²
  double wsq = 0.0;
};

Constrained constrain(const PlanarLayer& l) {
  Constrained c;
  c.alpha = dot(l.u, l.w);
  c.wsq = std::max(dot(l.w, l.w), 1e-12);
  c.k = (-1.0 + softplus(c.alpha) - c.alpha) / c.wsq;
  c.u_hat = l.u;
  for (std::size_t i = 0; i < l.u.size(); ++i) c.u_hat[i] += c.k * l.w[i];
  return c;
}

}  // namespace

PlanarDensity::PlanarDensity(std::size_t dim, std::size_t layers, RngStream& stream)
    : mean_(dim, 0.0), inv_std_(dim, 1.0) {
  raw_.resize(layers);
  for (auto& l : raw_) {
    l.u = sample_gaussian(stream, dim);
    l.w = sample_gaussian(stream, dim);
    for (double& x : l.u) x *= 0.1;
    for (double& x : l.w) x *= 0.1;
    l.b = 0.0;
  }
}

std::size_t PlanarDensity::param_count() const { return raw_.size() * (2 * dim() + 1); }

void PlanarDensity::fit_standardizer(std::span<const Vector> data) {
  const std::size_t d = dim();
  const double n = static_cast<double>(data.size());
  for (std::size_t i = 0; i < d; ++i) {
    double m = 0.0;
    for (const auto& x : data) m += x[i];
    m /= n;
    double v = 0.0;
    for (const auto& x : data) v += (x[i] - m) * (x[i] - m);
    v /= n;
    mean_[i] = m;
    inv_std_[i] = 1.0 / std::sqrt(std::max(v, 1e-24));
  }
}

std::vector<PlanarLayer> PlanarDensity::effective_layers() const {
  std::vector<PlanarLayer> out;
  out.reserve(raw_.size());
  for (const auto& l : raw_) out.push_back(PlanarLayer{constrain(l).u_hat, l.w, l.b});
  return out;
}

double PlanarDensity::log_density(std::span<const double> x) const {
  Vector s(dim());
  double logdet = 0.0;
  for (std::size_t i = 0; i < dim(); ++i) {
    s[i] = (x[i] - mean_[i]) * inv_std_[i];
    logdet += std::log(inv_std_[i]);
  }
  const auto layers = effective_layers();
  const PlanarOutput out = planar_forward(s, layers);
  return standard_normal_logpdf(out.z) + out.logdet + logdet;
}

double PlanarDensity::batch_nll_gradient(std::span<const Vector> batch, Vector& grad) const {
  const std::size_t d = dim();
  const std::size_t nl = raw_.size();
  grad.assign(param_count(), 0.0);
  std::vector<Constrained> cons;
  cons.reserve(nl);
  for (const auto& l : raw_) cons.push_back(constrain(l));

  double total = 0.0;
  std::vector<Vector> zs(nl + 1, Vector(d));
  Vector h(nl), hp(nl), det(nl);
  Vector gu_hat(d), gw(d);
  for (const auto& x : batch) {
    double logdet = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      zs[0][i] = (x[i] - mean_[i]) * inv_std_[i];
      logdet += std::log(inv_std_[i]);
    }
    for (std::size_t n = 0; n < nl; ++n) {
      const auto& uh = cons[n].u_hat;
      h[n] = std::tanh(dot(raw_[n].w, zs[n]) + raw_[n].b);
      hp[n] = 1.0 - h[n] * h[n];
      det[n] = 1.0 + hp[n] * dot(uh, raw_[n].w);
      logdet += std::log(std::abs(det[n]));
      for (std::size_t i = 0; i < d; ++i) zs[n + 1][i] = zs[n][i] + uh[i] * h[n];
    }
    total += -(standard_normal_logpdf(zs[nl]) + logdet);

    // Reverse pass for NLL = ½‖z_N‖² − Σ log|det_n| + const.
    Vector zbar = zs[nl];
    for (std::size_t n = nl; n-- > 0;) {
      const auto& w = raw_[n].w;
      const auto& uh = cons[n].u_hat;
      const double uw = dot(uh, w);
      // ∂(−log|det|)/∂pre via hp: det = 1 + hp·uw, hp' = −2 h hp.
      const double ddet = -1.0 / det[n];
      const double dpre_det = ddet * uw * (-2.0 * h[n] * hp[n]);
      const double dpre_out = hp[n] * dot(zbar, uh);
      const double dpre = dpre_det + dpre_out;
      for (std::size_t i = 0; i < d; ++i) {
        gu_hat[i] = zbar[i] * h[n] + ddet * hp[n] * w[i];
        gw[i] = dpre * zs[n][i] + ddet * hp[n] * uh[i];
      }
      const double gb = dpre;
      // Through û = u + k w.
      const auto& c = cons[n];
      const double mprime = sigmoid(c.alpha);
      const double wg = dot(w, gu_hat);
      const std::size_t off = n * (2 * d + 1);
      for (std::size_t i = 0; i < d; ++i) {
        const double g_u = gu_hat[i] + (mprime - 1.0) / c.wsq * wg * w[i];
        const double dk_dw = (mprime - 1.0) * raw_[n].u[i] / c.wsq -
                             2.0 * (-1.0 + softplus(c.alpha) - c.alpha) * w[i] / (c.wsq * c.wsq);
        const double g_w = gw[i] + c.k * gu_hat[i] + wg * dk_dw;
        grad[off + i] += g_u;
        grad[off + d + i] += g_w;
      }
      grad[off + 2 * d] += gb;
      // zbar for z_n: identity + u h'(·) wᵀ path + log-det path.
      const double back = dpre;
      for (std::size_t i = 0; i < d; ++i) zbar[i] += back * w[i];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv_n;
  return total * inv_n;
}

Vector PlanarDensity::params() const {
  Vector theta;
  theta.reserve(param_count());
  for (const auto& l : raw_) {
    theta.insert(theta.end(), l.u.begin(), l.u.end());
    theta.insert(theta.end(), l.w.begin(), l.w.end());
    theta.push_back(l.b);
  }
  return theta;
}

void PlanarDensity::set_params(std::span<const double> theta) {
  if (theta.size() != param_count()) throw ShapeError("PlanarDensity: parameter count mismatch");
  std::size_t o = 0;
  for (auto& l : raw_) {
    for (double& x : l.u) x = theta[o++];
    for (double& x : l.w) x = theta[o++];
    l.b = theta[o++];
  }
}

std::vector<double> train_planar(PlanarDensity& model, std::span<const Vector> data,
                                 const PlanarTrainConfig& cfg) {
  if (data.empty()) throw ConfigError("train_planar: empty dataset");
  model.fit_standardizer(data);
  RngStream stream(cfg.seed);
  AdamState adam = AdamState::fresh(model.param_count(), cfg.lr);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> curve;
  Vector grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[stream.next_below(i)]);
    }
    double loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Vector> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      loss += model.batch_nll_gradient(batch, grad);
      Vector theta = model.params();
      adam_step(theta, grad, adam);
      model.set_params(theta);
      ++batches;
    }
    curve.push_back(loss / static_cast<double>(batches));
  }
  return curve;
}

}  // namespace condflow
