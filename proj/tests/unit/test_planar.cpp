#include <cmath>

#include "condflow/errors.hpp"
#include "condflow/planar.hpp"
#include "doctest.h"
#include "test_models.hpp"

using namespace condflow;

TEST_CASE("zero u is the identity") {
  const std::vector<PlanarLayer> layers{{Vector{0, 0}, Vector{1, -1}, 0.3}};
  const auto out = planar_forward(Vector{0.4, 0.2}, layers);
  CHECK(out.z == Vector{0.4, 0.2});
  CHECK(out.logdet == 0.0);
}

TEST_CASE("logdet matches the numeric Jacobian") {
  RngStream s(3);
  for (int rep = 0; rep < 5; ++rep) {
    const std::vector<PlanarLayer> layers{{testing_support::uniform_vector(s, 2, -1, 1),
                                           testing_support::uniform_vector(s, 2, -1, 1),
                                           testing_support::uniform(s, -1, 1)}};
    const Vector z = testing_support::uniform_vector(s, 2, -1, 1);
    const double h = 1e-6;
    double J[2][2];
    for (int j = 0; j < 2; ++j) {
      Vector zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const Vector fp = planar_forward(zp, layers).z, fm = planar_forward(zm, layers).z;
      for (int i = 0; i < 2; ++i) J[i][j] = (fp[i] - fm[i]) / (2 * h);
    }
    const double det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
    CHECK(std::abs(planar_forward(z, layers).logdet - std::log(std::abs(det))) <= 1e-6);
  }
}

TEST_CASE("logdet is additive over a chain") {
  RngStream s(4);
  std::vector<PlanarLayer> layers;
  for (int i = 0; i < 2; ++i) {
    layers.push_back({testing_support::uniform_vector(s, 3, -0.5, 0.5), testing_support::uniform_vector(s, 3, -1, 1),
                      testing_support::uniform(s, -1, 1)});
  }
  const Vector z{0.1, -0.3, 0.7};
  const auto first = planar_forward(z, std::span(layers).first(1));
  const auto second = planar_forward(first.z, std::span(layers).subspan(1));
  const auto both = planar_forward(z, layers);
  CHECK(both.logdet == doctest::Approx(first.logdet + second.logdet));
  CHECK(both.z == second.z);
}

TEST_CASE("singular layer") {
  // 1 + uᵀw·tanh′(0) = 1 − 1 = 0
  const std::vector<PlanarLayer> layers{{Vector{-1, 0}, Vector{1, 0}, 0.0}};
  try {
    planar_forward(Vector{0, 0}, layers);
    FAIL("expected a singular-layer error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::singular);
  }
}

TEST_CASE("density gradient matches central differences") {
  RngStream s(5);
  PlanarDensity model(2, 3, s);
  Vector theta = model.params();
  for (double& t : theta) t = testing_support::uniform(s, -0.8, 0.8);
  model.set_params(theta);
  std::vector<Vector> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(testing_support::uniform_vector(s, 2, -2, 2));
  model.fit_standardizer(batch);
  Vector grad;
  model.batch_nll_gradient(batch, grad);
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double fd = testing_support::central_difference(
        [&](double x) {
          PlanarDensity m2 = model;
          Vector th = theta;
          th[j] = x;
          m2.set_params(th);
          Vector g;
          return m2.batch_nll_gradient(batch, g);
        },
        theta[j], 1e-6);
    CHECK(std::abs(fd - grad[j]) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("effective layers stay invertible") {
  RngStream s(6);
  PlanarDensity model(2, 4, s);
  Vector theta = model.params();
  for (double& t : theta) t = testing_support::uniform(s, -3, 3);
  model.set_params(theta);
  for (const auto& l : model.effective_layers()) CHECK(dot(l.u, l.w) >= -1.0 - 1e-12);
}

TEST_CASE("training fits a correlated Gaussian") {
  RngStream s(7);
  std::vector<Vector> data;
  for (int i = 0; i < 4000; ++i) {
    const Vector g = sample_gaussian(s, 2);
    data.push_back({g[0], 0.8 * g[0] + 0.6 * g[1]});
  }
  PlanarDensity model(2, 8, s);
  model.fit_standardizer(data);
  PlanarTrainConfig cfg;
  cfg.epochs = 30;
  const auto curve = train_planar(model, data, cfg);
  // entropy of N(0, [[1, .8], [.8, 1]]) = 1 + log 2π + 0.5 log 0.36
  const double entropy = 1.0 + std::log(2 * M_PI) + 0.5 * std::log(0.36);
  CHECK(curve.back() < curve.front());
  CHECK(curve.back() == doctest::Approx(entropy).epsilon(0.05));
}
