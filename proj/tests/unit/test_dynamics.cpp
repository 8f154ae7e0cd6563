#include <cmath>

#include "condflow/dynamics.hpp"
#include "condflow/errors.hpp"
#include "doctest.h"
#include "test_models.hpp"

using namespace condflow;
using testing_support::random_model;
using testing_support::rel_err;

TEST_CASE("concat squash hand values") {
  SUBCASE("zero parameters give zero") {
    const auto p = ConcatSquashParams::zeros(3, 2);
    CHECK(concat_squash_forward(Vector{1, -2, 3}, Vector{0.5, 1}, p) == Vector{0, 0, 0});
  }
  SUBCASE("saturated gate passes W x") {
    auto p = ConcatSquashParams::zeros(2, 2);
    p.weight = DenseMatrix::identity(2);
    p.gate_bias = {50, 50};
    const Vector y = concat_squash_forward(Vector{0.3, -0.7}, Vector{1, 1}, p);
    CHECK(y[0] == doctest::Approx(0.3));
    CHECK(y[1] == doctest::Approx(-0.7));
  }
  SUBCASE("scalar case") {
    auto p = ConcatSquashParams::zeros(1, 1);
    p.weight(0, 0) = 2.0;
    p.hyper_weight(0, 0) = 3.0;
    CHECK(concat_squash_forward(Vector{1}, Vector{1}, p)[0] == doctest::Approx(4.0));
  }
  SUBCASE("shape mismatch") {
    const auto p = ConcatSquashParams::zeros(2, 2);
    CHECK_THROWS_AS(concat_squash_forward(Vector{1, 2, 3}, Vector{1, 1}, p), ShapeError);
  }
}

TEST_CASE("moving norm") {
  SUBCASE("identity") {
    const auto p = MovingNormParams::identity(3, 0.0);
    const auto out = moving_norm_forward(Vector{1, 2, 3}, p);
    CHECK(out.y == Vector{1, 2, 3});
    CHECK(out.logdet == 0.0);
  }
  SUBCASE("hand value") {
    auto p = MovingNormParams::identity(1, 0.0);
    p.log_scale = {std::log(2.0)};
    p.running_mean = {3.0};
    const auto out = moving_norm_forward(Vector{5}, p);
    CHECK(out.y[0] == doctest::Approx(4.0));
    CHECK(out.logdet == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("round trip and logdet cancel") {
    RngStream s(5);
    auto p = MovingNormParams::identity(4);
    p.log_scale = testing_support::uniform_vector(s, 4, -1, 1);
    p.shift = testing_support::uniform_vector(s, 4, -1, 1);
    p.running_mean = testing_support::uniform_vector(s, 4, -1, 1);
    p.running_var = testing_support::uniform_vector(s, 4, 0.2, 3);
    const Vector x = testing_support::uniform_vector(s, 4, -5, 5);
    const auto f = moving_norm_forward(x, p);
    const auto b = moving_norm_inverse(f.y, p);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(b.y[i] - x[i]) <= 1e-12);
    CHECK(f.logdet + b.logdet == 0.0);
  }
  SUBCASE("underflowing scale is rejected on inverse") {
    auto p = MovingNormParams::identity(1);
    p.log_scale = {-800.0};
    CHECK_THROWS_AS(moving_norm_inverse(Vector{1.0}, p), NumericError);
  }
  SUBCASE("training updates statistics before normalizing") {
    auto p = MovingNormParams::identity(1, 0.0);
    std::vector<Vector> batch{{1.0}, {3.0}};
    const auto out = moving_norm_forward_batch(batch, p, true);
    // mean 2, biased var 1 blended with momentum 0.1
    CHECK(p.running_mean[0] == doctest::Approx(0.2));
    CHECK(p.running_var[0] == doctest::Approx(1.0));
    CHECK(out[0].y[0] == doctest::Approx(0.8));
  }
}

TEST_CASE("parameter counts") {
  CHECK(param_count(512, 17, 2) == 565249);
  CHECK(param_count(512, 17, 3) == 846849);
  CHECK(param_count(512, 17, 4) == 1128449);
  CHECK(param_count(512, 17, 6) == 1691649);
  RngStream s(1);
  const FlowModel m = FlowModel::initialized(6, 3, 4, s);
  CHECK(m.param_count() == param_count(6, 3, 4));
  CHECK(m.parameters().size() == m.param_count());
  CHECK(param_layout(m).total == m.param_count());
}

TEST_CASE("parameter vector round trip") {
  FlowModel m = random_model(3, 2, 2, 9);
  const Vector theta = m.parameters();
  RngStream s(1);
  FlowModel n = FlowModel::initialized(3, 2, 2, s);
  n.set_parameters(theta);
  CHECK(n.parameters() == theta);
  CHECK(m.end_time() == doctest::Approx(softplus(theta.back()) + kMinEndTime));
  CHECK_THROWS_AS(n.set_parameters(Vector(theta.size() - 1)), ShapeError);
}

TEST_CASE("dynamics basics") {
  const FlowModel zero = FlowModel::identity(3, 2, 4);
  CHECK(dynamics_eval(Vector{1, 2, 3}, Vector{0.1, 0.2}, 0.4, zero) == Vector{0, 0, 0});
  const auto vjp0 = dynamics_vjp(Vector{1, 2, 3}, Vector{0.1, 0.2}, 0.4, zero, Vector{1, 1, 1});
  CHECK(vjp0.vjp_z == Vector{0, 0, 0});

  const FlowModel m = random_model(4, 3, 4, 2, 3.0);
  const Vector out = dynamics_eval(Vector{5, -5, 2, 1}, Vector{1, 2, 3}, 0.5, m);
  for (double v : out) CHECK((v > -1.0 && v < 1.0));
  const auto vjp = dynamics_vjp(Vector{5, -5, 2, 1}, Vector{1, 2, 3}, 0.5, m, Vector(4, 0.0));
  for (double v : vjp.vjp_z) CHECK(v == 0.0);
  for (double v : vjp.vjp_theta) CHECK(v == 0.0);
  CHECK_THROWS_AS(dynamics_eval(Vector{NAN, 0, 0, 0}, Vector{1, 2, 3}, 0.5, m), NumericError);
}

TEST_CASE("dynamics vjp against central differences") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const std::size_t d = 2 + seed % 3, L = 1 + seed % 3;
    FlowModel m = random_model(d, L, 1 + seed % 4, seed);
    m.tanh_on_last = seed % 2 == 0;
    RngStream s(100 + seed);
    const Vector z = testing_support::uniform_vector(s, d, -1, 1);
    const Vector a = testing_support::uniform_vector(s, L, -1, 1);
    const Vector v = testing_support::uniform_vector(s, d, -1, 1);
    const double t = 0.37;
    const auto vjp = dynamics_vjp(z, a, t, m, v);
    const double h = 1e-5;

    for (std::size_t i = 0; i < d; ++i) {
      const double fd = testing_support::central_difference(
          [&](double x) {
            Vector zz = z;
            zz[i] = x;
            return dot(v, dynamics_eval(zz, a, t, m));
          },
          z[i], h);
      CHECK(std::abs(fd - vjp.vjp_z[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    const Vector theta = m.parameters();
    const auto layout = param_layout(m);
    for (std::size_t j = 0; j < layout.blocks_total; ++j) {
      const double fd = testing_support::central_difference(
          [&](double x) {
            FlowModel mm = m;
            Vector th = theta;
            th[j] = x;
            mm.set_parameters(th);
            return dot(v, dynamics_eval(z, a, t, mm));
          },
          theta[j], h);
      CHECK(std::abs(fd - vjp.vjp_theta[j]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("augmented vjp matches differences of the trace-weighted objective") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const std::size_t d = 3, L = 2;
    const FlowModel m = random_model(d, L, 3, 40 + seed);
    RngStream s(7 + seed);
    const Vector a = testing_support::uniform_vector(s, L, -1, 1);
    const Vector z = testing_support::uniform_vector(s, d, -1, 1);
    const Vector v = testing_support::uniform_vector(s, d, -1, 1);
    const ProbeSet probes = ProbeSet::rademacher(s, d, 2);
    const double w = -0.8, t = 0.6;

    auto objective = [&](const FlowModel& mm, const Vector& zz) {
      DynamicsEvaluator ev(mm, a);
      Vector f(d);
      const double tr = ev.eval_with_trace(zz, t, probes, f);
      return dot(v, f) + w * tr;
    };

    DynamicsEvaluator ev(m, a);
    Vector f(d), gz(d), gth(m.param_count(), 0.0);
    ev.augmented_vjp(z, t, v, probes, w, f, gz, gth);
    CHECK(f == dynamics_eval(z, a, t, m));

    const double h = 1e-5;
    for (std::size_t i = 0; i < d; ++i) {
      const double fd = testing_support::central_difference(
          [&](double x) {
            Vector zz = z;
            zz[i] = x;
            return objective(m, zz);
          },
          z[i], h);
      CHECK(std::abs(fd - gz[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
    const Vector theta = m.parameters();
    const auto layout = param_layout(m);
    for (std::size_t j = 0; j < layout.blocks_total; ++j) {
      const double fd = testing_support::central_difference(
          [&](double x) {
            FlowModel mm = m;
            Vector th = theta;
            th[j] = x;
            mm.set_parameters(th);
            return objective(mm, z);
          },
          theta[j], h);
      CHECK(std::abs(fd - gth[j]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("exact trace through basis probes equals the Jacobian trace") {
  const FlowModel m = random_model(4, 2, 4, 77);
  const Vector a{0.3, -0.2}, z{0.1, 0.4, -0.3, 0.2};
  DynamicsEvaluator ev(m, a);
  Vector f(4);
  const double tr = ev.eval_with_trace(z, 0.5, ProbeSet::basis(4), f);
  double fd = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    fd += testing_support::central_difference(
        [&](double x) {
          Vector zz = z;
          zz[i] = x;
          return dynamics_eval(zz, a, 0.5, m)[i];
        },
        z[i], 1e-5);
  }
  CHECK(tr == doctest::Approx(fd).epsilon(1e-7));
}
