#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "condflow/errors.hpp"
#include "condflow/odeint.hpp"
#include "doctest.h"
#include "test_models.hpp"

using namespace condflow;
using testing_support::linear_model;
using testing_support::random_model;

TEST_CASE("dopri5 analytic solutions") {
  SolverConfig cfg;
  SUBCASE("zero field") {
    const auto sol = dopri5_integrate([](double, auto, std::span<double> dy) { std::fill(dy.begin(), dy.end(), 0.0); },
                                      Vector{1.5, -2.0}, 0.0, 3.0, cfg);
    CHECK(sol.y == Vector{1.5, -2.0});
  }
  SUBCASE("exponential growth") {
    const auto sol = dopri5_integrate([](double, std::span<const double> y, std::span<double> dy) { dy[0] = y[0]; },
                                      Vector{1.0}, 0.0, 1.0, cfg);
    CHECK(std::abs(sol.y[0] - std::numbers::e) <= 1e-5);
    CHECK(sol.stats.accepted > 0);
  }
  SUBCASE("quadrature of cos") {
    const auto sol = dopri5_integrate([](double t, auto, std::span<double> dy) { dy[0] = std::cos(t); },
                                      Vector{0.0}, 0.0, std::numbers::pi / 2, cfg);
    CHECK(std::abs(sol.y[0] - 1.0) <= 1e-5);
  }
  SUBCASE("backward in time") {
    const auto sol = dopri5_integrate([](double, std::span<const double> y, std::span<double> dy) { dy[0] = y[0]; },
                                      Vector{std::numbers::e}, 1.0, 0.0, cfg);
    CHECK(std::abs(sol.y[0] - 1.0) <= 1e-5);
  }
  SUBCASE("step budget") {
    SolverConfig tight = cfg;
    tight.max_steps = 3;
    tight.rtol = tight.atol = 1e-12;
    CHECK_THROWS_AS(dopri5_integrate([](double, std::span<const double> y, std::span<double> dy) { dy[0] = std::sin(50 * y[0]) + 3; },
                                     Vector{1.0}, 0.0, 10.0, tight),
                    DivergenceError);
  }
  SUBCASE("non-finite field") {
    CHECK_THROWS_AS(dopri5_integrate([](double, auto, std::span<double> dy) { dy[0] = NAN; }, Vector{1.0}, 0.0, 1.0, cfg),
                    NumericError);
  }
}

TEST_CASE("hutchinson trace") {
  SUBCASE("zero Jacobian") {
    RngStream s(1);
    const auto probes = ProbeSet::rademacher(s, 3, 4);
    CHECK(hutchinson_trace([](auto, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); }, 3,
                           probes.probes) == 0.0);
  }
  SUBCASE("diagonal Jacobian is exact with one probe") {
    RngStream s(2);
    const auto probes = ProbeSet::rademacher(s, 4, 1);
    const Vector diag{1.5, -2.0, 0.25, 3.0};
    const double est = hutchinson_trace(
        [&](std::span<const double> v, std::span<double> out) {
          for (std::size_t i = 0; i < 4; ++i) out[i] = v[i] * diag[i];
        },
        4, probes.probes);
    CHECK(est == doctest::Approx(2.75));
  }
  SUBCASE("dense 6x6 with many probes") {
    RngStream s(3);
    DenseMatrix J(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) J(i, j) = testing_support::uniform(s, -1, 1);
    for (std::size_t i = 0; i < 6; ++i) J(i, i) += 2.0;
    double exact = 0.0;
    for (std::size_t i = 0; i < 6; ++i) exact += J(i, i);
    const auto probes = ProbeSet::rademacher(s, 6, 10000);
    const double est = hutchinson_trace(
        [&](std::span<const double> v, std::span<double> out) {
          std::fill(out.begin(), out.end(), 0.0);
          matvec_transposed_add(J, v, out);
        },
        6, probes.probes);
    CHECK(std::abs(est - exact) <= 0.02 * std::abs(exact));
  }
}

TEST_CASE("integrate_with_logdet") {
  SolverConfig cfg;
  cfg.trace_mode = TraceMode::exact;
  SUBCASE("zero model") {
    const FlowModel m = FlowModel::identity(3, 2, 4);
    RngStream s(1);
    const auto sol = integrate_with_logdet(m, Vector{1, 2, 3}, Vector{0, 0}, 0.0, 1.0, cfg, s);
    CHECK(sol.z == Vector{1, 2, 3});
    CHECK(sol.dlogp == 0.0);
  }
  SUBCASE("linear contraction") {
    DenseMatrix A(3, 3, 0.0);
    for (std::size_t i = 0; i < 3; ++i) A(i, i) = -1.0;
    const FlowModel m = linear_model(A);
    RngStream s(1);
    const auto sol = integrate_with_logdet(m, Vector{1, -2, 0.5}, Vector{0}, 0.0, 1.0, cfg, s);
    CHECK(sol.z[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-5));
    CHECK(sol.z[1] == doctest::Approx(-2 * std::exp(-1.0)).epsilon(1e-5));
    CHECK(sol.dlogp == doctest::Approx(3.0).epsilon(1e-6));
  }
  SUBCASE("reversal") {
    const FlowModel m = random_model(4, 2, 4, 5);
    cfg.trace_mode = TraceMode::hutchinson;
    RngStream s(9);
    const ProbeSet probes = make_probes(cfg, 4, s);
    const Vector z0{0.2, -0.4, 0.9, 0.1}, a{0.3, -0.3};
    const auto fwd = integrate_with_logdet(m, z0, a, 0.0, 1.0, cfg, probes);
    const auto back = integrate_with_logdet(m, fwd.z, a, 1.0, 0.0, cfg, probes);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(back.z[i] - z0[i]) <= 1e-4);
    CHECK(std::abs(back.dlogp + fwd.dlogp) <= 1e-4);
  }
}

TEST_CASE("adjoint") {
  SolverConfig cfg;
  cfg.trace_mode = TraceMode::exact;
  SUBCASE("zero loss gradient") {
    const FlowModel m = random_model(3, 2, 2, 4);
    const auto probes = ProbeSet::basis(3);
    const auto r = adjoint_backward(m, Vector{0.1, 0.2}, 0.0, 1.0, Vector{0.5, 0.5, 0.5}, Vector{0, 0, 0}, 0.0,
                                    cfg, probes);
    for (double g : r.grad_z_start) CHECK(g == 0.0);
    for (double g : r.grad_theta) CHECK(g == 0.0);
  }
  SUBCASE("linear dynamics matches the matrix exponential") {
    RngStream s(11);
    for (std::size_t d = 2; d <= 4; ++d) {
      DenseMatrix A(d, d);
      Eigen::MatrixXd E(d, d);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) E(i, j) = A(i, j) = testing_support::uniform(s, -0.8, 0.8);
      const FlowModel m = linear_model(A);
      const Vector g = testing_support::uniform_vector(s, d, -1, 1);
      const Vector z0 = testing_support::uniform_vector(s, d, -1, 1);
      SolverConfig tight = cfg;
      tight.rtol = tight.atol = 1e-9;
      const auto fwd = integrate_with_logdet(m, z0, Vector{0}, 0.0, 1.3, tight, ProbeSet::basis(d));
      const auto r = adjoint_backward(m, Vector{0}, 0.0, 1.3, fwd.z, g, 0.0, cfg, ProbeSet::basis(d));
      const Eigen::MatrixXd expo = (E.transpose() * 1.3).exp();
      const Eigen::VectorXd want = expo * Eigen::Map<const Eigen::VectorXd>(g.data(), d);
      for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(r.grad_z_start[i] - want[i]) <= 1e-5);
    }
  }
}
