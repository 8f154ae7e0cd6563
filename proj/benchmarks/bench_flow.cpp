// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "condflow/cflow.hpp"
#include "condflow/dynamics.hpp"
#include "condflow/odeint.hpp"

namespace {

using condflow::FlowModel;
using condflow::RngStream;
using condflow::Vector;

FlowModel model_for(std::size_t d, std::size_t L) {
  RngStream s(1);
  return FlowModel::initialized(d, L, 4, s);
}

void BM_DynamicsEval(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const FlowModel m = model_for(d, 17);
  RngStream s(2);
  const Vector z = condflow::sample_gaussian(s, d);
  const Vector a = condflow::sample_gaussian(s, 17);
  condflow::DynamicsEvaluator ev(m, a);
  Vector out(d);
  for (auto _ : state) {
    ev.eval(z, 0.5, out);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_DynamicsEval)->Arg(16)->Arg(64)->Arg(512);

void BM_AugmentedVjp(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const FlowModel m = model_for(d, 17);
  RngStream s(3);
  const Vector z = condflow::sample_gaussian(s, d);
  const Vector v = condflow::sample_gaussian(s, d);
  const Vector a = condflow::sample_gaussian(s, 17);
  const auto probes = condflow::ProbeSet::rademacher(s, d, 1);
  condflow::DynamicsEvaluator ev(m, a);
  Vector f(d), gz(d), gt(m.param_count());
  for (auto _ : state) {
    benchmark::DoNotOptimize(ev.augmented_vjp(z, 0.5, v, probes, 1.0, f, gz, gt));
  }
}
BENCHMARK(BM_AugmentedVjp)->Arg(16)->Arg(64)->Arg(512);

void BM_ForwardMap(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const FlowModel m = model_for(d, 5);
  RngStream s(4);
  const Vector z = condflow::sample_gaussian(s, d);
  const Vector a(5, 0.0);
  condflow::SolverConfig cfg;
  cfg.trace_mode = state.range(1) != 0 ? condflow::TraceMode::hutchinson : condflow::TraceMode::none;
  for (auto _ : state) {
    auto out = condflow::forward_map(m, z, a, cfg, RngStream(5));
    benchmark::DoNotOptimize(out.value.data());
  }
}
BENCHMARK(BM_ForwardMap)->Args({16, 0})->Args({16, 1})->Args({64, 1});

}  // namespace

BENCHMARK_MAIN();
