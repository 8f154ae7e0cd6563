// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condflow/cflow.hpp"
#include "condflow/numerics.hpp"

namespace condflow {

enum class LinkKind : std::uint8_t { logistic = 0, linear = 1 };

/// Deterministic stand-in for a generator plus attribute classifiers:
///   mapping   w = center + truncation · (M · softsign(z_s) − center)
///   attribute a_k = link_k(P_k · w)
///   identity  Q · w, with Q's rows orthonormal and orthogonal to P's rows.
struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::size_t attr_dim = 0;
  DenseMatrix mixing;      // M, d x d
  Vector center;           // w̄
  DenseMatrix attr_proj;   // P, L x d
  std::vector<LinkKind> links;
  Vector link_gain;
  Vector link_offset;
  DenseMatrix identity_proj;  // Q, (d − L) x d
  std::vector<std::string> channel_names;

  std::uint64_t fingerprint() const;
  std::optional<std::size_t> channel_index(std::string_view name) const;
  std::size_t semantic_count() const;
};

inline constexpr double kDefaultTruncation = 0.7;
inline constexpr std::size_t kDefaultDatasetSize = 10000;

/// Number of bounded "semantic" channels for an attribute width L (8 of 17).
std::size_t semantic_channels_for(std::size_t attr_dim);

WorldSpec make_world(std::uint64_t seed, std::size_t dim, std::size_t attr_dim);

Vector mapping_f(const WorldSpec& world, std::span<const double> z_s, double truncation);
Vector attribute_fn(const WorldSpec& world, std::span<const double> w);
Vector identity_embed(const WorldSpec& world, std::span<const double> w);

/// Derivative of channel k with respect to w.
Vector attribute_gradient(const WorldSpec& world, std::span<const double> w, std::size_t k);

struct SyntheticDataset {
  std::vector<TrainingTriple> triples;
  std::uint64_t world_fingerprint = 0;
  std::size_t dim = 0;
  std::size_t attr_dim = 0;
};

SyntheticDataset gen_dataset(const WorldSpec& world, std::size_t n, std::uint64_t seed,
                             double truncation = kDefaultTruncation);

/// Restricts every triple's attributes to `channels` (world indices).
std::vector<TrainingTriple> select_channels(std::span<const TrainingTriple> data,
                                            std::span<const std::size_t> channels);
Vector select_channels(std::span<const double> attrs, std::span<const std::size_t> channels);

/// Per-channel standard deviation of the dataset attributes.
Vector attribute_std(std::span<const TrainingTriple> data);

// Binary dataset file; layout documented in docs/FORMATS.md.
void write_dataset(std::ostream& out, const SyntheticDataset& data);
SyntheticDataset read_dataset(std::istream& in);

/// Two-dimensional conditional Gaussian family with one attribute:
///   a ~ N(0, 1),  w | a ~ N((slope·a, curvature·(a² − 1)), diag(σ₁², σ₂²)).
/// Everything about it is known in closed form, so it serves as the density
/// oracle for the flow.
struct ToyConditionalGaussian {
  double slope = 1.0;
  double curvature = 0.5;
  double sigma1 = 0.5;
  double sigma2 = 0.3;

  Vector conditional_mean(double a) const;
  double log_density(std::span<const double> w, double a) const;
  /// Differential entropy of w | a (independent of a for this family).
  double conditional_entropy() const;
  Vector sample_conditional(double a, RngStream& stream) const;
  std::vector<TrainingTriple> sample(std::size_t n, RngStream& stream) const;
};

}  // namespace condflow
