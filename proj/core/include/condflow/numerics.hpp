// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace condflow {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  DenseMatrix transposed() const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

/// Exact dense product m·x. Throws ShapeError when x.size() != m.cols().
Vector matvec(const DenseMatrix& m, std::span<const double> x);

// Unchecked kernels used on hot paths; callers guarantee the shapes.
void matvec_into(const DenseMatrix& m, std::span<const double> x, std::span<double> out);
void matvec_transposed_add(const DenseMatrix& m, std::span<const double> x,
                           std::span<double> out);
/// acc(i, j) += u[i] * v[j] for a row-major block of u.size() x v.size().
void add_outer(std::span<double> acc, std::span<const double> u, std::span<const double> v);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double norm_inf(std::span<const double> a);
bool all_finite(std::span<const double> a);

/// Counter-based random stream. Output is a pure function of (seed, counter),
/// so a copied stream replays the same draws.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in the open interval (0, 1) with 53 random bits.
  double next_uniform();
  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

  /// Independent stream keyed by (seed, key); does not advance this one.
  RngStream child(std::uint64_t key) const;

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

Vector sample_gaussian(RngStream& stream, std::size_t n);
Vector sample_rademacher(RngStream& stream, std::size_t n);

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState fresh(std::size_t n, double lr = 1e-3);
};

/// One bias-corrected Adam update applied in place. Throws NumericError naming
/// the first non-finite gradient entry; params and state are untouched then.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace condflow
