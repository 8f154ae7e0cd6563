#include <cmath>

#include "condflow/errors.hpp"
#include "condflow/numerics.hpp"
#include "doctest.h"

using namespace condflow;

TEST_CASE("matvec") {
  CHECK(matvec(DenseMatrix::identity(3), Vector{1, 2, 3}) == Vector{1, 2, 3});
  CHECK(matvec(DenseMatrix(2, 3, 0.0), Vector{5, 5, 5}) == Vector{0, 0});
  CHECK(matvec(DenseMatrix{{1, 2}, {3, 4}}, Vector{1, 1}) == Vector{3, 7});
  CHECK_THROWS_AS(matvec(DenseMatrix(2, 3, 0.0), Vector{1, 2}), ShapeError);
}

TEST_CASE("matmul and transpose agree with matvec") {
  const DenseMatrix a{{1, 2, 3}, {4, 5, 6}};
  const DenseMatrix b{{1, 0}, {0, 1}, {1, 1}};
  const DenseMatrix ab = matmul(a, b);
  CHECK(ab == DenseMatrix{{4, 5}, {10, 11}});
  CHECK(a.transposed().transposed() == a);
  Vector acc(3, 0.0);
  matvec_transposed_add(a, Vector{1, 1}, acc);
  CHECK(acc == Vector{5, 7, 9});
}

TEST_CASE("rng streams are reproducible and seed-sensitive") {
  RngStream a(7), b(7), c(8);
  const Vector x = sample_gaussian(a, 16);
  CHECK(x == sample_gaussian(b, 16));
  CHECK(x != sample_gaussian(c, 16));
  RngStream d(7, 3), e(7);
  for (int i = 0; i < 3; ++i) e.next_u64();
  CHECK(d.next_u64() == e.next_u64());
  CHECK(RngStream(7).child(1).next_u64() != RngStream(7).child(2).next_u64());
}

TEST_CASE("rng output is pinned") {
  // Frozen so that cross-platform drift in the generator is caught.
  // Reference values from an independent splitmix64 implementation.
  RngStream s(42);
  CHECK(s.next_u64() == 0x158a5433a1c7412dULL);
  CHECK(s.next_u64() == 0x986d7b395a16e230ULL);
  CHECK(s.next_u64() == 0x9c18a0fb246644a7ULL);
  RngStream t(0);
  CHECK(t.next_u64() == 0x18a33082d6b0d44fULL);
  RngStream u(42, 2);
  CHECK(u.next_u64() == 0x9c18a0fb246644a7ULL);
}

TEST_CASE("gaussian moments") {
  RngStream s(1);
  const Vector x = sample_gaussian(s, 100000);
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);
  CHECK_THROWS_AS(sample_gaussian(s, 0), Error);
}

TEST_CASE("rademacher") {
  RngStream s(3);
  const Vector r = sample_rademacher(s, 100000);
  double mean = 0;
  for (double v : r) {
    CHECK(v * v == 1.0);
    mean += v;
  }
  CHECK(std::abs(mean / r.size()) < 0.02);
  RngStream s2(3);
  CHECK(sample_rademacher(s2, 100000) == r);
  try {
    sample_rademacher(s, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::empty_request);
  }
}

TEST_CASE("adam") {
  SUBCASE("first step has magnitude lr") {
    Vector p{0.0};
    AdamState st = AdamState::fresh(1, 1e-3);
    adam_step(p, Vector{1.0}, st);
    CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(st.t == 1);
  }
  SUBCASE("zero gradient leaves parameters") {
    Vector p{1.0, -2.0};
    AdamState st = AdamState::fresh(2, 1e-3);
    adam_step(p, Vector{0.0, 0.0}, st);
    CHECK(p == Vector{1.0, -2.0});
  }
  SUBCASE("deterministic") {
    Vector p1{0.3, 0.1}, p2 = p1;
    AdamState s1 = AdamState::fresh(2, 1e-2), s2 = s1;
    adam_step(p1, Vector{0.5, -0.2}, s1);
    adam_step(p2, Vector{0.5, -0.2}, s2);
    CHECK(p1 == p2);
  }
  SUBCASE("non-finite gradient names the index") {
    Vector p{0.0, 0.0, 0.0};
    AdamState st = AdamState::fresh(3, 1e-3);
    try {
      adam_step(p, Vector{0.0, NAN, 0.0}, st);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find('1') != std::string::npos);
    }
  }
}
