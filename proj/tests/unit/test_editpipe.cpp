#include <cmath>

#include "condflow/cflow.hpp"
#include "condflow/editpipe.hpp"
#include "condflow/errors.hpp"
#include "doctest.h"
#include "test_models.hpp"

using namespace condflow;
using testing_support::random_model;

namespace {

ExtendedLatent random_state(RngStream& s, std::size_t K, std::size_t d) {
  ExtendedLatent e{DenseMatrix(K, d)};
  for (std::size_t r = 0; r < K; ++r)
    for (std::size_t c = 0; c < d; ++c) e.rows(r, c) = testing_support::uniform(s, -1, 1);
  return e;
}

double max_abs_diff(const ExtendedLatent& a, const ExtendedLatent& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.rows.data().size(); ++i) m = std::max(m, std::abs(a.rows.data()[i] - b.rows.data()[i]));
  return m;
}

std::size_t changed_rows(const ExtendedLatent& a, const ExtendedLatent& b) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < a.count(); ++r) {
    const auto x = a.rows.row(r), y = b.rows.row(r);
    n += !std::equal(x.begin(), x.end(), y.begin());
  }
  return n;
}

}  // namespace

TEST_CASE("built-in edit table") {
  const EditTable t = EditTable::builtin();
  CHECK(t.kinds().size() == 10);
  CHECK(t.at("light").rows == std::vector<std::size_t>{7, 8, 9, 10, 11});
  CHECK(t.at("expression").rows == std::vector<std::size_t>{4, 5});
  CHECK(t.at("yaw").rows == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(t.at("pitch").rows == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(t.at("age").rows == std::vector<std::size_t>{4, 5, 6, 7});
  CHECK(t.at("gender").rows.size() == 8);
  CHECK(t.at("remove_glasses").rows == std::vector<std::size_t>{0, 1, 2});
  CHECK(t.at("add_glasses").rows.size() == 6);
  CHECK(t.at("baldness").rows.size() == 6);
  CHECK(t.at("facial_hair").rows == std::vector<std::size_t>{5, 6, 7, 10});
  CHECK_THROWS_AS(t.at("smirk"), ConfigError);
  CHECK(EditTable::parse(t.to_text()).to_text() == t.to_text());
}

TEST_CASE("edit table parsing errors carry the line") {
  try {
    EditTable::parse("# header\nyaw = 0-3\nlight = 9-7\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(EditTable::parse("yaw 0-3\n"), ConfigError);
  CHECK_THROWS_AS(EditTable::parse("yaw = 0-3\nyaw = 1\n"), ConfigError);
  CHECK_THROWS_AS(EditTable::parse("Yaw = 1\n"), ConfigError);
  CHECK_THROWS_AS(EditTable::parse("yaw = 1,,2\n"), ConfigError);
  CHECK(EditTable::parse("custom = 2, 0-1 # trailing\n").at("custom").rows == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("subset selection") {
  RngStream s(1);
  const ExtendedLatent w = random_state(s, 18, 4);
  const Vector w_new{9, 9, 9, 9};
  const EditTable t = EditTable::builtin();
  const ExtendedLatent out = subset_select(w, w_new, t.at("light"));
  for (std::size_t r = 0; r < 18; ++r) {
    const bool inside = r >= 7 && r <= 11;
    const auto row = out.rows.row(r);
    if (inside) {
      CHECK(Vector(row.begin(), row.end()) == w_new);
    } else {
      const auto orig = w.rows.row(r);
      CHECK(std::equal(row.begin(), row.end(), orig.begin()));
    }
  }
  const ExtendedLatent same = ExtendedLatent::broadcast(w_new, 18);
  CHECK(subset_select(same, w_new, t.at("gender")) == same);

  const Vector y{1, 2, 3, 4}, l{5, 6, 7, 8};
  CHECK(subset_select(subset_select(w, y, t.at("yaw")), l, t.at("light")) ==
        subset_select(subset_select(w, l, t.at("light")), y, t.at("yaw")));

  const ExtendedLatent small = random_state(s, 6, 4);
  CHECK_THROWS_AS(subset_select(small, w_new, t.at("light")), ConfigError);
}

TEST_CASE("readout") {
  ExtendedLatent e{DenseMatrix{{1, 2}, {3, 4}}};
  CHECK(readout(e) == Vector{2, 3});
  CHECK(readout(e, Vector{1, 0}) == Vector{1, 2});
  CHECK_THROWS_AS(readout(e, Vector{1}), ShapeError);
}

TEST_CASE("encoding and decoding") {
  SolverConfig cfg;
  SUBCASE("identity model") {
    const FlowModel m = FlowModel::identity(3, 2, 4);
    CHECK(jre(m, Vector{1, 2, 3}, Vector{0.1, 0.2}, cfg) == Vector{1, 2, 3});
  }
  SUBCASE("decode of encode") {
    const FlowModel m = random_model(4, 2, 4, 8);
    const Vector w{0.3, -0.2, 0.5, 0.1}, a{0.2, -0.4};
    const Vector back = cfe(m, jre(m, w, a, cfg), a, cfg);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(back[i] - w[i]) <= 1e-3);
    CHECK(jre(m, w, a, cfg) != jre(m, w, Vector{0.9, 0.9}, cfg));
  }
}

TEST_CASE("apply_edit invariants") {
  const FlowModel m = random_model(4, 2, 4, 21);
  const EditTable t = EditTable::builtin();
  RngStream s(2);
  const ExtendedLatent state = random_state(s, 18, 4);
  const Vector a{0.3, -0.1};
  EditOptions opts;
  opts.threads = 2;

  for (const auto mode : {EditMode::fast, EditMode::accurate}) {
    for (const auto variant : {PipelineVariant::v1, PipelineVariant::v2}) {
      const EditRequest null_req{t.at("yaw"), {{0, a[0]}}, mode, variant};
      const auto [out, a_new] = apply_edit(m, state, a, null_req, opts);
      CHECK(max_abs_diff(out, state) <= 1e-3);
      CHECK(a_new == a);
    }
  }
  // Accurate mode re-encodes each row; a null edit leaves every row in place.
  {
    const EditRequest null_req{t.at("gender"), {{0, a[0]}}, EditMode::accurate, PipelineVariant::v1};
    CHECK(max_abs_diff(apply_edit(m, state, a, null_req, opts).first, state) <= 1e-3);
  }

  SUBCASE("V2 leaves rows outside the range bit-identical") {
    for (const auto mode : {EditMode::fast, EditMode::accurate}) {
      const EditRequest req{t.at("light"), {{1, 0.8}}, mode, PipelineVariant::v2};
      const auto [out, a_new] = apply_edit(m, state, a, req, opts);
      for (std::size_t r = 0; r < 18; ++r) {
        if (r >= 7 && r <= 11) continue;
        const auto x = out.rows.row(r), y = state.rows.row(r);
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
      }
      CHECK(a_new == Vector{0.3, 0.8});
    }
  }
  SUBCASE("V2 changes fewer rows than V1") {
    for (const auto& kind : t.kinds()) {
      const EditRequest v1{kind, {{0, 1.2}}, EditMode::accurate, PipelineVariant::v1};
      EditRequest v2 = v1;
      v2.variant = PipelineVariant::v2;
      CHECK(changed_rows(apply_edit(m, state, a, v2, opts).first, state) <
            changed_rows(apply_edit(m, state, a, v1, opts).first, state));
    }
  }
  SUBCASE("fast mode caches the encoding") {
    const ExtendedLatent uniform = ExtendedLatent::broadcast(Vector{0.1, 0.2, 0.3, 0.4}, 18);
    EditSession sess{uniform, a, std::nullopt};
    const EditRequest first{t.at("yaw"), {{0, 0.9}}, EditMode::fast, PipelineVariant::v2};
    sess = apply_edit(m, sess, first, opts);
    REQUIRE(sess.z0.has_value());
    const std::vector<Vector> cached = *sess.z0;
    CHECK(cached.size() == 18);
    const EditRequest second{t.at("light"), {{1, 0.5}}, EditMode::fast, PipelineVariant::v2};
    sess = apply_edit(m, sess, second, opts);
    CHECK(*sess.z0 == cached);
    const auto r8 = sess.state.rows.row(8);
    CHECK(Vector(r8.begin(), r8.end()) == cfe(m, cached[8], Vector{0.9, 0.5}, opts.solver));
  }
  SUBCASE("accurate mode is idempotent") {
    const EditRequest req{t.at("expression"), {{0, -0.7}}, EditMode::accurate, PipelineVariant::v2};
    const auto once = apply_edit(m, state, a, req, opts);
    const auto twice = apply_edit(m, once.first, once.second, req, opts);
    CHECK(max_abs_diff(once.first, twice.first) <= 1e-2);
  }
  SUBCASE("measured bookkeeping") {
    EditOptions measured = opts;
    measured.measure = [](std::span<const double> code) { return Vector{code[0], code[1]}; };
    const EditRequest req{t.at("yaw"), {{0, 0.9}}, EditMode::accurate, PipelineVariant::v2};
    const auto [out, a_new] = apply_edit(m, state, a, req, measured);
    const Vector r = readout(out);
    CHECK(a_new == Vector{r[0], r[1]});
  }
  SUBCASE("unknown channel") {
    const EditRequest req{t.at("yaw"), {{5, 0.9}}, EditMode::accurate, PipelineVariant::v2};
    CHECK_THROWS_AS(apply_edit(m, state, a, req, opts), ConfigError);
  }
}

TEST_CASE("attribute interpolation") {
  const FlowModel m = random_model(3, 1, 3, 31);
  SolverConfig cfg;
  const Vector z0{0.2, -0.5, 0.4};
  const Vector a0{-0.5}, a1{0.7};
  const auto two = interpolate_attribute(m, z0, a0, a1, 2, cfg);
  CHECK(two[0] == cfe(m, z0, a0, cfg));
  CHECK(two[1] == cfe(m, z0, a1, cfg));
  const auto flat = interpolate_attribute(m, z0, a0, a0, 5, cfg);
  for (const auto& p : flat) CHECK(p == flat[0]);
  CHECK_THROWS_AS(interpolate_attribute(m, z0, a0, a1, 1, cfg), ConfigError);

  // No jumps: the largest step shrinks roughly like 1/steps.
  auto max_step = [&](std::size_t steps) {
    const auto path = interpolate_attribute(m, z0, a0, a1, steps, cfg, 2);
    double best = 0;
    for (std::size_t i = 1; i < path.size(); ++i) {
      double d = 0;
      for (std::size_t k = 0; k < 3; ++k) d += (path[i][k] - path[i - 1][k]) * (path[i][k] - path[i - 1][k]);
      best = std::max(best, std::sqrt(d));
    }
    return best;
  };
  const double s20 = max_step(20), s40 = max_step(40);
  CHECK(s40 < 0.75 * s20);
  CHECK(s20 * 19 < 10.0);
}
