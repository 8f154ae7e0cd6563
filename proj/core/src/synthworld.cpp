// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow/synthworld.hpp"

#include <cmath>
#include <istream>
#include <iterator>
#include <numbers>
#include <ostream>

#include "condflow/binary_io.hpp"
#include "condflow/dynamics.hpp"
#include "condflow/errors.hpp"

namespace condflow {

namespace {

constexpr const char* kSemanticNames[] = {"yaw",    "pitch",      "expression",  "gender",
                                          "age",    "eyeglasses", "facial_hair", "baldness"};

// std of softsign(z) for z ~ N(0, 1).
constexpr double kSoftsignStd = 0.4277;
constexpr double kLogisticSpread = 1.5;  // std of the logistic argument at truncation 0.7
constexpr double kLinearSpread = 1.0;

double softsign(double x) { return x / (1.0 + std::abs(x)); }

// Removes the components of v along each (orthonormal) row in `basis`, twice.
void orthogonalize(Vector& v, const std::vector<Vector>& basis) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& b : basis) {
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
  }
}

bool normalize(Vector& v) {
  const double n = norm2(v);
  if (n < 1e-8) return false;
  for (double& x : v) x /= n;
  return true;
}

WorldSpec build_world(std::uint64_t seed, RngStream stream, std::size_t d, std::size_t L) {
  WorldSpec w;
  w.seed = seed;
  w.dim = d;
  w.attr_dim = L;

  std::vector<Vector> ortho;
  while (ortho.size() < d) {
    Vector v = sample_gaussian(stream, d);
    orthogonalize(v, ortho);
    if (normalize(v)) ortho.push_back(std::move(v));
  }
  Vector diag(d);
  for (double& s : diag) s = 0.5 + 1.5 * stream.next_uniform();
  w.mixing = DenseMatrix(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) w.mixing(r, c) = ortho[c][r] * diag[c];

  w.center = sample_gaussian(stream, d);
  for (double& x : w.center) x *= 0.5;

  const std::size_t n_sem = semantic_channels_for(L);
  w.attr_proj = DenseMatrix(L, d);
  for (std::size_t k = 0; k < L; ++k) {
    Vector p = sample_gaussian(stream, d);
    // Scale so that ‖P_k M‖ = 1.
    Vector pm(d, 0.0);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t r = 0; r < d; ++r) pm[c] += p[r] * w.mixing(r, c);
    const double s = norm2(pm);
    for (std::size_t c = 0; c < d; ++c) w.attr_proj(k, c) = p[c] / s;
    const bool semantic = k < n_sem;
    w.links.push_back(semantic ? LinkKind::logistic : LinkKind::linear);
    const double spread = semantic ? kLogisticSpread : kLinearSpread;
    w.link_gain.push_back(spread / (kDefaultTruncation * kSoftsignStd));
    w.link_offset.push_back(0.0);
    w.channel_names.push_back(semantic ? std::string(kSemanticNames[k])
                                       : "light_" + std::to_string(k - n_sem));
  }

  std::vector<Vector> row_basis;
  for (std::size_t k = 0; k < L; ++k) {
    Vector v(w.attr_proj.row(k).begin(), w.attr_proj.row(k).end());
    orthogonalize(v, row_basis);
    if (!normalize(v)) throw ConfigError("make_world: attribute projections are rank deficient");
    row_basis.push_back(std::move(v));
  }
  std::vector<Vector> all = row_basis;
  std::vector<Vector> complement;
  for (std::size_t i = 0; i < d && complement.size() < d - L; ++i) {
    Vector e(d, 0.0);
    e[i] = 1.0;
    orthogonalize(e, all);
    if (normalize(e)) {
      all.push_back(e);
      complement.push_back(std::move(e));
    }
  }
  w.identity_proj = DenseMatrix(complement.size(), d);
  for (std::size_t r = 0; r < complement.size(); ++r)
    for (std::size_t c = 0; c < d; ++c) w.identity_proj(r, c) = complement[r][c];
  return w;
}

}  // namespace

std::size_t semantic_channels_for(std::size_t attr_dim) {
  const std::size_t n = (8 * attr_dim + 16) / 17;  // ceil(8L/17)
  return std::min<std::size_t>({n, 8, attr_dim});
}

std::uint64_t WorldSpec::fingerprint() const {
  ByteWriter bw;
  bw.u64(seed);
  bw.u64(dim);
  bw.u64(attr_dim);
  bw.f64s(mixing.data());
  bw.f64s(center);
  bw.f64s(attr_proj.data());
  for (auto l : links) bw.u8(static_cast<std::uint8_t>(l));
  bw.f64s(link_gain);
  bw.f64s(link_offset);
  bw.f64s(identity_proj.data());
  for (const auto& n : channel_names) bw.str(n);
  return fnv1a64(bw.bytes());
}

std::optional<std::size_t> WorldSpec::channel_index(std::string_view name) const {
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    if (channel_names[i] == name) return i;
  return std::nullopt;
}

std::size_t WorldSpec::semantic_count() const {
  std::size_t n = 0;
  for (auto l : links)
    if (l == LinkKind::logistic) ++n;
  return n;
}

WorldSpec make_world(std::uint64_t seed, std::size_t dim, std::size_t attr_dim) {
  if (attr_dim == 0) throw ConfigError("make_world: attribute dim must be positive");
  if (dim < attr_dim + 2) {
    throw ConfigError("make_world: latent dim " + std::to_string(dim) +
                      " must be at least attribute dim + 2 = " + std::to_string(attr_dim + 2));
  }
  const RngStream root(seed);
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    WorldSpec w = build_world(seed, root.child(attempt), dim, attr_dim);
    // Reject worlds whose channels are (nearly) constant over a pilot sample.
    const SyntheticDataset pilot = gen_dataset(w, 256, seed ^ 0xA5A5A5A5ULL, kDefaultTruncation);
    const Vector sd = attribute_std(pilot.triples);
    bool ok = true;
    for (double s : sd) ok = ok && s > 0.05;
    if (ok) return w;
  }
  throw ConfigError("make_world: could not construct a non-degenerate world");
}

Vector mapping_f(const WorldSpec& world, std::span<const double> z_s, double truncation) {
  if (z_s.size() != world.dim) throw ShapeError("mapping_f: latent length mismatch");
  if (!(truncation > 0.0 && truncation <= 1.0)) {
    throw ConfigError("mapping_f: truncation must lie in (0, 1]");
  }
  Vector s(z_s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = softsign(z_s[i]);
  Vector w = matvec(world.mixing, s);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = world.center[i] + truncation * (w[i] - world.center[i]);
  }
  return w;
}

Vector attribute_fn(const WorldSpec& world, std::span<const double> w) {
  if (w.size() != world.dim) throw ShapeError("attribute_fn: latent length mismatch");
  Vector a = matvec(world.attr_proj, w);
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double arg = world.link_gain[k] * a[k] + world.link_offset[k];
    a[k] = world.links[k] == LinkKind::logistic ? sigmoid(arg) : arg;
  }
  return a;
}

Vector attribute_gradient(const WorldSpec& world, std::span<const double> w, std::size_t k) {
  const double s = dot(world.attr_proj.row(k), w);
  const double arg = world.link_gain[k] * s + world.link_offset[k];
  double deriv = world.link_gain[k];
  if (world.links[k] == LinkKind::logistic) {
    const double sg = sigmoid(arg);
    deriv *= sg * (1.0 - sg);
  }
  Vector g(world.attr_proj.row(k).begin(), world.attr_proj.row(k).end());
  for (double& x : g) x *= deriv;
  return g;
}

Vector identity_embed(const WorldSpec& world, std::span<const double> w) {
  if (w.size() != world.dim) throw ShapeError("identity_embed: latent length mismatch");
  return matvec(world.identity_proj, w);
}

SyntheticDataset gen_dataset(const WorldSpec& world, std::size_t n, std::uint64_t seed,
                             double truncation) {
  if (n == 0) throw ConfigError("gen_dataset: n must be positive");
  SyntheticDataset ds;
  ds.world_fingerprint = world.fingerprint();
  ds.dim = world.dim;
  ds.attr_dim = world.attr_dim;
  ds.triples.reserve(n);
  RngStream stream(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector z = sample_gaussian(stream, world.dim);
    Vector w = mapping_f(world, z, truncation);
    Vector a = attribute_fn(world, w);
    ds.triples.push_back(TrainingTriple{std::move(w), std::move(a)});
  }
  return ds;
}

std::vector<TrainingTriple> select_channels(std::span<const TrainingTriple> data,
                                            std::span<const std::size_t> channels) {
  std::vector<TrainingTriple> out;
  out.reserve(data.size());
  for (const auto& t : data) out.push_back(TrainingTriple{t.w, select_channels(t.a, channels)});
  return out;
}

Vector select_channels(std::span<const double> attrs, std::span<const std::size_t> channels) {
  Vector out;
  out.reserve(channels.size());
  for (std::size_t c : channels) {
    if (c >= attrs.size()) throw ShapeError("select_channels: channel index out of range");
    out.push_back(attrs[c]);
  }
  return out;
}

Vector attribute_std(std::span<const TrainingTriple> data) {
  if (data.empty()) return {};
  const std::size_t L = data.front().a.size();
  const double n = static_cast<double>(data.size());
  Vector sd(L);
  for (std::size_t k = 0; k < L; ++k) {
    double mean = 0.0;
    for (const auto& t : data) mean += t.a[k];
    mean /= n;
    double var = 0.0;
    for (const auto& t : data) var += (t.a[k] - mean) * (t.a[k] - mean);
    sd[k] = std::sqrt(var / n);
  }
  return sd;
}

namespace {
constexpr std::uint8_t kDatasetMagic[4] = {'C', 'F', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void write_dataset(std::ostream& out, const SyntheticDataset& data) {
  ByteWriter bw;
  bw.raw(kDatasetMagic);
  bw.u32(kDatasetVersion);
  bw.u64(data.world_fingerprint);
  bw.u32(static_cast<std::uint32_t>(data.dim));
  bw.u32(static_cast<std::uint32_t>(data.attr_dim));
  bw.u64(data.triples.size());
  for (const auto& t : data.triples) {
    if (t.w.size() != data.dim || t.a.size() != data.attr_dim) {
      throw ShapeError("write_dataset: triple dims differ from header");
    }
    bw.f64s(t.w);
    bw.f64s(t.a);
  }
  bw.u32(crc32(bw.bytes()));
  const auto& bytes = bw.bytes();
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write_dataset: write failed");
}

SyntheticDataset read_dataset(std::istream& in) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + 4 + 8 + 4 + 4 + 8 + 4) throw IntegrityError("dataset: file too short");
  const std::span<const std::uint8_t> all(bytes);
  ByteReader r(all);
  auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kDatasetMagic))) {
    throw IntegrityError("dataset: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw IntegrityError("dataset: unsupported version " + std::to_string(version));
  }
  SyntheticDataset ds;
  ds.world_fingerprint = r.u64();
  ds.dim = r.u32();
  ds.attr_dim = r.u32();
  const std::uint64_t count = r.u64();
  const std::uint64_t record = 8ULL * (ds.dim + ds.attr_dim);
  if (record != 0 && count > (r.remaining() - 4) / record) {
    throw IntegrityError("dataset: truncated record stream");
  }
  if (r.remaining() != count * record + 4) throw IntegrityError("dataset: size mismatch");
  const std::uint32_t stored = [&] {
    ByteReader tail(all.subspan(all.size() - 4));
    return tail.u32();
  }();
  if (crc32(all.first(all.size() - 4)) != stored) throw IntegrityError("dataset: CRC mismatch");
  ds.triples.resize(count);
  for (auto& t : ds.triples) {
    t.w.resize(ds.dim);
    t.a.resize(ds.attr_dim);
    r.f64s(t.w);
    r.f64s(t.a);
  }
  return ds;
}

Vector ToyConditionalGaussian::conditional_mean(double a) const {
  return {slope * a, curvature * (a * a - 1.0)};
}

double ToyConditionalGaussian::log_density(std::span<const double> w, double a) const {
  const Vector mu = conditional_mean(a);
  const double r1 = (w[0] - mu[0]) / sigma1;
  const double r2 = (w[1] - mu[1]) / sigma2;
  return -std::log(2.0 * std::numbers::pi * sigma1 * sigma2) - 0.5 * (r1 * r1 + r2 * r2);
}

double ToyConditionalGaussian::conditional_entropy() const {
  return 1.0 + std::log(2.0 * std::numbers::pi * sigma1 * sigma2);
}

Vector ToyConditionalGaussian::sample_conditional(double a, RngStream& stream) const {
  const Vector mu = conditional_mean(a);
  const Vector e = sample_gaussian(stream, 2);
  return {mu[0] + sigma1 * e[0], mu[1] + sigma2 * e[1]};
}

std::vector<TrainingTriple> ToyConditionalGaussian::sample(std::size_t n,
                                                           RngStream& stream) const {
  std::vector<TrainingTriple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = sample_gaussian(stream, 1)[0];
    out.push_back(TrainingTriple{sample_conditional(a, stream), Vector{a}});
  }
  return out;
}

}  // namespace condflow
