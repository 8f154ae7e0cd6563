// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow_cli/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "condflow/binary_io.hpp"
#include "condflow/errors.hpp"

namespace condflow::cli {

namespace {

constexpr std::array<std::uint8_t, 8> kMagic = {'C', 'F', 'C', 'K', 'P', 'T', 0, 1};

using Tag = std::array<char, 4>;

void section(ByteWriter& out, const char (&tag)[5], const ByteWriter& payload) {
  ByteWriter framed;
  framed.raw(std::span(reinterpret_cast<const std::uint8_t*>(tag), 4));
  framed.u64(payload.bytes().size());
  framed.raw(payload.bytes());
  out.raw(framed.bytes());
  out.u32(crc32(framed.bytes()));
}

void put_vector(ByteWriter& w, std::span<const double> v) {
  w.u64(v.size());
  w.f64s(v);
}

Vector get_vector(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 8) throw IntegrityError("checkpoint: vector length exceeds section");
  Vector v(n);
  r.f64s(v);
  return v;
}

void put_norm(ByteWriter& w, const MovingNormParams& n) {
  put_vector(w, n.running_mean);
  put_vector(w, n.running_var);
  w.f64(n.momentum);
  w.f64(n.eps);
}

void get_norm(ByteReader& r, MovingNormParams& n) {
  n.running_mean = get_vector(r);
  n.running_var = get_vector(r);
  n.momentum = r.f64();
  n.eps = r.f64();
}

void expect_consumed(const ByteReader& r, const char* tag) {
  if (r.remaining() != 0) throw IntegrityError(std::string("checkpoint: trailing bytes in section ") + tag);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const FlowModel& m = c.model;
  m.validate();
  ByteWriter out;
  out.raw(kMagic);
  out.u32(kCheckpointVersion);

  ByteWriter head;
  head.u64(c.world_seed);
  head.u64(c.world_fingerprint);
  head.u32(static_cast<std::uint32_t>(m.latent_dim));
  head.u32(static_cast<std::uint32_t>(m.attr_dim));
  head.u32(static_cast<std::uint32_t>(c.world_attr_dim));
  head.u32(static_cast<std::uint32_t>(m.blocks.size()));
  head.u8(m.tanh_on_last ? 1 : 0);
  head.u32(static_cast<std::uint32_t>(m.channels.size()));
  for (std::size_t ch : m.channels) head.u32(static_cast<std::uint32_t>(ch));
  section(out, "HEAD", head);

  ByteWriter parm;
  put_vector(parm, m.parameters());
  section(out, "PARM", parm);

  ByteWriter norm;
  put_norm(norm, m.pre_norm);
  put_norm(norm, m.post_norm);
  section(out, "NORM", norm);

  ByteWriter scal;
  put_vector(scal, m.scaler.mean);
  put_vector(scal, m.scaler.scale);
  section(out, "SCAL", scal);

  ByteWriter dsta;
  put_vector(dsta, c.world_std);
  section(out, "DSTA", dsta);

  ByteWriter tcfg;
  tcfg.str(c.config_echo);
  section(out, "TCFG", tcfg);

  ByteWriter loss;
  put_vector(loss, c.loss_curve);
  section(out, "LOSS", loss);

  section(out, "END_", ByteWriter{});
  return out.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(kMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw IntegrityError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IntegrityError("checkpoint: unsupported format version " + std::to_string(version));
  }

  std::map<std::string, std::span<const std::uint8_t>> sections;
  std::vector<std::string> order;
  while (true) {
    const std::size_t start = r.position();
    const auto tag_bytes = r.take(4);
    const std::string tag(tag_bytes.begin(), tag_bytes.end());
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw IntegrityError("checkpoint: section " + tag + " is truncated");
    const auto payload = r.take(len);
    const auto framed = bytes.subspan(start, r.position() - start);
    if (crc32(framed) != r.u32()) throw IntegrityError("checkpoint: CRC mismatch in section " + tag);
    if (tag == "END_") break;
    if (!sections.emplace(tag, payload).second) throw IntegrityError("checkpoint: duplicate section " + tag);
    order.push_back(tag);
  }
  if (r.remaining() != 0) throw IntegrityError("checkpoint: bytes after END_ section");
  const std::vector<std::string> expected = {"HEAD", "PARM", "NORM", "SCAL", "DSTA", "TCFG", "LOSS"};
  if (order != expected) throw IntegrityError("checkpoint: unexpected section layout");

  Checkpoint c;
  {
    ByteReader h(sections["HEAD"]);
    c.world_seed = h.u64();
    c.world_fingerprint = h.u64();
    const std::size_t d = h.u32();
    const std::size_t L = h.u32();
    c.world_attr_dim = h.u32();
    const std::size_t blocks = h.u32();
    if (d == 0 || L == 0 || blocks == 0) throw IntegrityError("checkpoint: zero model dimension");
    c.model = FlowModel::identity(d, L, blocks);
    c.model.tanh_on_last = h.u8() != 0;
    const std::uint32_t nch = h.u32();
    c.model.channels.clear();
    for (std::uint32_t i = 0; i < nch; ++i) c.model.channels.push_back(h.u32());
    expect_consumed(h, "HEAD");
  }
  {
    ByteReader p(sections["PARM"]);
    const Vector theta = get_vector(p);
    if (theta.size() != c.model.param_count()) throw IntegrityError("checkpoint: parameter count mismatch");
    c.model.set_parameters(theta);
    expect_consumed(p, "PARM");
  }
  {
    ByteReader n(sections["NORM"]);
    get_norm(n, c.model.pre_norm);
    get_norm(n, c.model.post_norm);
    expect_consumed(n, "NORM");
  }
  {
    ByteReader s(sections["SCAL"]);
    c.model.scaler.mean = get_vector(s);
    c.model.scaler.scale = get_vector(s);
    expect_consumed(s, "SCAL");
  }
  {
    ByteReader s(sections["DSTA"]);
    c.world_std = get_vector(s);
    expect_consumed(s, "DSTA");
  }
  {
    ByteReader s(sections["TCFG"]);
    c.config_echo = s.str();
    expect_consumed(s, "TCFG");
  }
  {
    ByteReader s(sections["LOSS"]);
    c.loss_curve = get_vector(s);
    expect_consumed(s, "LOSS");
  }
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw IntegrityError(std::string("checkpoint: inconsistent model: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace condflow::cli
