#pragma once
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "tensor.hpp"

namespace pncnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<std::uint8_t, 8> kCheckpointMagic = {'P', 'N', 'C', 'K',
                                                                 'P', 'T', '0', '\n'};

namespace detail {

constexpr std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> t{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static constexpr std::array<std::uint32_t, 256> table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

struct ByteWriter {
  std::vector<std::uint8_t> buf;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
};

struct ByteReader {
  const std::uint8_t* p;
  std::size_t left;

  void need(std::size_t n) const {
    if (left < n) throw CorruptPayload("checkpoint ends early");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
};

struct Record {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

inline void put_record(ByteWriter& w, const std::string& name, const Record& r) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  for (char c : name) w.buf.push_back(static_cast<std::uint8_t>(c));
  w.u32(static_cast<std::uint32_t>(r.shape.size()));
  std::size_t n = 1;
  for (std::size_t d : r.shape) {
    w.u64(d);
    n *= d;
  }
  if (n != r.data.size()) throw ShapeMismatch("checkpoint record shape/payload mismatch");
  for (double v : r.data) w.f64(v);
}

inline Record tensor_record(const Tensor& t) {
  Record r;
  r.shape.assign(t.shape().begin(), t.shape().end());
  r.data.assign(t.data(), t.data() + t.numel());
  return r;
}

inline Record scalar_record(double v) { return Record{{1}, {v}}; }

inline Record u64_record(std::uint64_t v) {
  return Record{{1}, {std::bit_cast<double>(v)}};
}

struct RecordMap {
  std::map<std::string, Record> recs;

  const Record& get(const std::string& name) const {
    auto it = recs.find(name);
    if (it == recs.end()) throw CorruptPayload("checkpoint missing record: " + name);
    return it->second;
  }
  Tensor tensor(const std::string& name) const {
    const Record& r = get(name);
    Tensor t{r.shape};
    std::copy(r.data.begin(), r.data.end(), t.data());
    return t;
  }
  double scalar(const std::string& name) const {
    const Record& r = get(name);
    if (r.data.size() != 1) throw CorruptPayload("checkpoint record is not scalar: " + name);
    return r.data[0];
  }
  std::uint64_t u64(const std::string& name) const {
    return std::bit_cast<std::uint64_t>(scalar(name));
  }
};

}  // namespace detail

struct Checkpoint {
  ModelParams model;
  AdamState opt;
  std::uint64_t rng_state = 0;
  std::uint64_t epoch = 0;
  std::uint64_t config_hash = 0;
};

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  using detail::Record;
  detail::ByteWriter w;
  w.buf.assign(kCheckpointMagic.begin(), kCheckpointMagic.end());
  w.u32(kCheckpointVersion);

  std::vector<std::pair<std::string, Record>> recs;
  const ModelParams& m = c.model;
  recs.emplace_back("meta",
                    Record{{6},
                           {static_cast<double>(m.hyper_in.d),
                            static_cast<double>(m.blocks.size()), m.lambda,
                            static_cast<double>(m.probes), m.box_head ? 1.0 : 0.0,
                            static_cast<double>(c.epoch)}});
  recs.emplace_back("config_hash", detail::u64_record(c.config_hash));
  recs.emplace_back("rng_state", detail::u64_record(c.rng_state));
  recs.emplace_back("hyper_in", Record{{3},
                                       {m.hyper_in.log_a, m.hyper_in.log_l,
                                        static_cast<double>(m.hyper_in.d)}});
  recs.emplace_back("log_noise", detail::tensor_record(m.log_noise));
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const BlockParams& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i);
    recs.emplace_back(p + ".w", detail::tensor_record(b.op.W));
    recs.emplace_back(p + ".beta", detail::tensor_record(b.op.beta));
    recs.emplace_back(p + ".sigma_chol", detail::tensor_record(b.op.sigma_chol));
    recs.emplace_back(p + ".bias", detail::tensor_record(b.op.bias));
    recs.emplace_back(p + ".t", detail::scalar_record(b.op.t));
    recs.emplace_back(p + ".mix", detail::tensor_record(b.mix));
    recs.emplace_back(p + ".hyper", Record{{3},
                                           {b.hyper.log_a, b.hyper.log_l,
                                            static_cast<double>(b.hyper.d)}});
  }
  recs.emplace_back("head_w", detail::tensor_record(m.head_w));
  recs.emplace_back("head_b", detail::tensor_record(m.head_b));
  recs.emplace_back("adam_step", detail::u64_record(static_cast<std::uint64_t>(c.opt.step)));
  recs.emplace_back("adam_m", Record{{c.opt.m.size()}, c.opt.m});
  recs.emplace_back("adam_v", Record{{c.opt.v.size()}, c.opt.v});

  w.u32(static_cast<std::uint32_t>(recs.size()));
  for (const auto& [name, rec] : recs) detail::put_record(w, name, rec);
  w.u32(detail::crc32(w.buf.data(), w.buf.size()));
  return w.buf;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8)
    throw CorruptPayload("checkpoint ends early");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw CorruptPayload("not a checkpoint file");
  std::uint32_t trailer = 0;
  for (int i = 0; i < 4; ++i)
    trailer |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (detail::crc32(bytes.data(), bytes.size() - 4) != trailer)
    throw CorruptPayload("checkpoint crc mismatch");

  detail::ByteReader r{bytes.data() + kCheckpointMagic.size(),
                       bytes.size() - kCheckpointMagic.size() - 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version));

  detail::RecordMap rm;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    r.need(name_len);
    std::string name(reinterpret_cast<const char*>(r.p), name_len);
    r.p += name_len;
    r.left -= name_len;
    detail::Record rec;
    const std::uint32_t rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.shape.push_back(static_cast<std::size_t>(r.u64()));
      n *= rec.shape.back();
    }
    rec.data.reserve(n);
    for (std::size_t k = 0; k < n; ++k) rec.data.push_back(r.f64());
    rm.recs.emplace(std::move(name), std::move(rec));
  }
  if (r.left != 0) throw CorruptPayload("checkpoint has trailing bytes");

  const detail::Record& meta = rm.get("meta");
  if (meta.data.size() != 6) throw CorruptPayload("checkpoint meta record malformed");
  const auto n_blocks = static_cast<std::size_t>(meta.data[1]);

  Checkpoint c;
  c.epoch = static_cast<std::uint64_t>(meta.data[5]);
  c.config_hash = rm.u64("config_hash");
  c.rng_state = rm.u64("rng_state");

  ModelParams& m = c.model;
  m.lambda = meta.data[2];
  m.probes = static_cast<std::size_t>(meta.data[3]);
  m.box_head = meta.data[4] != 0.0;
  const detail::Record& hin = rm.get("hyper_in");
  if (hin.data.size() != 3) throw CorruptPayload("checkpoint hyper record malformed");
  m.hyper_in = RbfHyper{hin.data[0], hin.data[1], static_cast<std::size_t>(hin.data[2])};
  m.log_noise = rm.tensor("log_noise");
  m.blocks.resize(n_blocks);
  for (std::size_t i = 0; i < n_blocks; ++i) {
    BlockParams& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i);
    b.op.W = rm.tensor(p + ".w");
    b.op.beta = rm.tensor(p + ".beta");
    b.op.sigma_chol = rm.tensor(p + ".sigma_chol");
    b.op.bias = rm.tensor(p + ".bias");
    b.op.t = rm.scalar(p + ".t");
    b.mix = rm.tensor(p + ".mix");
    const detail::Record& h = rm.get(p + ".hyper");
    if (h.data.size() != 3) throw CorruptPayload("checkpoint hyper record malformed");
    b.hyper = RbfHyper{h.data[0], h.data[1], static_cast<std::size_t>(h.data[2])};
  }
  m.head_w = rm.tensor("head_w");
  m.head_b = rm.tensor("head_b");
  c.opt.step = static_cast<std::int64_t>(rm.u64("adam_step"));
  c.opt.m = rm.get("adam_m").data;
  c.opt.v = rm.get("adam_v").data;
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace pncnn
