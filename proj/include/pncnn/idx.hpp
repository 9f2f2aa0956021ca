#pragma once
#include <cstddef>
#include <cstdint>
#include <vector>

#include "errors.hpp"

namespace pncnn {

// IDX container: u8 payload, 3-d images (0x00000803) or 1-d labels (0x00000801)
struct IdxData {
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> data;  // row-major
};

namespace detail {

inline std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

}  // namespace detail

inline IdxData parse_idx(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw TruncatedPayload("idx: missing magic");
  const std::uint32_t magic = detail::read_be32(bytes.data());
  if (magic != 0x00000803u && magic != 0x00000801u) throw BadMagic("idx: unknown magic");
  const std::size_t ndims = magic & 0xffu;
  if (bytes.size() < 4 + 4 * ndims) throw TruncatedPayload("idx: missing dimension sizes");
  IdxData out;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    const std::size_t dim = detail::read_be32(bytes.data() + 4 + 4 * i);
    out.shape.push_back(dim);
    total *= dim;
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header + total) throw TruncatedPayload("idx: payload ends early");
  out.data.assign(bytes.begin() + header, bytes.begin() + header + total);
  return out;
}

inline std::vector<std::uint8_t> write_idx(const IdxData& d) {
  if (d.shape.size() != 1 && d.shape.size() != 3)
    throw ShapeMismatch("idx holds 1-d labels or 3-d images");
  std::size_t total = 1;
  for (std::size_t s : d.shape) total *= s;
  if (d.data.size() != total) throw ShapeMismatch("idx payload does not match shape");
  std::vector<std::uint8_t> out;
  detail::write_be32(out, d.shape.size() == 1 ? 0x00000801u : 0x00000803u);
  for (std::size_t s : d.shape) detail::write_be32(out, std::uint32_t(s));
  out.insert(out.end(), d.data.begin(), d.data.end());
  return out;
}

}  // namespace pncnn
