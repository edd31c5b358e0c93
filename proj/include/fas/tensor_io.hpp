// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fas/errors.hpp"
#include "fas/tensor.hpp"

namespace fas {

// Wire format: "SFT1", u32 rank, u32 dims[rank], little-endian f32 payload.
inline constexpr std::array<std::uint8_t, 4> kTensorMagic = {'S', 'F', 'T', '1'};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::size_t encoded_size(const Tensor& t) { return 8 + 4 * t.rank() + 4 * t.size(); }

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  out.reserve(encoded_size(t));
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

/// Decodes one tensor from the front of `in`; `consumed` receives its byte length.
inline Tensor decode_tensor_prefix(std::span<const std::uint8_t> in, std::size_t& consumed) {
  auto need = [&](std::size_t expected) {
    if (in.size() < expected) {
      throw DecodeError("tensor decode: expected " + std::to_string(expected) + " bytes, got " +
                        std::to_string(in.size()));
    }
  };
  need(8);
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), in.begin())) {
    throw DecodeError("tensor decode: bad magic");
  }
  const std::uint32_t rank = detail::get_u32(in, 4);
  need(8 + 4 * static_cast<std::size_t>(rank));
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = detail::get_u32(in, 8 + 4 * i);
  const std::size_t header = 8 + 4 * static_cast<std::size_t>(rank);
  const std::size_t total = header + 4 * shape_numel(shape);
  need(total);
  std::vector<float> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(detail::get_u32(in, header + 4 * i));
  }
  consumed = total;
  return Tensor(std::move(shape), std::move(data));
}

/// Decodes a buffer holding exactly one tensor.
inline Tensor decode_tensor(std::span<const std::uint8_t> in) {
  std::size_t consumed = 0;
  Tensor t = decode_tensor_prefix(in, consumed);
  if (consumed != in.size()) {
    throw DecodeError("tensor decode: expected " + std::to_string(consumed) + " bytes, got " +
                      std::to_string(in.size()));
  }
  return t;
}

/// FNV-1a over the encoded bytes; used to assert that weights stay frozen.
inline std::uint64_t tensor_hash(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::uint8_t b : encode_tensor(t)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fas
