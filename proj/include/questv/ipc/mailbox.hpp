#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "questv/errors.hpp"

namespace questv::ipc {

/// Wire layout of one 4096-byte mailbox:
///   [0]      status (0 empty, 1 full)
///   [1..5)   payload length, little endian
///   [5..9)   sequence number, little endian
///   [9..)    payload, at most 4087 bytes
namespace mailbox {

inline constexpr std::size_t kSize = 4096;
inline constexpr std::size_t kStatusOffset = 0;
inline constexpr std::size_t kLengthOffset = 1;
inline constexpr std::size_t kSeqOffset = 5;
inline constexpr std::size_t kPayloadOffset = 9;
inline constexpr std::size_t kMaxPayload = kSize - kPayloadOffset;
inline constexpr std::uint8_t kEmpty = 0;
inline constexpr std::uint8_t kFull = 1;

struct Header {
  std::uint8_t status = kEmpty;
  std::uint32_t length = 0;
  std::uint32_t seq = 0;

  bool operator==(const Header&) const = default;
  bool valid() const { return (status == kEmpty || status == kFull) && length <= kMaxPayload; }
};

inline void put_le32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint32_t get_le32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::array<std::uint8_t, kPayloadOffset> encode_header(const Header& h) {
  std::array<std::uint8_t, kPayloadOffset> out{};
  out[kStatusOffset] = h.status;
  put_le32(out.data() + kLengthOffset, h.length);
  put_le32(out.data() + kSeqOffset, h.seq);
  return out;
}

inline Header decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPayloadOffset) throw RangeError("mailbox header needs 9 bytes");
  return Header{bytes[kStatusOffset], get_le32(bytes.data() + kLengthOffset), get_le32(bytes.data() + kSeqOffset)};
}

/// A full-size chunk means the message continues; a short chunk (possibly
/// empty) ends it. An n-byte message therefore takes floor(n / 4087) + 1
/// chunks.
inline std::size_t chunk_count(std::size_t n) { return n / kMaxPayload + 1; }

inline std::vector<std::span<const std::uint8_t>> split(std::span<const std::uint8_t> msg) {
  std::vector<std::span<const std::uint8_t>> out;
  const std::size_t n = chunk_count(msg.size());
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * kMaxPayload;
    out.push_back(msg.subspan(off, std::min(kMaxPayload, msg.size() - off)));
  }
  return out;
}

inline bool is_last_chunk(std::size_t length) { return length < kMaxPayload; }

}  // namespace mailbox

/// FNV-1a over a byte string; used to check payload integrity from traces.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace questv::ipc
