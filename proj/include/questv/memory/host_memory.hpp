#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <span>
#include <string>

#include "questv/errors.hpp"
#include "questv/memory/address.hpp"

namespace questv::mem {

/// Sparse host physical memory. Frames are allocated on first write; untouched
/// memory reads as zero.
class HostMemory {
 public:
  explicit HostMemory(std::uint64_t size_bytes) : size_(size_bytes) {
    if (size_bytes == 0 || size_bytes % kPageSize != 0)
      throw AlignmentError("host memory size must be a positive multiple of 4KB");
  }

  std::uint64_t size() const noexcept { return size_; }

  void read(Hpa at, std::span<std::uint8_t> out) const {
    check(at, out.size());
    std::uint64_t addr = at.value;
    std::size_t done = 0;
    while (done < out.size()) {
      const std::uint64_t off = addr % kPageSize;
      const std::size_t n = std::min<std::uint64_t>(kPageSize - off, out.size() - done);
      auto it = frames_.find(addr / kPageSize);
      if (it == frames_.end())
        std::fill_n(out.data() + done, n, std::uint8_t{0});
      else
        std::memcpy(out.data() + done, it->second->data() + off, n);
      done += n;
      addr += n;
    }
  }

  void write(Hpa at, std::span<const std::uint8_t> in) {
    check(at, in.size());
    std::uint64_t addr = at.value;
    std::size_t done = 0;
    while (done < in.size()) {
      const std::uint64_t off = addr % kPageSize;
      const std::size_t n = std::min<std::uint64_t>(kPageSize - off, in.size() - done);
      auto& frame = frames_[addr / kPageSize];
      if (!frame) frame = std::make_unique<Frame>(Frame{});
      std::memcpy(frame->data() + off, in.data() + done, n);
      done += n;
      addr += n;
    }
  }

  void fill(Hpa at, std::uint64_t len, std::uint8_t value) {
    std::array<std::uint8_t, kPageSize> buf;
    buf.fill(value);
    std::uint64_t done = 0;
    while (done < len) {
      const std::uint64_t n = std::min<std::uint64_t>(kPageSize, len - done);
      write(at + done, std::span<const std::uint8_t>(buf.data(), n));
      done += n;
    }
  }

  std::uint8_t read_byte(Hpa at) const {
    std::uint8_t b = 0;
    read(at, std::span<std::uint8_t>(&b, 1));
    return b;
  }

  void write_byte(Hpa at, std::uint8_t b) { write(at, std::span<const std::uint8_t>(&b, 1)); }

  /// FNV-1a over the contents of [begin, begin+len). Untouched and all-zero
  /// frames hash identically, so the value depends only on the bytes.
  std::uint64_t hash_range(Hpa begin, std::uint64_t len) const {
    check(begin, len);
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 1099511628211ULL;
      }
    };
    const std::uint64_t end = begin.value + len;
    auto it = frames_.lower_bound(begin.value / kPageSize);
    for (; it != frames_.end() && it->first * kPageSize < end; ++it) {
      const std::uint64_t frame_base = it->first * kPageSize;
      const std::uint64_t lo = std::max(frame_base, begin.value);
      const std::uint64_t hi = std::min(frame_base + kPageSize, end);
      for (std::uint64_t a = lo; a < hi; ++a) {
        const std::uint8_t b = (*it->second)[a - frame_base];
        if (b != 0) {
          mix(a);
          mix(b);
        }
      }
    }
    return h;
  }

  std::size_t touched_frames() const noexcept { return frames_.size(); }

 private:
  using Frame = std::array<std::uint8_t, kPageSize>;

  void check(Hpa at, std::uint64_t len) const {
    if (at.value > size_ || len > size_ - at.value)
      throw RangeError("host access out of range at " + std::to_string(at.value));
  }

  std::uint64_t size_;
  std::map<std::uint64_t, std::unique_ptr<Frame>> frames_;
};

}  // namespace questv::mem
