#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace questv {

using SandboxId = std::uint32_t;

namespace mem {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kPageShift = 12;
inline constexpr std::uint64_t kGpaLimit = 1ULL << 48;

struct Gpa {
  std::uint64_t value = 0;
  constexpr auto operator<=>(const Gpa&) const = default;
  constexpr Gpa operator+(std::uint64_t off) const { return Gpa{value + off}; }
  constexpr bool page_aligned() const { return (value & (kPageSize - 1)) == 0; }
  constexpr std::uint64_t page() const { return value >> kPageShift; }
};

struct Hpa {
  std::uint64_t value = 0;
  constexpr auto operator<=>(const Hpa&) const = default;
  constexpr Hpa operator+(std::uint64_t off) const { return Hpa{value + off}; }
  constexpr bool page_aligned() const { return (value & (kPageSize - 1)) == 0; }
  constexpr std::uint64_t page() const { return value >> kPageShift; }
};

enum class AccessKind : std::uint8_t { read, write, execute };

constexpr std::string_view to_string(AccessKind k) {
  switch (k) {
    case AccessKind::read: return "read";
    case AccessKind::write: return "write";
    case AccessKind::execute: return "execute";
  }
  return "?";
}

struct Permissions {
  bool read = false;
  bool write = false;
  bool execute = false;

  constexpr bool operator==(const Permissions&) const = default;

  constexpr std::uint8_t bits() const {
    return static_cast<std::uint8_t>((read ? 1 : 0) | (write ? 2 : 0) | (execute ? 4 : 0));
  }
  static constexpr Permissions from_bits(std::uint8_t b) {
    return Permissions{(b & 1) != 0, (b & 2) != 0, (b & 4) != 0};
  }
  constexpr bool none() const { return bits() == 0; }

  constexpr bool allows(AccessKind k) const {
    switch (k) {
      case AccessKind::read: return read;
      case AccessKind::write: return write;
      case AccessKind::execute: return execute;
    }
    return false;
  }

  static constexpr Permissions r() { return {true, false, false}; }
  static constexpr Permissions rw() { return {true, true, false}; }
  static constexpr Permissions rx() { return {true, false, true}; }
  static constexpr Permissions rwx() { return {true, true, true}; }

  std::string str() const {
    std::string s = "---";
    if (read) s[0] = 'r';
    if (write) s[1] = 'w';
    if (execute) s[2] = 'x';
    return s;
  }
};

/// Half-open address interval [begin, begin + length).
struct Range {
  std::uint64_t begin = 0;
  std::uint64_t length = 0;

  constexpr bool operator==(const Range&) const = default;
  constexpr std::uint64_t end() const { return begin + length; }
  constexpr bool contains(std::uint64_t a) const { return a >= begin && a < end(); }
  constexpr bool contains(const Range& r) const { return r.begin >= begin && r.end() <= end(); }
  constexpr bool overlaps(const Range& r) const { return begin < r.end() && r.begin < end(); }
  constexpr std::uint64_t pages() const { return length / kPageSize; }
};

}  // namespace mem
}  // namespace questv
