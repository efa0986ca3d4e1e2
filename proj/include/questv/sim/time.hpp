#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <string>

#include "questv/errors.hpp"

namespace questv::sim {

/// A point or span on the virtual clock, counted in CPU cycles.
struct SimTime {
  std::uint64_t cycles = 0;

  constexpr auto operator<=>(const SimTime&) const = default;

  constexpr SimTime& operator+=(SimTime rhs) {
    cycles += rhs.cycles;
    return *this;
  }
  constexpr SimTime& operator-=(SimTime rhs) {
    cycles -= rhs.cycles;
    return *this;
  }
  static constexpr SimTime max() { return SimTime{std::numeric_limits<std::uint64_t>::max()}; }
};

constexpr SimTime operator+(SimTime a, SimTime b) { return SimTime{a.cycles + b.cycles}; }
constexpr SimTime operator-(SimTime a, SimTime b) { return SimTime{a.cycles - b.cycles}; }
constexpr SimTime operator*(SimTime a, std::uint64_t k) { return SimTime{a.cycles * k}; }
constexpr SimTime cycles(std::uint64_t n) { return SimTime{n}; }

inline std::string to_string(SimTime t) { return std::to_string(t.cycles); }

struct SimConfig {
  std::uint64_t cycles_per_second = 2'000'000'000;
  std::uint64_t seed = 1;
  SimTime horizon{600ULL * 2'000'000'000ULL};

  bool operator==(const SimConfig&) const = default;

  void validate() const {
    if (cycles_per_second == 0) throw ConfigError("cycles_per_second must be > 0");
    if (horizon.cycles == 0) throw ConfigError("horizon must be > 0");
  }
};

/// round(ms * cycles_per_second / 1000). Throws OverflowError when the result
/// does not fit in 64 bits.
inline SimTime cycles_from_millis(double ms, const SimConfig& cfg) {
  if (!(ms >= 0.0)) throw RangeError("milliseconds must be non-negative");
  const long double exact =
      static_cast<long double>(ms) * static_cast<long double>(cfg.cycles_per_second) / 1000.0L;
  const long double rounded = std::round(exact);
  if (rounded >= 18446744073709551616.0L) throw OverflowError("cycle count overflows 64 bits");
  return SimTime{static_cast<std::uint64_t>(rounded)};
}

inline double millis_from_cycles(SimTime t, const SimConfig& cfg) {
  return static_cast<double>(t.cycles) * 1000.0 / static_cast<double>(cfg.cycles_per_second);
}

}  // namespace questv::sim
