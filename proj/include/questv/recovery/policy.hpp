#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "questv/errors.hpp"

namespace questv::recovery {

enum class Mode : std::uint8_t { local, remote, halt, reboot };
enum class TargetSelection : std::uint8_t { random, round_robin, least_loaded };

constexpr std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::local: return "local";
    case Mode::remote: return "remote";
    case Mode::halt: return "halt";
    case Mode::reboot: return "reboot";
  }
  return "?";
}

constexpr std::string_view to_string(TargetSelection t) {
  switch (t) {
    case TargetSelection::random: return "random";
    case TargetSelection::round_robin: return "round-robin";
    case TargetSelection::least_loaded: return "least-loaded";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "local") return Mode::local;
  if (s == "remote") return Mode::remote;
  if (s == "halt") return Mode::halt;
  if (s == "reboot") return Mode::reboot;
  throw ConfigError("unknown recovery mode '" + std::string(s) + "'");
}

inline TargetSelection parse_selection(std::string_view s) {
  if (s == "random") return TargetSelection::random;
  if (s == "round-robin") return TargetSelection::round_robin;
  if (s == "least-loaded") return TargetSelection::least_loaded;
  throw ConfigError("unknown target selection '" + std::string(s) + "'");
}

struct RecoveryPolicy {
  Mode mode = Mode::local;
  TargetSelection target_selection = TargetSelection::round_robin;
  bool diversity = false;
  // The remote target may reprogram the I/O APIC itself; otherwise its
  // monitor does the redirection.
  bool grant_redirect = true;

  bool operator==(const RecoveryPolicy&) const = default;
};

}  // namespace questv::recovery
