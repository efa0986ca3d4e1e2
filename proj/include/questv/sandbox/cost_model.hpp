#pragma once

#include <cstdint>

#include "questv/sim/time.hpp"

namespace questv::sandbox {

/// Cycle costs of monitor transitions and recovery phases. Defaults are the
/// measured per-phase overheads of NIC driver recovery; `reboot` is a
/// configurable stand-in for a full machine reset (60 s at 2 GHz).
struct CostModel {
  sim::SimTime vm_exit{707};
  sim::SimTime vm_enter{823};
  sim::SimTime driver_switch{12427};
  sim::SimTime ipi_round_trip{1291};
  sim::SimTime driver_reinit{134244605};
  sim::SimTime network_reinit{68750060};
  sim::SimTime reboot{120'000'000'000ULL};

  bool operator==(const CostModel&) const = default;

  /// IPI request leg; the ack leg is the remainder.
  sim::SimTime ipi_request() const { return sim::SimTime{(ipi_round_trip.cycles + 1) / 2}; }
  sim::SimTime ipi_ack() const { return ipi_round_trip - ipi_request(); }
};

}  // namespace questv::sandbox
