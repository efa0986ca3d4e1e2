#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "questv/sim/time.hpp"

namespace questv::sched {

using VcpuId = std::uint32_t;
/// Lower value means higher priority.
using Priority = std::uint32_t;

inline constexpr Priority kBackgroundFloor = std::numeric_limits<Priority>::max();

enum class Band : std::uint8_t { foreground, background };

struct RmsInput {
  VcpuId id = 0;
  sim::SimTime period;
};

/// Rate-monotonic priorities: shorter period gets a smaller number, equal
/// periods are ordered by ascending id. Result is aligned with `vcpus` and is
/// a permutation of 0..n-1.
inline std::vector<Priority> rms_assign(std::span<const RmsInput> vcpus) {
  std::vector<std::size_t> order(vcpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (vcpus[a].period != vcpus[b].period) return vcpus[a].period < vcpus[b].period;
    return vcpus[a].id < vcpus[b].id;
  });
  std::vector<Priority> prio(vcpus.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) prio[order[rank]] = static_cast<Priority>(rank);
  return prio;
}

struct AdmissionReport {
  bool accepted = true;
  double total_utilization = 0.0;
  double bound = 1.0;
  std::size_t n = 0;
};

/// Liu-Layland bound n(2^(1/n) - 1).
inline double liu_layland_bound(std::size_t n) {
  if (n == 0) return 1.0;
  const double nd = static_cast<double>(n);
  return nd * (std::pow(2.0, 1.0 / nd) - 1.0);
}

inline AdmissionReport admit(std::span<const double> utilizations) {
  AdmissionReport r;
  r.n = utilizations.size();
  r.total_utilization = std::accumulate(utilizations.begin(), utilizations.end(), 0.0);
  r.bound = liu_layland_bound(r.n);
  // Absorb rounding in the sum (n = 1, U = 1.0 must pass).
  r.accepted = r.total_utilization <= r.bound + 1e-12;
  return r;
}

struct VcpuCandidate {
  VcpuId id = 0;
  bool runnable = false;
  sim::SimTime budget;
  Priority priority = kBackgroundFloor;
};

struct Selection {
  VcpuId id = 0;
  Band band = Band::foreground;
  bool operator==(const Selection&) const = default;
};

/// Highest-priority runnable VCPU with budget runs in the foreground band.
/// Otherwise the lowest-id runnable VCPU runs in the shared background band.
inline std::optional<Selection> pick_next(std::span<const VcpuCandidate> cands,
                                          Priority background_floor = kBackgroundFloor) {
  const VcpuCandidate* best = nullptr;
  for (const auto& c : cands) {
    if (!c.runnable || c.budget.cycles == 0 || c.priority >= background_floor) continue;
    if (!best || c.priority < best->priority || (c.priority == best->priority && c.id < best->id)) best = &c;
  }
  if (best) return Selection{best->id, Band::foreground};
  for (const auto& c : cands) {
    if (!c.runnable) continue;
    if (!best || c.id < best->id) best = &c;
  }
  if (best) return Selection{best->id, Band::background};
  return std::nullopt;
}

/// Priority an I/O VCPU runs at while serving the given initiators: the
/// highest pending one, or the background floor when idle.
inline Priority io_inherit(std::span<const Priority> pending_initiators, Priority background_floor = kBackgroundFloor) {
  if (pending_initiators.empty()) return background_floor;
  return *std::min_element(pending_initiators.begin(), pending_initiators.end());
}

inline Priority io_inherit(std::optional<Priority> initiator, Priority background_floor = kBackgroundFloor) {
  return initiator ? *initiator : background_floor;
}

}  // namespace questv::sched
