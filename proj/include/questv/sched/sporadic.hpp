#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <string>

#include "questv/errors.hpp"
#include "questv/sim/time.hpp"

namespace questv::sched {

struct Replenishment {
  sim::SimTime at;
  sim::SimTime amount;
  bool operator==(const Replenishment&) const = default;
};

/// Budget state of a sporadic server.
///
/// Consumption is charged in contiguous foreground runs. A run that begins at
/// time a posts one replenishment item {a + period, consumed}; consumption
/// that continues the run without a gap is folded into the same item. Any
/// replenishment arriving closes the open run, so every item only covers
/// budget that was present when its run began. This keeps foreground
/// execution within capacity over every window of one period.
///
/// At most `max_pending` items are kept. When a new item would exceed that,
/// the newest pending item is folded into it at the new (later) time, which
/// only ever delays budget.
///
/// Invariant: budget + sum(pending amounts) == capacity.
class SporadicServer {
 public:
  static constexpr std::size_t kDefaultMaxPending = 8;

  SporadicServer(sim::SimTime capacity, sim::SimTime period, std::size_t max_pending = kDefaultMaxPending)
      : capacity_(capacity), period_(period), budget_(capacity), max_pending_(max_pending) {
    if (capacity.cycles == 0 || capacity > period)
      throw ConfigError("sporadic server requires 0 < C_max <= V_T");
    if (max_pending == 0) throw ConfigError("sporadic server needs room for one replenishment");
  }

  sim::SimTime capacity() const noexcept { return capacity_; }
  sim::SimTime period() const noexcept { return period_; }
  sim::SimTime budget() const noexcept { return budget_; }
  const std::deque<Replenishment>& pending() const noexcept { return pending_; }
  double utilization() const {
    return static_cast<double>(capacity_.cycles) / static_cast<double>(period_.cycles);
  }

  /// Charges foreground execution over [from, to). Returns the replenishment
  /// item that was created, or nullopt when the charge extended the open one.
  std::optional<Replenishment> account(sim::SimTime from, sim::SimTime to) {
    if (to <= from) throw InvariantError("account interval must be non-empty");
    const sim::SimTime used = to - from;
    if (used > budget_)
      throw InvariantError("charged " + std::to_string(used.cycles) + " cycles against a budget of " +
                           std::to_string(budget_.cycles));
    budget_ -= used;
    std::optional<Replenishment> created;
    if (open_end_ && *open_end_ == from && !pending_.empty()) {
      pending_.back().amount += used;
    } else {
      Replenishment item{from + period_, used};
      if (pending_.size() == max_pending_) {
        item.amount += pending_.back().amount;
        pending_.pop_back();
      }
      pending_.push_back(item);
      created = item;
    }
    open_end_ = to;
    if (budget_.cycles == 0) open_end_.reset();
    return created;
  }

  /// Applies all items due at or before `now`. Returns the amount restored.
  sim::SimTime replenish_due(sim::SimTime now) {
    sim::SimTime added{};
    while (!pending_.empty() && pending_.front().at <= now) {
      added += pending_.front().amount;
      pending_.pop_front();
    }
    if (added.cycles > 0) {
      budget_ += added;
      open_end_.reset();
    }
    return added;
  }

  std::optional<sim::SimTime> next_replenishment() const {
    if (pending_.empty()) return std::nullopt;
    return pending_.front().at;
  }

  bool conserved() const {
    sim::SimTime sum = budget_;
    for (const auto& r : pending_) sum += r.amount;
    return sum == capacity_;
  }

 private:
  sim::SimTime capacity_;
  sim::SimTime period_;
  sim::SimTime budget_;
  std::size_t max_pending_;
  std::deque<Replenishment> pending_;
  std::optional<sim::SimTime> open_end_;
};

}  // namespace questv::sched
