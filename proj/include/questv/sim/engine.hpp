#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "questv/errors.hpp"
#include "questv/sim/time.hpp"
#include "questv/sim/trace.hpp"

namespace questv::sim {

using EventId = std::uint64_t;
using EntityId = std::uint32_t;

inline constexpr EntityId kHostEntity = std::numeric_limits<EntityId>::max();

enum class EventKind : std::uint8_t {
  timer,
  interrupt,
  ipi,
  vm_exit,
  vm_entry,
  channel_poll,
  fault_inject,
  workload_step,
};

constexpr std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::timer: return "timer";
    case EventKind::interrupt: return "interrupt";
    case EventKind::ipi: return "ipi";
    case EventKind::vm_exit: return "vm-exit";
    case EventKind::vm_entry: return "vm-entry";
    case EventKind::channel_poll: return "channel-poll";
    case EventKind::fault_inject: return "fault-inject";
    case EventKind::workload_step: return "workload-step";
  }
  return "unknown";
}

struct Event {
  EventId id = 0;
  SimTime at;
  EventKind kind = EventKind::timer;
  EntityId target = kHostEntity;
  std::function<void()> action;
};

/// Single-threaded discrete-event engine. Events are dispatched in (at, id)
/// order; ids are handed out in insertion order so ties resolve
/// deterministically.
class Engine {
 public:
  explicit Engine(SimConfig cfg = {}) : cfg_(cfg), rng_(cfg.seed) { cfg_.validate(); }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;
  Engine(Engine&&) = default;
  Engine& operator=(Engine&&) = default;

  EventId schedule(SimTime at, EventKind kind, EntityId target, std::function<void()> action = {}) {
    if (at < now_)
      throw PastTimeError("event at cycle " + std::to_string(at.cycles) + " is before now (" +
                          std::to_string(now_.cycles) + ")");
    const EventId id = ++last_id_;
    heap_.push_back(Event{id, at, kind, target, std::move(action)});
    std::push_heap(heap_.begin(), heap_.end(), Later{});
    ++scheduled_;
    return id;
  }

  EventId schedule_in(SimTime delay, EventKind kind, EntityId target,
                      std::function<void()> action = {}) {
    if (delay.cycles > std::numeric_limits<std::uint64_t>::max() - now_.cycles)
      throw OverflowError("event time overflows");
    return schedule(now_ + delay, kind, target, std::move(action));
  }

  /// Dispatches every event with at <= t, leaves the clock at t and returns
  /// the trace records emitted during the window.
  std::vector<TraceRecord> run_until(SimTime t) {
    const std::size_t first = trace_.size();
    advance_until(t);
    const auto& all = trace_.records();
    return {all.begin() + static_cast<std::ptrdiff_t>(first), all.end()};
  }

  /// Like run_until but returns the number of dispatched events instead of
  /// copying records. Stops early (clock at last dispatch) when a stop was
  /// requested by a handler.
  std::size_t advance_until(SimTime t) {
    if (t < now_) throw PastTimeError("run_until target is in the past");
    stop_requested_ = false;
    std::size_t n = 0;
    while (!heap_.empty() && heap_.front().at <= t) {
      dispatch_one();
      ++n;
      if (stop_requested_) return n;
    }
    now_ = t;
    return n;
  }

  /// Handlers call this to end the current advance_until early.
  void request_stop() noexcept { stop_requested_ = true; }
  bool stop_requested() const noexcept { return stop_requested_; }

  SimTime now() const noexcept { return now_; }
  const SimConfig& config() const noexcept { return cfg_; }
  std::mt19937_64& rng() noexcept { return rng_; }

  Trace& trace() noexcept { return trace_; }
  const Trace& trace() const noexcept { return trace_; }

  void record(std::int64_t sandbox, std::string event_type, std::string detail = {}) {
    trace_.append(now_, sandbox, std::move(event_type), std::move(detail));
  }

  /// Called after every dispatched event; used by invariant checkers.
  void set_dispatch_hook(std::function<void(const Event&)> hook) { hook_ = std::move(hook); }

  std::optional<SimTime> next_event_time() const {
    if (heap_.empty()) return std::nullopt;
    return heap_.front().at;
  }

  std::size_t queued() const noexcept { return heap_.size(); }
  std::uint64_t scheduled_count() const noexcept { return scheduled_; }
  std::uint64_t dispatched_count() const noexcept { return dispatched_; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.id > b.id;
    }
  };

  void dispatch_one() {
    std::pop_heap(heap_.begin(), heap_.end(), Later{});
    Event ev = std::move(heap_.back());
    heap_.pop_back();
    if (ev.at < now_) throw InvariantError("causality violated");
    now_ = ev.at;
    ++dispatched_;
    if (ev.action) {
      ev.action();
    } else {
      record(ev.target == kHostEntity ? kHostSandbox : static_cast<std::int64_t>(ev.target),
             std::string(to_string(ev.kind)), fields("id", ev.id));
    }
    if (hook_) hook_(ev);
  }

  SimConfig cfg_;
  SimTime now_{};
  EventId last_id_ = 0;
  std::vector<Event> heap_;
  std::uint64_t scheduled_ = 0;
  std::uint64_t dispatched_ = 0;
  bool stop_requested_ = false;
  std::mt19937_64 rng_;
  Trace trace_;
  std::function<void(const Event&)> hook_;
};

}  // namespace questv::sim
