#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "questv/errors.hpp"
#include "questv/memory/guest_access.hpp"
#include "questv/memory/layout.hpp"
#include "questv/recovery/policy.hpp"
#include "questv/sandbox/cost_model.hpp"
#include "questv/sched/pcpu.hpp"
#include "questv/sim/engine.hpp"

namespace questv::sandbox {

enum class State : std::uint8_t { created, running, trapped, recovering, halted };

constexpr std::string_view to_string(State s) {
  switch (s) {
    case State::created: return "created";
    case State::running: return "running";
    case State::trapped: return "trapped-to-monitor";
    case State::recovering: return "recovering";
    case State::halted: return "halted";
  }
  return "?";
}

enum class ExitReason : std::uint8_t { ept_violation, forced, preemption_timeout, ipi };

constexpr std::string_view to_string(ExitReason r) {
  switch (r) {
    case ExitReason::ept_violation: return "ept-violation";
    case ExitReason::forced: return "forced";
    case ExitReason::preemption_timeout: return "preemption-timeout";
    case ExitReason::ipi: return "ipi";
  }
  return "?";
}

struct Sandbox {
  SandboxId id = 0;
  std::uint32_t pcpu = 0;
  State state = State::created;
  std::vector<std::string> services;
  std::vector<std::uint32_t> drivers;
  std::vector<std::uint32_t> channels;
  std::uint64_t vm_exit_count = 0;
  sim::SimTime trapped_cycles{};
  sim::SimTime trapped_since{};
  bool entering = false;
};

/// Per-sandbox supervisor. Sole holder of its EPT mutation token.
class Monitor {
 public:
  Monitor(SandboxId sandbox, mem::MonitorToken token) : sandbox_(sandbox), token_(token) {}

  SandboxId sandbox() const noexcept { return sandbox_; }
  const mem::MonitorToken& token() const noexcept { return token_; }

  recovery::RecoveryPolicy policy;
  std::optional<ExitReason> pending_reason;
  std::vector<mem::EptViolation> pending_traps;

 private:
  SandboxId sandbox_;
  mem::MonitorToken token_;
};

/// Owns host memory, EPTs, sandboxes, monitors and the per-sandbox PCPU
/// schedulers, and implements the monitor transitions.
class SandboxManager {
 public:
  using TrapHandler = std::function<void(SandboxId)>;

  SandboxManager(sim::Engine& engine, std::size_t n_sandboxes, const mem::LayoutSizes& sizes,
                 CostModel costs = {})
      : engine_(&engine), costs_(costs), host_(sizes.host_bytes) {
    auto built = mem::build_layout(n_sandboxes, sizes, engine.config().seed);
    layout_ = std::move(built.layout);
    tables_ = std::move(built.tables);
    for (std::size_t i = 0; i < n_sandboxes; ++i) {
      const auto sid = static_cast<SandboxId>(i);
      Sandbox sb;
      sb.id = sid;
      sb.pcpu = static_cast<std::uint32_t>(i);
      sandboxes_.push_back(std::move(sb));
      monitors_.emplace_back(sid, built.tokens[i]);
      schedulers_.push_back(std::make_unique<sched::PcpuScheduler>(engine, sid));
      schedulers_.back()->suspend();
      sync_ept_data(sid);
    }
  }

  SandboxManager(const SandboxManager&) = delete;
  SandboxManager& operator=(const SandboxManager&) = delete;

  std::size_t size() const noexcept { return sandboxes_.size(); }
  sim::Engine& engine() noexcept { return *engine_; }
  const CostModel& costs() const noexcept { return costs_; }
  const mem::MemoryLayout& layout() const noexcept { return layout_; }
  mem::HostMemory& host() noexcept { return host_; }
  const mem::HostMemory& host() const noexcept { return host_; }
  const mem::EptTable& ept(SandboxId s) const { return tables_.at(s); }
  const std::vector<mem::EptTable>& epts() const noexcept { return tables_; }

  Sandbox& sandbox(SandboxId s) { return sandboxes_.at(s); }
  const Sandbox& sandbox(SandboxId s) const { return sandboxes_.at(s); }
  Monitor& monitor(SandboxId s) { return monitors_.at(s); }
  const Monitor& monitor(SandboxId s) const { return monitors_.at(s); }
  sched::PcpuScheduler& scheduler(SandboxId s) { return *schedulers_.at(s); }
  const sched::PcpuScheduler& scheduler(SandboxId s) const { return *schedulers_.at(s); }

  State state(SandboxId s) const { return sandboxes_.at(s).state; }
  bool running(SandboxId s) const { return state(s) == State::running; }

  void set_trap_handler(TrapHandler h) { trap_handler_ = std::move(h); }

  // ---- lifecycle -------------------------------------------------------

  void launch(SandboxId s) {
    auto& sb = sandboxes_.at(s);
    if (sb.state != State::created && sb.state != State::halted)
      throw StateError("sandbox " + std::to_string(s) + " cannot be launched from state " +
                       std::string(to_string(sb.state)));
    const bool relaunch = sb.state == State::halted;
    sb.state = State::running;
    sb.entering = false;
    std::string services;
    for (const auto& name : sb.services) services += (services.empty() ? "" : "+") + name;
    engine_->record(s, "sandbox_launch", sim::fields("relaunch", relaunch, "services", services.empty() ? "none" : services));
    scheduler(s).resume();
  }

  void halt(SandboxId s) {
    auto& sb = sandboxes_.at(s);
    if (sb.state == State::halted) return;
    if (sb.state == State::trapped || sb.state == State::recovering)
      sb.trapped_cycles += engine_->now() - sb.trapped_since;
    sb.state = State::halted;
    sb.entering = false;
    auto& m = monitors_.at(s);
    m.pending_traps.clear();
    m.pending_reason.reset();
    engine_->record(s, "sandbox_halt");
    scheduler(s).suspend();
  }

  /// Transfers control to the monitor. The monitor runs its trap handler
  /// once the VM-exit cost has elapsed. Returns that time.
  sim::SimTime vm_exit(SandboxId s, ExitReason reason, std::vector<mem::EptViolation> traps = {}) {
    auto& sb = sandboxes_.at(s);
    if (sb.state != State::running)
      throw StateError("vm_exit requires a running sandbox (sandbox " + std::to_string(s) + " is " +
                       std::string(to_string(sb.state)) + ")");
    sb.state = State::trapped;
    sb.trapped_since = engine_->now();
    ++sb.vm_exit_count;
    auto& m = monitors_.at(s);
    m.pending_reason = reason;
    m.pending_traps = std::move(traps);
    scheduler(s).suspend();
    // IPI-induced exits are charged as part of the IPI round trip.
    const sim::SimTime cost = reason == ExitReason::ipi ? sim::SimTime{} : costs_.vm_exit;
    engine_->record(s, "vm_exit", sim::fields("reason", to_string(reason), "cost", cost));
    const sim::SimTime at = engine_->now() + cost;
    if (reason != ExitReason::ipi) {
      engine_->schedule(at, sim::EventKind::vm_exit, s, [this, s] {
        if (sandboxes_.at(s).state != State::trapped) return;
        engine_->record(s, "monitor_trap",
                        sim::fields("reason", to_string(*monitors_.at(s).pending_reason), "violations",
                                    monitors_.at(s).pending_traps.size()));
        if (trap_handler_)
          trap_handler_(s);
        else
          vm_enter(s);
      });
    }
    return at;
  }

  /// Monitor takes over a trapped sandbox for recovery work.
  void begin_recovery(SandboxId s) {
    auto& sb = sandboxes_.at(s);
    if (sb.state != State::trapped) throw StateError("begin_recovery requires a trapped sandbox");
    sb.state = State::recovering;
  }

  /// Resumes the guest. The sandbox is running again once the VM-entry cost
  /// has elapsed; `entered` runs at that point. Returns that time.
  sim::SimTime vm_enter(SandboxId s, std::function<void()> entered = {}) {
    auto& sb = sandboxes_.at(s);
    if (sb.state == State::running) throw StateError("vm_enter on running sandbox " + std::to_string(s));
    if (sb.state != State::trapped && sb.state != State::recovering)
      throw StateError("vm_enter requires a trapped or recovering sandbox (sandbox " + std::to_string(s) + " is " +
                       std::string(to_string(sb.state)) + ")");
    if (sb.entering) throw StateError("vm_enter already in progress for sandbox " + std::to_string(s));
    sb.entering = true;
    engine_->record(s, "vm_enter", sim::fields("cost", costs_.vm_enter));
    const sim::SimTime at = engine_->now() + costs_.vm_enter;
    engine_->schedule(at, sim::EventKind::vm_entry, s, [this, s, entered = std::move(entered)] {
      auto& sb2 = sandboxes_.at(s);
      if (!sb2.entering) return;  // halted meanwhile
      sb2.entering = false;
      sb2.trapped_cycles += engine_->now() - sb2.trapped_since;
      sb2.state = State::running;
      auto& m = monitors_.at(s);
      m.pending_traps.clear();
      m.pending_reason.reset();
      engine_->record(s, "vm_entered");
      scheduler(s).resume();
      if (entered) entered();
    });
    return at;
  }

  // ---- memory ------------------------------------------------------------

  /// Guest access through the sandbox's EPT. Violations are traced and
  /// returned; no bytes move on failure. Does not trap by itself.
  std::vector<mem::EptViolation> guest_access(SandboxId s, mem::Gpa gpa, mem::AccessKind kind,
                                              std::span<std::uint8_t> buffer) {
    auto v = mem::guest_access(tables_.at(s), host_, gpa, kind, buffer);
    for (const auto& x : v)
      engine_->record(s, "ept_violation",
                      sim::fields("gpa", hex(x.gpa.value), "access", mem::to_string(x.access), "reason",
                                  mem::to_string(x.reason)));
    return v;
  }

  /// Guest access that traps to the monitor on violation.
  std::vector<mem::EptViolation> guest_access_or_trap(SandboxId s, mem::Gpa gpa, mem::AccessKind kind,
                                                      std::span<std::uint8_t> buffer) {
    auto v = guest_access(s, gpa, kind, buffer);
    if (!v.empty() && running(s)) vm_exit(s, ExitReason::ept_violation, v);
    return v;
  }

  /// Monitor-privileged EPT updates; `cap` must be the sandbox's token.
  void ept_map(SandboxId s, mem::Gpa gpa, mem::Hpa hpa, mem::Permissions perms, std::uint64_t n_pages,
               const mem::MonitorToken& cap) {
    tables_.at(s).map(gpa, hpa, perms, n_pages, cap);
    sync_ept_data(s);
  }

  void ept_unmap(SandboxId s, mem::Gpa gpa, std::uint64_t n_pages, const mem::MonitorToken& cap) {
    tables_.at(s).unmap(gpa, n_pages, cap);
    sync_ept_data(s);
  }

  void ept_set_perms(SandboxId s, mem::Gpa gpa, std::uint64_t n_pages, mem::Permissions perms,
                     const mem::MonitorToken& cap) {
    tables_.at(s).set_perms(gpa, n_pages, perms, cap);
    sync_ept_data(s);
  }

  /// Hash of the host bytes that belong to sandbox s alone (kernel region).
  std::uint64_t kernel_hash(SandboxId s) const {
    const auto& r = layout_.kernels.at(s);
    return host_.hash_range(mem::Hpa{r.begin}, r.length);
  }

  /// Hash of the monitor-only EPT data region of sandbox s.
  std::uint64_t monitor_hash(SandboxId s) const {
    const auto& r = layout_.ept_data.at(s);
    return host_.hash_range(mem::Hpa{r.begin}, r.length);
  }

  // ---- preemption timeout -------------------------------------------------

  /// Periodically forces a VM exit so the monitor regains control even if
  /// the guest's own fault path is compromised.
  void enable_preemption_timeout(SandboxId s, sim::SimTime period) {
    if (period.cycles == 0) return;
    engine_->schedule_in(period, sim::EventKind::timer, s, [this, s, period] {
      if (running(s)) vm_exit(s, ExitReason::preemption_timeout);
      enable_preemption_timeout(s, period);
    });
  }

  static std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
  }

 private:
  // The EPT data region holds a serialized summary of the table; only the
  // monitor writes it, directly to host memory.
  void sync_ept_data(SandboxId s) {
    const auto& r = layout_.ept_data.at(s);
    const std::uint64_t words[3] = {0x45505444415441ULL, tables_.at(s).hash(), tables_.at(s).mapped_pages()};
    std::uint8_t bytes[sizeof words];
    std::memcpy(bytes, words, sizeof words);
    host_.write(mem::Hpa{r.begin}, bytes);
  }

  sim::Engine* engine_;
  CostModel costs_;
  mem::HostMemory host_;
  mem::MemoryLayout layout_;
  std::vector<mem::EptTable> tables_;
  std::vector<Sandbox> sandboxes_;
  std::vector<Monitor> monitors_;
  std::vector<std::unique_ptr<sched::PcpuScheduler>> schedulers_;
  TrapHandler trap_handler_;
};

}  // namespace questv::sandbox
