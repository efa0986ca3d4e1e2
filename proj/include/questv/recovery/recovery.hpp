#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "questv/devices/nic.hpp"
#include "questv/errors.hpp"
#include "questv/interrupts/ioapic.hpp"
#include "questv/ipc/channel.hpp"
#include "questv/recovery/policy.hpp"
#include "questv/sandbox/sandbox.hpp"

namespace questv::recovery {

struct FaultSpec {
  SandboxId sandbox = 0;
  dev::DriverId component = 0;
  std::vector<dev::BlastWrite> blast;
  std::optional<Mode> mode;  // falls back to the monitor's policy
};

struct Phase {
  std::string name;
  sim::SimTime cycles;
  bool operator==(const Phase&) const = default;
};

struct RecoveryReport {
  Mode mode = Mode::local;
  SandboxId origin = 0;
  std::optional<SandboxId> target;
  std::vector<Phase> phases;
  sim::SimTime fault_at;
  sim::SimTime healthy_at;
  sim::SimTime downtime;
  std::uint64_t missed_icmp = 0;
  std::vector<ipc::ChannelId> restored_channels;
  std::size_t violations = 0;

  sim::SimTime phase_sum() const {
    sim::SimTime s{};
    for (const auto& p : phases) s += p.cycles;
    return s;
  }
};

/// Picks the sandbox that takes over a failed service. `loads[i]` belongs to
/// `candidates[i]`. `rr_last` is the round-robin pointer and persists across
/// calls.
inline SandboxId select_target(TargetSelection sel, std::span<const SandboxId> candidates, std::span<const double> loads,
                               std::optional<SandboxId>& rr_last, std::mt19937_64& rng) {
  if (candidates.empty()) throw StateError("no candidate sandbox for remote recovery");
  std::vector<SandboxId> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  switch (sel) {
    case TargetSelection::random: {
      std::uniform_int_distribution<std::size_t> pick(0, sorted.size() - 1);
      return sorted[pick(rng)];
    }
    case TargetSelection::round_robin: {
      SandboxId chosen = sorted.front();
      if (rr_last) {
        auto it = std::upper_bound(sorted.begin(), sorted.end(), *rr_last);
        if (it != sorted.end()) chosen = *it;
      }
      rr_last = chosen;
      return chosen;
    }
    case TargetSelection::least_loaded: {
      if (loads.size() != candidates.size()) throw Error("one load per candidate is required");
      std::size_t best = 0;
      for (std::size_t i = 1; i < candidates.size(); ++i)
        if (loads[i] < loads[best] || (loads[i] == loads[best] && candidates[i] < candidates[best])) best = i;
      return candidates[best];
    }
  }
  return sorted.front();
}

/// Runs fault injection and the monitor-side recovery sequences. Installs
/// itself as the sandbox manager's trap handler.
class RecoveryManager {
 public:
  using HealthyHook = std::function<void(const RecoveryReport&)>;

  RecoveryManager(sandbox::SandboxManager& mgr, irq::IoApic& apic, dev::NicLayer& nic, ipc::ChannelTable& chans)
      : mgr_(&mgr), apic_(&apic), nic_(&nic), chans_(&chans) {
    mgr_->set_trap_handler([this](SandboxId s) { on_trap(s); });
  }

  const std::vector<RecoveryReport>& reports() const noexcept { return reports_; }
  std::optional<SandboxId> round_robin_pointer() const noexcept { return rr_last_; }
  void on_healthy(HealthyHook h) { healthy_hook_ = std::move(h); }

  /// Schedules a fault at an absolute time.
  void schedule(sim::SimTime at, FaultSpec spec) {
    mgr_->engine().schedule(at, sim::EventKind::fault_inject, spec.sandbox,
                            [this, spec = std::move(spec)] { inject(spec); });
  }

  /// Activates a fault now: the driver is corrupted, the blast writes run,
  /// and control passes to the monitor through an EPT-violation exit if any
  /// write trapped, or a forced exit otherwise.
  void inject(const FaultSpec& spec) {
    auto& eng = mgr_->engine();
    const auto& inst = nic_->driver(spec.component);
    if (inst.sandbox != spec.sandbox) throw ConfigError("fault component does not belong to the faulting sandbox");
    if (!mgr_->running(spec.sandbox)) {
      eng.record(spec.sandbox, "fault_skipped", sim::fields("reason", to_string(mgr_->state(spec.sandbox))));
      return;
    }
    const Mode mode = spec.mode.value_or(mgr_->monitor(spec.sandbox).policy.mode);
    eng.record(spec.sandbox, "fault_inject", sim::fields("driver", spec.component, "mode", to_string(mode), "writes", spec.blast.size()));
    eng.record(spec.sandbox, "blast_begin", hashes());
    auto violations = nic_->corrupt_driver(spec.component, spec.blast);
    eng.record(spec.sandbox, "blast_end", hashes());

    Active a;
    a.spec = spec;
    a.mode = mode;
    a.report.mode = mode;
    a.report.origin = spec.sandbox;
    a.report.fault_at = eng.now();
    a.report.violations = violations.size();
    a.mark = eng.now();
    active_[spec.sandbox] = std::move(a);
    if (violations.empty())
      mgr_->vm_exit(spec.sandbox, sandbox::ExitReason::forced);
    else
      mgr_->vm_exit(spec.sandbox, sandbox::ExitReason::ept_violation, std::move(violations));
  }

  /// Monitor trap intake and decision.
  void on_trap(SandboxId s) {
    auto& eng = mgr_->engine();
    auto it = active_.find(s);
    const auto& mon = mgr_->monitor(s);
    if (it == active_.end() || it->second.started) {
      if (mon.pending_reason == sandbox::ExitReason::ept_violation) {
        // A violation nobody can attribute to a component: stop the sandbox.
        eng.record(s, "monitor_decision", sim::fields("action", "halt", "attributed", false));
        mgr_->halt(s);
        return;
      }
      mgr_->vm_enter(s);
      return;
    }
    auto& a = it->second;
    a.started = true;
    phase(a, "vm_exit");
    switch (a.mode) {
      case Mode::local:
        eng.record(s, "monitor_decision", sim::fields("action", "local-recover", "driver", a.spec.component));
        return local(s);
      case Mode::remote:
        eng.record(s, "monitor_decision", sim::fields("action", "remote-recover", "driver", a.spec.component));
        return remote(s);
      case Mode::halt:
        eng.record(s, "monitor_decision", sim::fields("action", "halt", "attributed", true));
        mgr_->halt(s);
        finish(s, false);
        return;
      case Mode::reboot:
        eng.record(s, "monitor_decision", sim::fields("action", "reboot"));
        return reboot(s);
    }
  }

 private:
  struct Active {
    FaultSpec spec;
    Mode mode = Mode::local;
    RecoveryReport report;
    sim::SimTime mark;
    bool started = false;
    std::optional<dev::DriverId> serving;  // driver that ends up serving
  };

  std::string hashes() const {
    std::string out;
    for (std::size_t i = 0; i < mgr_->size(); ++i) {
      const auto sid = static_cast<SandboxId>(i);
      if (!out.empty()) out += ';';
      out += sim::fields("k" + std::to_string(i), mgr_->kernel_hash(sid), "m" + std::to_string(i), mgr_->monitor_hash(sid));
    }
    return out;
  }

  void phase(Active& a, const std::string& name) {
    auto& eng = mgr_->engine();
    const sim::SimTime cycles = eng.now() - a.mark;
    a.mark = eng.now();
    a.report.phases.push_back(Phase{name, cycles});
    eng.record(a.spec.sandbox, "recovery_phase", sim::fields("mode", to_string(a.mode), "phase", name, "cycles", cycles));
  }

  void after(sim::SimTime d, SandboxId s, std::function<void()> fn) {
    mgr_->engine().schedule_in(d, sim::EventKind::timer, s, std::move(fn));
  }

  void local(SandboxId s) {
    auto& a = active_.at(s);
    mgr_->begin_recovery(s);
    nic_->begin_reinit(a.spec.component);
    a.serving = a.spec.component;
    const bool diversity = mgr_->monitor(s).policy.diversity;
    const auto& c = mgr_->costs();
    auto enter = [this, s] {
      mgr_->vm_enter(s, [this, s] {
        auto& a2 = active_.at(s);
        phase(a2, "vm_enter");
        reinit_phases(s, a2.spec.component);
      });
    };
    if (diversity) {
      after(c.driver_switch, s, [this, s, enter] {
        nic_->switch_implementation(active_.at(s).spec.component);
        phase(active_.at(s), "driver_switch");
        enter();
      });
    } else {
      enter();
    }
  }

  void reinit_phases(SandboxId s, dev::DriverId drv) {
    const auto& c = mgr_->costs();
    after(c.driver_reinit, s, [this, s, drv] {
      phase(active_.at(s), "driver_reinit");
      after(mgr_->costs().network_reinit, s, [this, s, drv] {
        nic_->finish_reinit(drv);
        phase(active_.at(s), "network_reinit");
        auto& a = active_.at(s);
        if (a.mode == Mode::local) restore_channels(s, a);
        finish(s, true);
      });
    });
  }

  void restore_channels(SandboxId s, Active& a) {
    for (auto id : mgr_->sandbox(s).channels) {
      if (chans_->channel(id).destroyed || !chans_->damaged(id)) continue;
      chans_->restore(id, mgr_->monitor(s).token());
      a.report.restored_channels.push_back(id);
    }
  }

  void remote(SandboxId s) {
    auto& eng = mgr_->engine();
    auto& a = active_.at(s);
    const auto device = nic_->driver(a.spec.component).device;
    std::vector<SandboxId> cands;
    std::vector<double> loads;
    for (std::size_t i = 0; i < mgr_->size(); ++i) {
      const auto sid = static_cast<SandboxId>(i);
      if (sid == s || !mgr_->running(sid)) continue;
      const auto drv = nic_->find_driver(sid, device);
      if (!drv || nic_->driver(*drv).state == dev::DriverState::detached) continue;
      cands.push_back(sid);
      double load = 0;
      for (const auto& v : mgr_->scheduler(sid).vcpus())
        if (v.kind() == sched::VcpuKind::main) load += v.utilization();
      loads.push_back(load);
    }
    if (cands.empty()) {
      eng.record(s, "recovery_fallback", sim::fields("reason", "no-candidate"));
      a.mode = Mode::local;
      a.report.mode = Mode::local;
      return local(s);
    }
    const SandboxId target =
        select_target(mgr_->monitor(s).policy.target_selection, cands, loads, rr_last_, eng.rng());
    a.report.target = target;
    eng.record(s, "recovery_target", sim::fields("target", target, "selection", to_string(mgr_->monitor(s).policy.target_selection)));
    mgr_->begin_recovery(s);
    irq::Ipi ipi{s, target, 0xF0, irq::IpiTag::recovery_kickstart};
    apic_->send_ipi(
        ipi,
        [this, target] {
          if (mgr_->running(target)) mgr_->vm_exit(target, sandbox::ExitReason::ipi);
        },
        [this, s, target, device] { remote_acked(s, target, device); });
  }

  void remote_acked(SandboxId s, SandboxId target, dev::DeviceId device) {
    auto& a = active_.at(s);
    phase(a, "ipi_round_trip");
    const auto target_drv = *nic_->find_driver(target, device);
    a.serving = target_drv;

    // The faulty sandbox is taken down and healed in the background.
    nic_->detach(a.spec.component);
    mgr_->halt(s);
    restore_channels(s, a);
    mgr_->launch(s);

    auto resume = [this, s, target, device, target_drv] {
      auto& a2 = active_.at(s);
      phase(a2, "vm_enter");
      const auto vec = nic_->device(device).vector;
      auto entry = apic_->entry(vec);
      std::set<SandboxId> dests;
      if (entry)
        for (auto d : entry->destinations.resolve(mgr_->size())) dests.insert(d);
      dests.erase(s);
      dests.insert(target);
      if (mgr_->monitor(s).policy.grant_redirect) {
        apic_->grant_redirect(target, vec, mgr_->monitor(target).token());
        apic_->redirect(vec, irq::Destinations::only(dests), irq::RedirectCapability{target});
      } else {
        apic_->redirect(vec, irq::Destinations::only(dests), irq::RedirectCapability{mgr_->monitor(target).token()});
      }
      nic_->move_vifs(device, s, target);
      nic_->begin_reinit(target_drv);
      reinit_phases(s, target_drv);
    };
    if (mgr_->state(target) == sandbox::State::trapped) {
      mgr_->begin_recovery(target);
      mgr_->vm_enter(target, resume);
    } else {
      resume();
    }
  }

  void reboot(SandboxId s) {
    auto& eng = mgr_->engine();
    for (std::size_t i = 0; i < mgr_->size(); ++i) mgr_->halt(static_cast<SandboxId>(i));
    eng.record(sim::kHostSandbox, "reboot_begin", sim::fields("cost", mgr_->costs().reboot));
    after(mgr_->costs().reboot, s, [this, s] {
      auto& a = active_.at(s);
      for (const auto& d : nic_->drivers()) {
        if (d.state == dev::DriverState::detached) continue;
        if (d.state != dev::DriverState::reinitializing) nic_->begin_reinit(d.id);
        nic_->finish_reinit(d.id);
      }
      for (const auto& c : chans_->channels())
        if (!c.destroyed && chans_->damaged(c.id)) {
          chans_->restore(c.id, mgr_->monitor(c.a).token());
          a.report.restored_channels.push_back(c.id);
        }
      for (std::size_t i = 0; i < mgr_->size(); ++i) mgr_->launch(static_cast<SandboxId>(i));
      phase(a, "reboot");
      finish(s, true);
    });
  }

  void finish(SandboxId s, bool healthy) {
    auto& eng = mgr_->engine();
    auto node = active_.extract(s);
    auto& a = node.mapped();
    a.report.healthy_at = eng.now();
    a.report.downtime = eng.now() - a.report.fault_at;
    if (healthy) eng.record(s, "service_healthy", sim::fields("driver", a.serving.value_or(a.spec.component)));
    std::string restored;
    for (auto c : a.report.restored_channels) restored += (restored.empty() ? "" : "+") + std::to_string(c);
    eng.record(s, "recovery_done",
               sim::fields("mode", to_string(a.mode), "downtime", a.report.downtime, "phase_sum", a.report.phase_sum(),
                           "restored", restored.empty() ? "none" : restored, "healthy", healthy) +
                   ";" + hashes());
    reports_.push_back(a.report);
    if (healthy_hook_) healthy_hook_(reports_.back());
  }

  sandbox::SandboxManager* mgr_;
  irq::IoApic* apic_;
  dev::NicLayer* nic_;
  ipc::ChannelTable* chans_;
  std::map<SandboxId, Active> active_;
  std::vector<RecoveryReport> reports_;
  std::optional<SandboxId> rr_last_;
  HealthyHook healthy_hook_;
};

}  // namespace questv::recovery
