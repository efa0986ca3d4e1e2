#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "questv/errors.hpp"
#include "questv/memory/address.hpp"
#include "questv/sched/policy.hpp"
#include "questv/sched/sporadic.hpp"
#include "questv/sim/engine.hpp"

namespace questv::sched {

enum class VcpuKind : std::uint8_t { main, io };

constexpr std::string_view to_string(VcpuKind k) { return k == VcpuKind::main ? "main" : "io"; }
constexpr std::string_view to_string(Band b) { return b == Band::foreground ? "fg" : "bg"; }

struct VcpuParams {
  VcpuId id = 0;
  VcpuKind kind = VcpuKind::main;
  sim::SimTime c_max;
  sim::SimTime period;
};

/// A unit of thread work bound to a VCPU. `initiator` is the priority an I/O
/// VCPU inherits while this item is pending.
struct WorkItem {
  sim::SimTime remaining;
  std::function<void()> done;
  std::optional<Priority> initiator;
};

class Vcpu {
 public:
  explicit Vcpu(const VcpuParams& p) : params_(p), server_(p.c_max, p.period) {}

  VcpuId id() const noexcept { return params_.id; }
  VcpuKind kind() const noexcept { return params_.kind; }
  const SporadicServer& server() const noexcept { return server_; }
  double utilization() const { return server_.utilization(); }
  bool runnable() const noexcept { return !work_.empty(); }
  std::size_t queued_work() const noexcept { return work_.size(); }

  Priority fg_priority() const noexcept { return fg_priority_; }

  /// Main VCPUs run at their RMS priority; I/O VCPUs at the highest priority
  /// among pending initiators.
  Priority effective_priority(Priority floor) const {
    if (params_.kind == VcpuKind::main) return fg_priority_;
    std::vector<Priority> pending;
    for (const auto& w : work_)
      if (w.initiator) pending.push_back(*w.initiator);
    return io_inherit(pending, floor);
  }

  sim::SimTime fg_executed() const noexcept { return fg_executed_; }
  sim::SimTime bg_executed() const noexcept { return bg_executed_; }

 private:
  friend class PcpuScheduler;

  VcpuParams params_;
  SporadicServer server_;
  Priority fg_priority_ = 0;
  std::deque<WorkItem> work_;
  sim::SimTime fg_executed_{};
  sim::SimTime bg_executed_{};
};

/// Event-driven scheduler for one physical CPU. Budgets are charged exactly
/// at dispatch boundaries; no tick quantisation.
class PcpuScheduler {
 public:
  PcpuScheduler(sim::Engine& engine, SandboxId sandbox) : engine_(&engine), sandbox_(sandbox) {}

  PcpuScheduler(const PcpuScheduler&) = delete;
  PcpuScheduler& operator=(const PcpuScheduler&) = delete;

  SandboxId sandbox() const noexcept { return sandbox_; }
  Priority background_floor() const noexcept { return kBackgroundFloor; }

  Vcpu& add_vcpu(const VcpuParams& p) {
    if (index_.count(p.id)) throw ConfigError("duplicate vcpu id " + std::to_string(p.id));
    index_[p.id] = vcpus_.size();
    vcpus_.emplace_back(p);
    assign_rms();
    return vcpus_.back();
  }

  /// Reassigns RMS priorities across this PCPU's Main VCPUs.
  void assign_rms() {
    std::vector<RmsInput> in;
    std::vector<std::size_t> which;
    for (std::size_t i = 0; i < vcpus_.size(); ++i) {
      if (vcpus_[i].kind() != VcpuKind::main) continue;
      in.push_back(RmsInput{vcpus_[i].id(), vcpus_[i].server().period()});
      which.push_back(i);
    }
    const auto prio = rms_assign(in);
    for (std::size_t k = 0; k < which.size(); ++k) vcpus_[which[k]].fg_priority_ = prio[k];
  }

  AdmissionReport admission() const {
    std::vector<double> u;
    for (const auto& v : vcpus_) u.push_back(v.utilization());
    return admit(u);
  }

  bool has_vcpu(VcpuId id) const { return index_.count(id) != 0; }
  const Vcpu& vcpu(VcpuId id) const { return vcpus_.at(lookup(id)); }
  const std::vector<Vcpu>& vcpus() const noexcept { return vcpus_; }

  std::optional<VcpuId> running() const { return running_; }
  Band running_band() const noexcept { return band_; }
  bool suspended() const noexcept { return suspended_; }

  void submit(VcpuId id, sim::SimTime work, std::function<void()> done = {},
              std::optional<Priority> initiator = std::nullopt) {
    vcpus_.at(lookup(id)).work_.push_back(WorkItem{work, std::move(done), initiator});
    reschedule();
  }

  /// Drops queued work of a VCPU that has not started (the running item, if
  /// any, is kept). Returns the number of dropped items.
  std::size_t discard_pending(VcpuId id) {
    auto& v = vcpus_.at(lookup(id));
    const bool keep_front = running_ && *running_ == id && !v.work_.empty();
    const std::size_t before = v.work_.size();
    v.work_.erase(v.work_.begin() + (keep_front ? 1 : 0), v.work_.end());
    reschedule();
    return before - v.work_.size();
  }

  /// A trapped or halted sandbox consumes no budget: its PCPU stops
  /// dispatching until resume().
  void suspend() {
    if (suspended_) return;
    suspended_ = true;
    reschedule();
  }

  void resume() {
    if (!suspended_) return;
    suspended_ = false;
    reschedule();
  }

  void reschedule() {
    if (in_resched_) {
      dirty_ = true;
      return;
    }
    in_resched_ = true;
    try {
      do {
        dirty_ = false;
        settle_running();
        apply_replenishments();
        choose();
      } while (dirty_);
    } catch (...) {
      in_resched_ = false;
      throw;
    }
    in_resched_ = false;
    arm_decision();
  }

 private:
  std::size_t lookup(VcpuId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error("unknown vcpu " + std::to_string(id));
    return it->second;
  }

  void trace(std::string type, std::string detail) {
    engine_->record(static_cast<std::int64_t>(sandbox_), std::move(type), std::move(detail));
  }

  void settle_running() {
    if (!running_) return;
    auto& v = vcpus_[lookup(*running_)];
    const sim::SimTime now = engine_->now();
    if (now > run_start_) {
      const sim::SimTime elapsed = now - run_start_;
      if (band_ == Band::foreground) {
        if (auto item = v.server_.account(run_start_, now)) arm_replenishment(item->at);
        v.fg_executed_ += elapsed;
        if (v.server_.budget().cycles == 0) trace("budget_exhausted", sim::fields("vcpu", v.id()));
      } else {
        v.bg_executed_ += elapsed;
      }
      if (v.work_.empty() || v.work_.front().remaining < elapsed)
        throw InvariantError("vcpu ran past its work item");
      v.work_.front().remaining -= elapsed;
      run_start_ = now;
    }
    std::vector<std::function<void()>> finished;
    while (!v.work_.empty() && v.work_.front().remaining.cycles == 0) {
      if (v.work_.front().done) finished.push_back(std::move(v.work_.front().done));
      v.work_.pop_front();
    }
    if (!finished.empty()) dirty_ = true;
    for (auto& f : finished) f();
  }

  void apply_replenishments() {
    const sim::SimTime now = engine_->now();
    for (auto& v : vcpus_) {
      const sim::SimTime added = v.server_.replenish_due(now);
      if (added.cycles > 0)
        trace("replenish", sim::fields("vcpu", v.id(), "amount", added, "budget", v.server_.budget()));
    }
  }

  void choose() {
    std::optional<Selection> sel;
    if (!suspended_) {
      std::vector<VcpuCandidate> cands;
      cands.reserve(vcpus_.size());
      for (const auto& v : vcpus_)
        cands.push_back(VcpuCandidate{v.id(), v.runnable(), v.server_.budget(), v.effective_priority(kBackgroundFloor)});
      sel = pick_next(cands, kBackgroundFloor);
    }
    if (running_ && sel && *running_ == sel->id && band_ == sel->band) return;

    if (running_) {
      const auto& cur = vcpus_[lookup(*running_)];
      std::string_view reason = "preempted";
      if (suspended_)
        reason = "suspended";
      else if (!cur.runnable())
        reason = "idle";
      else if (sel && sel->id == cur.id())
        reason = band_ == Band::foreground ? "exhausted" : "replenished";
      trace("vcpu_preempt", sim::fields("vcpu", cur.id(), "reason", reason));
      running_.reset();
    }
    if (sel) {
      const auto& next = vcpus_[lookup(sel->id)];
      running_ = sel->id;
      band_ = sel->band;
      run_start_ = engine_->now();
      trace("vcpu_dispatch", sim::fields("vcpu", sel->id, "band", to_string(sel->band), "budget", next.server_.budget()));
      if (next.work_.front().remaining.cycles == 0) dirty_ = true;
    }
  }

  void arm_decision() {
    if (!running_) return;
    const auto& v = vcpus_[lookup(*running_)];
    sim::SimTime d = v.work_.front().remaining;
    if (band_ == Band::foreground) d = std::min(d, v.server_.budget());
    arm_at(engine_->now() + d);
  }

  void arm_replenishment(sim::SimTime at) { arm_at(at); }

  void arm_at(sim::SimTime at) {
    if (!armed_.insert(at.cycles).second) return;
    engine_->schedule(at, sim::EventKind::timer, sandbox_, [this, at] {
      armed_.erase(at.cycles);
      reschedule();
    });
  }

  sim::Engine* engine_;
  SandboxId sandbox_;
  std::vector<Vcpu> vcpus_;
  std::map<VcpuId, std::size_t> index_;
  std::optional<VcpuId> running_;
  Band band_ = Band::foreground;
  sim::SimTime run_start_{};
  bool suspended_ = false;
  bool in_resched_ = false;
  bool dirty_ = false;
  std::set<std::uint64_t> armed_;
};

}  // namespace questv::sched
