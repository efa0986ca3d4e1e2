#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "questv/devices/nic.hpp"
#include "questv/interrupts/ioapic.hpp"
#include "questv/ipc/channel.hpp"
#include "questv/recovery/recovery.hpp"
#include "questv/sandbox/sandbox.hpp"
#include "questv/scenario/config.hpp"
#include "questv/sim/engine.hpp"

namespace questv::scenario {

/// One simulated machine built from a validated scenario: sandboxes and
/// their VCPUs, devices, drivers, channels, workloads and faults.
class Machine {
 public:
  explicit Machine(ScenarioConfig cfg)
      : cfg_(std::move(cfg)),
        engine_(cfg_.sim),
        mgr_(engine_, cfg_.sandboxes.size(), cfg_.layout, cfg_.costs),
        apic_(mgr_, cfg_.irq),
        chans_(mgr_, cfg_.ipc),
        nic_(mgr_, apic_, cfg_.nic),
        rec_(mgr_, apic_, nic_, chans_) {
    validate(cfg_);
    build();
  }

  Machine(const Machine&) = delete;
  Machine& operator=(const Machine&) = delete;

  const ScenarioConfig& config() const noexcept { return cfg_; }
  sim::Engine& engine() noexcept { return engine_; }
  const sim::Trace& trace() const noexcept { return engine_.trace(); }
  sandbox::SandboxManager& sandboxes() noexcept { return mgr_; }
  irq::IoApic& apic() noexcept { return apic_; }
  ipc::ChannelTable& channels() noexcept { return chans_; }
  dev::NicLayer& nic() noexcept { return nic_; }
  recovery::RecoveryManager& recovery() noexcept { return rec_; }

  /// Runs until every finite workload has finished and no recovery is in
  /// progress, or until the horizon. Returns true if the run completed
  /// before the horizon.
  bool run() {
    if (ran_) throw StateError("machine already ran");
    ran_ = true;
    if (pending_ == 0 && finite_ > 0) engine_.request_stop();
    engine_.advance_until(cfg_.sim.horizon);
    const bool complete = finite_ > 0 && pending_ == 0 && in_recovery_ == 0;
    engine_.record(sim::kHostSandbox, "run_end", sim::fields("reason", complete ? "complete" : "horizon"));
    return complete;
  }

 private:
  struct Flood {
    std::size_t index = 0;  // flow id
    IcmpFlood spec;
    std::uint32_t src = 0, dst = 0;
    std::vector<bool> replied;
    std::uint64_t replies = 0;
    std::uint64_t checks = 0;
    bool stopped = false;
    bool sending_done = false;
    bool done = false;
  };

  struct Trigger {
    ReplyTrigger when;
    recovery::FaultSpec spec;
    bool fired = false;
  };

  void build() {
    const auto n = cfg_.sandboxes.size();
    for (const auto& s : cfg_.sandboxes) {
      mgr_.monitor(s.id).policy = s.recovery;
      mgr_.sandbox(s.id).services = s.services;
    }
    for (const auto& v : cfg_.vcpus) {
      const auto [cap, period] = vcpu_budget(cfg_, v);
      mgr_.scheduler(v.sandbox).add_vcpu(sched::VcpuParams{v.id, v.kind, cap, period});
    }
    for (const auto& d : cfg_.devices) nic_.add_device(d.vector);
    for (const auto& d : cfg_.drivers) {
      std::optional<sched::Priority> prio;
      if (d.service_vcpu) prio = mgr_.scheduler(d.sandbox).vcpu(*d.service_vcpu).fg_priority();
      nic_.attach(d.sandbox, d.device, d.io_vcpu, prio);
    }
    for (const auto& v : cfg_.vifs) nic_.add_vif(v.sandbox, v.device, dev::parse_ip(v.ip), parse_mac(v.mac));
    for (const auto& c : cfg_.channels) chans_.create(c.a, c.b, c.is_private);
    for (const auto& s : cfg_.sandboxes)
      if (s.preemption_timeout.cycles > 0) mgr_.enable_preemption_timeout(s.id, s.preemption_timeout);
    for (std::size_t i = 0; i < n; ++i) mgr_.launch(static_cast<SandboxId>(i));

    nic_.set_reply_sink([this](const dev::IcmpPacket& reply, SandboxId) { on_reply(reply); });
    rec_.on_healthy([this](const recovery::RecoveryReport&) {
      if (in_recovery_ > 0) --in_recovery_;
      maybe_stop();
    });

    for (const auto& w : cfg_.workloads)
      std::visit([this](const auto& x) { start(x); }, w);
    for (const auto& f : cfg_.faults) add_fault(f);
  }

  void finished() {
    --pending_;
    maybe_stop();
  }

  void maybe_stop() {
    if (finite_ > 0 && pending_ == 0 && in_recovery_ == 0) engine_.request_stop();
  }

  void at(sim::SimTime t, sim::EventKind kind, sim::EntityId target, std::function<void()> fn) {
    engine_.schedule(t, kind, target, std::move(fn));
  }

  // ---- icmp-flood ----------------------------------------------------------

  void start(const IcmpFlood& w) {
    auto f = std::make_unique<Flood>();
    f->index = floods_.size();
    f->spec = w;
    f->src = dev::parse_ip(w.src_ip);
    f->dst = dev::parse_ip(w.dst_ip);
    f->replied.assign(w.count, false);
    ++finite_;
    ++pending_;
    Flood* p = f.get();
    floods_.push_back(std::move(f));
    if (w.count == 0) {
      p->done = true;
      --pending_;
      return;
    }
    at(w.start, sim::EventKind::workload_step, sim::kHostEntity, [this, p] { flood_send(*p, 0); });
  }

  void flood_send(Flood& f, std::uint64_t k) {
    if (f.stopped || k >= f.spec.count) {
      f.sending_done = true;
      flood_check_done(f);
      return;
    }
    const auto now = engine_.now();
    engine_.record(sim::kHostSandbox, "icmp_req",
                   sim::fields("flow", f.index, "seq", k, "dst", f.spec.dst_ip));
    dev::IcmpPacket pkt;
    pkt.kind = dev::IcmpPacket::Kind::request;
    pkt.seq = k;
    pkt.src_ip = f.src;
    pkt.dst_ip = f.dst;
    pkt.timestamp = now;
    pkt.flow = static_cast<std::uint32_t>(f.index);
    nic_.nic_rx(f.spec.device, pkt);
    ++f.checks;
    const auto timeout = f.spec.timeout.value_or(f.spec.interval);
    at(now + timeout, sim::EventKind::timer, sim::kHostEntity, [this, &f, k, now] {
      --f.checks;
      if (!f.replied[k])
        engine_.record(sim::kHostSandbox, "icmp_missed", sim::fields("flow", f.index, "seq", k, "sent", now));
      flood_check_done(f);
    });
    at(f.spec.start + f.spec.interval * (k + 1), sim::EventKind::workload_step, sim::kHostEntity,
       [this, &f, k] { flood_send(f, k + 1); });
  }

  void flood_check_done(Flood& f) {
    if (f.done || !f.sending_done || f.checks > 0) return;
    f.done = true;
    finished();
  }

  void on_reply(const dev::IcmpPacket& reply) {
    if (reply.flow >= floods_.size()) return;
    auto& f = *floods_[reply.flow];
    if (reply.seq >= f.replied.size() || f.replied[reply.seq]) return;
    f.replied[reply.seq] = true;
    ++f.replies;
    if (f.spec.stop_after_replies && f.replies >= *f.spec.stop_after_replies) f.stopped = true;
    for (auto& t : triggers_)
      if (!t.fired && t.when.flow == f.index && f.replies == t.when.replies) {
        t.fired = true;
        fire(t.spec);
      }
  }

  // ---- msg-stream ----------------------------------------------------------

  struct Stream {
    MsgStream spec;
    SandboxId receiver = 0;
    std::uint64_t sent = 0;
    bool sending = false;
    bool polling = false;
  };

  static std::vector<std::uint8_t> payload(std::uint64_t size, std::uint64_t k, std::uint64_t salt) {
    std::vector<std::uint8_t> out(size);
    for (std::uint64_t i = 0; i < size; ++i) out[i] = static_cast<std::uint8_t>(k * 131 + i * 7 + salt);
    return out;
  }

  void start(const MsgStream& w) {
    auto s = std::make_shared<Stream>();
    s->spec = w;
    s->receiver = chans_.channel(w.channel).peer(w.sender);
    ++finite_;
    ++pending_;
    if (w.start < w.stop) {
      at(w.start, sim::EventKind::workload_step, w.sender, [this, s] { stream_send(s, 0); });
      at(w.start, sim::EventKind::channel_poll, s->receiver, [this, s] { stream_poll(s, 0); });
    }
    at(std::max(w.start, w.stop), sim::EventKind::workload_step, sim::kHostEntity, [this] { finished(); });
  }

  void stream_send(const std::shared_ptr<Stream>& s, std::uint64_t k) {
    const auto& w = s->spec;
    if (!s->sending && mgr_.running(w.sender)) {
      s->sending = true;
      chans_.send(w.channel, w.sender, w.sender_vcpu, payload(w.size, s->sent++, w.channel), true,
                  [s](const ipc::SendResult&) { s->sending = false; });
    } else {
      engine_.record(w.sender, "msg_send_skipped",
                     sim::fields("chan", w.channel, "bytes", w.size, "reason", s->sending ? "busy" : "down"));
    }
    const auto next = w.start + w.send_interval * (k + 1);
    if (next < w.stop) at(next, sim::EventKind::workload_step, w.sender, [this, s, k] { stream_send(s, k + 1); });
  }

  void stream_poll(const std::shared_ptr<Stream>& s, std::uint64_t k) {
    const auto& w = s->spec;
    if (!s->polling && mgr_.running(s->receiver)) {
      s->polling = true;
      stream_poll_once(s);
    }
    const auto next = w.start + w.recv_interval * (k + 1);
    if (next < w.stop) at(next, sim::EventKind::channel_poll, s->receiver, [this, s, k] { stream_poll(s, k + 1); });
  }

  void stream_poll_once(const std::shared_ptr<Stream>& s) {
    chans_.poll_recv(s->spec.channel, s->receiver, s->spec.receiver_vcpu, [this, s](const ipc::PollResult& r) {
      // A started multi-chunk message is drained in one go.
      if (r.status == ipc::PollStatus::chunk) return stream_poll_once(s);
      s->polling = false;
    });
  }

  // ---- msg-bench -----------------------------------------------------------

  struct Bench {
    MsgBench spec;
    SandboxId receiver = 0;
    std::size_t size_index = 0;
    std::uint64_t trial = 0;
    std::mt19937_64 phase;
    bool sent = false, received = false;
  };

  void start(const MsgBench& w) {
    auto b = std::make_shared<Bench>();
    b->spec = w;
    b->receiver = chans_.channel(w.channel).peer(w.sender);
    b->phase.seed(w.phase_seed);
    ++finite_;
    ++pending_;
    bench_schedule(b);
  }

  void bench_schedule(const std::shared_ptr<Bench>& b) {
    // Stratified phase: trial k starts in the k-th of `trials` equal slices
    // of the spacing interval.
    const auto spacing = b->spec.spacing.cycles;
    const auto trials = b->spec.trials;
    const std::uint64_t lo = spacing * b->trial / trials;
    const std::uint64_t hi = std::max(lo + 1, spacing * (b->trial + 1) / trials);
    std::uniform_int_distribution<std::uint64_t> theta(lo, hi - 1);
    const std::uint64_t boundary = (engine_.now().cycles / spacing + 1) * spacing;
    at(sim::SimTime{boundary + theta(b->phase)}, sim::EventKind::workload_step, b->spec.sender,
       [this, b] { bench_trial(b); });
  }

  void bench_trial(const std::shared_ptr<Bench>& b) {
    const auto& w = b->spec;
    const auto size = w.sizes[b->size_index];
    engine_.record(sim::kHostSandbox, "bench_trial", sim::fields("chan", w.channel, "size", size, "trial", b->trial));
    b->sent = b->received = false;
    chans_.send(w.channel, w.sender, w.sender_vcpu, payload(size, b->trial, size), false,
                [this, b](const ipc::SendResult&) {
                  b->sent = true;
                  bench_next(b);
                });
    chans_.receive(w.channel, b->receiver, w.receiver_vcpu, [this, b](const ipc::PollResult&) {
      b->received = true;
      bench_next(b);
    });
  }

  void bench_next(const std::shared_ptr<Bench>& b) {
    if (!b->sent || !b->received) return;
    if (++b->trial == b->spec.trials) {
      b->trial = 0;
      if (++b->size_index == b->spec.sizes.size()) return finished();
      // Same phase sequence for every size.
      b->phase.seed(b->spec.phase_seed);
    }
    bench_schedule(b);
  }

  // ---- forkwait ------------------------------------------------------------

  void start(const ForkWait& w) {
    ++finite_;
    ++pending_;
    if (w.iterations == 0) return finished();
    forkwait_step(w, 0);
  }

  // One iteration: fork (syscall entry/exit plus address-space creation),
  // then waitpid (syscall entry/exit plus teardown of the child).
  void forkwait_step(const ForkWait& w, std::uint64_t i) {
    auto& sch = mgr_.scheduler(w.sandbox);
    sch.submit(w.vcpu, w.syscall_cost * 2 + w.create_cost, [this, w, i] {
      mgr_.scheduler(w.sandbox).submit(w.vcpu, w.syscall_cost * 2 + w.destroy_cost, [this, w, i] {
        engine_.record(w.sandbox, "forkwait_iter", sim::fields("i", i));
        if (i + 1 == w.iterations) return finished();
        forkwait_step(w, i + 1);
      });
    });
  }

  // ---- periodic ------------------------------------------------------------

  void start(const Periodic& w) {
    ++finite_;
    ++pending_;
    if (w.jobs == 0) return finished();
    for (std::uint64_t k = 0; k < w.jobs; ++k) {
      const auto release = w.offset + w.period * k;
      auto completed = std::make_shared<bool>(false);
      at(release, sim::EventKind::workload_step, w.sandbox, [this, w, k, release, completed] {
        engine_.record(w.sandbox, "job_release", sim::fields("vcpu", w.vcpu, "job", k));
        mgr_.scheduler(w.sandbox).submit(w.vcpu, w.wcet, [this, w, k, release, completed] {
          *completed = true;
          engine_.record(w.sandbox, "job_complete",
                         sim::fields("vcpu", w.vcpu, "job", k, "response", engine_.now() - release));
        });
      });
      at(release + w.period, sim::EventKind::timer, w.sandbox, [this, w, k, completed] {
        if (!*completed) engine_.record(w.sandbox, "deadline_miss", sim::fields("vcpu", w.vcpu, "job", k));
        if (k + 1 == w.jobs) finished();
      });
    }
  }

  // ---- cpu-hog -------------------------------------------------------------

  void start(const CpuHog& w) { mgr_.scheduler(w.sandbox).submit(w.vcpu, cfg_.sim.horizon); }

  // ---- faults --------------------------------------------------------------

  void add_fault(const FaultConfig& f) {
    recovery::FaultSpec spec;
    spec.sandbox = f.sandbox;
    spec.component = *nic_.find_driver(f.sandbox, f.device);
    spec.mode = f.mode;
    for (const auto& b : f.blast)
      spec.blast.push_back(dev::BlastWrite{mem::Gpa{resolve_blast_target(b.target, mgr_.layout(), cfg_.channels)},
                                           std::vector<std::uint8_t>(b.length, b.fill)});
    if (f.at) {
      at(*f.at, sim::EventKind::fault_inject, f.sandbox, [this, spec] { inject(spec); });
    } else {
      triggers_.push_back(Trigger{*f.after_replies, spec, false});
    }
  }

  void fire(const recovery::FaultSpec& spec) {
    at(engine_.now(), sim::EventKind::fault_inject, spec.sandbox, [this, spec] { inject(spec); });
  }

  void inject(const recovery::FaultSpec& spec) {
    if (mgr_.running(spec.sandbox)) ++in_recovery_;
    rec_.inject(spec);
  }

  ScenarioConfig cfg_;
  sim::Engine engine_;
  sandbox::SandboxManager mgr_;
  irq::IoApic apic_;
  ipc::ChannelTable chans_;
  dev::NicLayer nic_;
  recovery::RecoveryManager rec_;
  std::vector<std::unique_ptr<Flood>> floods_;
  std::vector<Trigger> triggers_;
  std::size_t finite_ = 0;
  std::size_t pending_ = 0;
  std::size_t in_recovery_ = 0;
  bool ran_ = false;
};

}  // namespace questv::scenario
