#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "questv/scenario/config.hpp"
#include "questv/scenario/machine.hpp"
#include "questv/scenario/metrics.hpp"

namespace questv::scenario {

struct ArmResult {
  std::string name;
  ScenarioConfig config;
  std::vector<sim::TraceRecord> records;
  json metrics;
  bool completed = false;
};

struct DemoResult {
  std::string demo;
  std::vector<ArmResult> arms;

  const ArmResult& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.name == name) return a;
    throw Error("demo " + demo + " has no arm " + name);
  }
};

inline const std::vector<std::string>& builtin_names() {
  static const std::vector<std::string> names = {"recovery-local", "recovery-remote", "isolation", "msgbench",
                                                 "interrupts",     "forkwait",        "shared-nic"};
  return names;
}

namespace builtin {

inline sim::SimTime ms(double v) { return sim::cycles_from_millis(v, sim::SimConfig{}); }

inline ScenarioConfig base(const std::string& name, std::size_t n, std::uint64_t seed) {
  ScenarioConfig c;
  c.name = name;
  c.sim.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    SandboxSpec s;
    s.id = static_cast<SandboxId>(i);
    c.sandboxes.push_back(s);
  }
  return c;
}

inline void main_vcpu(ScenarioConfig& c, SandboxId s, sched::VcpuId id, double c_ms, double t_ms) {
  VcpuSpec v;
  v.id = id;
  v.sandbox = s;
  v.kind = sched::VcpuKind::main;
  v.c_max = ms(c_ms);
  v.period = ms(t_ms);
  c.vcpus.push_back(v);
}

/// Main VCPU 0 (2 ms / 10 ms), I/O VCPU 1 (10 %) and a driver for device 0.
inline void nic_sandbox(ScenarioConfig& c, SandboxId s) {
  main_vcpu(c, s, 0, 2, 10);
  VcpuSpec io;
  io.id = 1;
  io.sandbox = s;
  io.kind = sched::VcpuKind::io;
  io.bandwidth = 0.1;
  io.device = 0;
  c.vcpus.push_back(io);
  c.drivers.push_back(DriverSpec{s, 0, 1, 0});
}

inline std::string mac_of(SandboxId s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "02:00:00:00:00:%02x", static_cast<unsigned>(s + 1));
  return buf;
}

inline IcmpFlood flood(const std::string& dst, double interval_ms, std::uint64_t count) {
  IcmpFlood f;
  f.device = 0;
  f.dst_ip = dst;
  f.interval = ms(interval_ms);
  f.count = count;
  return f;
}

inline ScenarioConfig recovery(recovery::Mode mode, std::uint64_t seed) {
  auto c = base("recovery", 4, seed);
  c.devices.push_back(DeviceSpec{0, 0x21});
  for (SandboxId s = 0; s < 4; ++s) nic_sandbox(c, s);
  c.vifs.push_back(VifSpec{0, 0, "10.0.0.1", mac_of(0)});
  c.sandboxes[0].services = {"icmp-echo"};
  c.sandboxes[0].recovery.mode = mode;
  c.sandboxes[0].recovery.diversity = mode == recovery::Mode::local;
  auto f = flood("10.0.0.1", 500, 1000);
  f.stop_after_replies = 50;
  c.workloads.push_back(f);
  FaultConfig fault;
  fault.sandbox = 0;
  fault.device = 0;
  fault.after_replies = ReplyTrigger{0, 20};
  c.faults.push_back(fault);
  return c;
}

inline std::vector<std::pair<std::string, ScenarioConfig>> recovery_arms(recovery::Mode mode, std::uint64_t seed) {
  auto online = recovery(mode, seed);
  online.name = mode == recovery::Mode::local ? "recovery-local" : "recovery-remote";
  auto reboot = recovery(mode, seed);
  reboot.name = online.name + "/reboot";
  reboot.faults[0].mode = recovery::Mode::reboot;
  return {{std::string(to_string(mode)), online}, {"reboot", reboot}};
}

inline ScenarioConfig isolation(std::uint64_t seed) {
  auto c = base("isolation", 4, seed);
  c.devices.push_back(DeviceSpec{0, 0x21});
  nic_sandbox(c, 0);
  for (SandboxId s = 1; s < 4; ++s) main_vcpu(c, s, 0, 2, 10);
  c.vifs.push_back(VifSpec{0, 0, "10.0.0.1", mac_of(0)});
  c.sandboxes[0].services = {"icmp-echo", "msg-recv"};
  c.sandboxes[1].services = {"msg-send"};
  const double recv_ms[] = {100, 800, 1000};
  const SandboxId peers[] = {0, 2, 3};
  for (ipc::ChannelId ch = 0; ch < 3; ++ch) {
    c.channels.push_back(ChannelSpec{ch, 1, peers[ch], true});
    MsgStream w;
    w.channel = ch;
    w.sender = 1;
    w.sender_vcpu = 0;
    w.receiver_vcpu = 0;
    w.size = 64;
    w.send_interval = ms(50);
    w.recv_interval = ms(recv_ms[ch]);
    w.stop = ms(40000);
    c.workloads.push_back(w);
  }
  c.workloads.push_back(flood("10.0.0.1", 500, 80));
  FaultConfig fault;
  fault.sandbox = 0;
  fault.device = 0;
  fault.after_replies = ReplyTrigger{0, 20};
  fault.blast = {BlastSpec{"channel:0", mem::kPageSize, 0xFF}, BlastSpec{"kernel:1+0x100000", 2 * mem::kPageSize, 0xFF},
                 BlastSpec{"kernel:2+0x100000", 2 * mem::kPageSize, 0xFF},
                 BlastSpec{"kernel:3+0x100000", 2 * mem::kPageSize, 0xFF},
                 BlastSpec{"ept-data:0", mem::kPageSize, 0xFF}};
  c.faults.push_back(fault);
  return c;
}

inline std::vector<std::uint64_t> bench_sizes() {
  std::vector<std::uint64_t> s;
  for (int e = 6; e <= 20; ++e) s.push_back(std::uint64_t{1} << e);
  return s;
}

/// Two sandboxes, sender and receiver threads on VCPU 1 of each. VCPU 0
/// runs a CPU hog. In Hi the hog has a longer period than the message VCPU;
/// in Low it has the shorter period (0.4 ms every 1 ms) and preempts it.
inline ScenarioConfig msgbench(bool hi, bool paper_scale, std::uint64_t seed) {
  auto c = base(hi ? "msgbench/hi" : "msgbench/low", 2, seed);
  for (SandboxId s = 0; s < 2; ++s) {
    if (hi) {
      main_vcpu(c, s, 0, 6, 20);
      main_vcpu(c, s, 1, 5, 10);
    } else {
      main_vcpu(c, s, 0, 0.4, 1);
      main_vcpu(c, s, 1, 8, 20);
    }
    c.workloads.push_back(CpuHog{s, 0});
  }
  c.channels.push_back(ChannelSpec{0, 0, 1, true});
  MsgBench b;
  b.channel = 0;
  b.sender = 0;
  b.sender_vcpu = 1;
  b.receiver_vcpu = 1;
  b.sizes = bench_sizes();
  b.trials = paper_scale ? 5000 : 200;
  b.spacing = ms(20);
  c.workloads.push_back(b);
  c.sim.horizon = b.spacing * (b.sizes.size() * b.trials + 2) + ms(1000);
  return c;
}

inline ScenarioConfig interrupts(std::uint64_t seed) {
  auto c = base("interrupts", 4, seed);
  c.devices.push_back(DeviceSpec{0, 0x21});
  for (SandboxId s = 0; s < 4; ++s) nic_sandbox(c, s);
  c.vifs.push_back(VifSpec{0, 0, "10.0.0.1", mac_of(0)});
  c.workloads.push_back(flood("10.0.0.1", 3, 30000));
  return c;
}

inline ScenarioConfig forkwait(std::uint64_t seed) {
  auto c = base("forkwait", 1, seed);
  main_vcpu(c, 0, 0, 9, 10);
  ForkWait w;
  w.sandbox = 0;
  w.vcpu = 0;
  w.iterations = 40000;
  c.workloads.push_back(w);
  return c;
}

inline ScenarioConfig shared_nic(std::uint64_t seed) {
  auto c = base("shared-nic", 2, seed);
  c.devices.push_back(DeviceSpec{0, 0x21});
  for (SandboxId s = 0; s < 2; ++s) nic_sandbox(c, s);
  c.vifs.push_back(VifSpec{0, 0, "10.0.0.1", mac_of(0)});
  c.vifs.push_back(VifSpec{1, 0, "10.0.0.2", mac_of(1)});
  c.workloads.push_back(flood("10.0.0.1", 3, 30000));
  auto second = flood("10.0.0.2", 3, 30000);
  second.start = ms(1.5);
  c.workloads.push_back(second);
  return c;
}

}  // namespace builtin

/// Scenario configurations for each arm of a built-in experiment.
inline std::vector<std::pair<std::string, ScenarioConfig>> builtin_arms(const std::string& name, std::uint64_t seed,
                                                                       bool paper_scale = false) {
  if (name == "recovery-local") return builtin::recovery_arms(recovery::Mode::local, seed);
  if (name == "recovery-remote") return builtin::recovery_arms(recovery::Mode::remote, seed);
  if (name == "isolation") return {{"main", builtin::isolation(seed)}};
  if (name == "msgbench")
    return {{"hi", builtin::msgbench(true, paper_scale, seed)}, {"low", builtin::msgbench(false, paper_scale, seed)}};
  if (name == "interrupts") return {{"main", builtin::interrupts(seed)}};
  if (name == "forkwait") return {{"main", builtin::forkwait(seed)}};
  if (name == "shared-nic") return {{"main", builtin::shared_nic(seed)}};
  throw ConfigError("unknown demo '" + name + "'");
}

inline ArmResult run_arm(const std::string& arm, const ScenarioConfig& cfg) {
  ArmResult r;
  r.name = arm;
  r.config = cfg;
  Machine m(cfg);
  r.completed = m.run();
  r.records = m.trace().records();
  r.metrics = compute_metrics(r.records);
  return r;
}

inline DemoResult run_demo(const std::string& name, std::uint64_t seed = 1, bool paper_scale = false) {
  DemoResult d;
  d.demo = name;
  for (const auto& [arm, cfg] : builtin_arms(name, seed, paper_scale)) d.arms.push_back(run_arm(arm, cfg));
  return d;
}

}  // namespace questv::scenario
