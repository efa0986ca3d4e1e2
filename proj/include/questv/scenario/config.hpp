#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "questv/devices/nic.hpp"
#include "questv/errors.hpp"
#include "questv/interrupts/ioapic.hpp"
#include "questv/ipc/channel.hpp"
#include "questv/memory/layout.hpp"
#include "questv/recovery/policy.hpp"
#include "questv/sandbox/cost_model.hpp"
#include "questv/sched/pcpu.hpp"
#include "questv/sched/policy.hpp"
#include "questv/sim/time.hpp"

namespace questv::scenario {

using nlohmann::json;

struct SandboxSpec {
  SandboxId id = 0;
  std::vector<std::string> services;
  recovery::RecoveryPolicy recovery;
  sim::SimTime preemption_timeout{};  // 0 = off
  bool operator==(const SandboxSpec&) const = default;
};

struct DeviceSpec {
  dev::DeviceId id = 0;
  irq::Vector vector = 0x21;
  bool operator==(const DeviceSpec&) const = default;
};

struct VcpuSpec {
  sched::VcpuId id = 0;
  SandboxId sandbox = 0;
  sched::VcpuKind kind = sched::VcpuKind::main;
  std::optional<sim::SimTime> c_max;  // main
  std::optional<sim::SimTime> period;  // main; io defaults to the shortest main period
  std::optional<double> bandwidth;     // io
  std::optional<dev::DeviceId> device;  // io
  bool operator==(const VcpuSpec&) const = default;
};

struct DriverSpec {
  SandboxId sandbox = 0;
  dev::DeviceId device = 0;
  sched::VcpuId io_vcpu = 0;
  std::optional<sched::VcpuId> service_vcpu;
  bool operator==(const DriverSpec&) const = default;
};

struct VifSpec {
  SandboxId sandbox = 0;
  dev::DeviceId device = 0;
  std::string ip;
  std::string mac;
  bool operator==(const VifSpec&) const = default;
};

struct ChannelSpec {
  ipc::ChannelId id = 0;
  SandboxId a = 0;
  SandboxId b = 0;
  bool is_private = false;
  bool operator==(const ChannelSpec&) const = default;
};

struct IcmpFlood {
  dev::DeviceId device = 0;
  std::string dst_ip;
  std::string src_ip = "192.168.0.100";
  sim::SimTime start{};
  sim::SimTime interval{};
  std::uint64_t count = 0;
  std::optional<std::uint64_t> stop_after_replies;
  std::optional<sim::SimTime> timeout;  // defaults to interval
  bool operator==(const IcmpFlood&) const = default;
};

/// Periodic one-way stream: the sender tries every send interval and skips
/// when the mailbox is still full; the receiver polls every receive interval.
struct MsgStream {
  ipc::ChannelId channel = 0;
  SandboxId sender = 0;
  sched::VcpuId sender_vcpu = 0;
  sched::VcpuId receiver_vcpu = 0;
  std::uint64_t size = 64;
  sim::SimTime start{};
  sim::SimTime send_interval{};
  sim::SimTime recv_interval{};
  sim::SimTime stop{};
  bool operator==(const MsgStream&) const = default;
};

/// Transfer-time benchmark: for each size, `trials` messages, each started
/// at the next spacing boundary plus a seeded phase offset. Trial k draws its
/// offset from the k-th of `trials` equal slices of the spacing; the phase
/// sequence restarts for every size.
struct MsgBench {
  ipc::ChannelId channel = 0;
  SandboxId sender = 0;
  sched::VcpuId sender_vcpu = 0;
  sched::VcpuId receiver_vcpu = 0;
  std::vector<std::uint64_t> sizes;
  std::uint64_t trials = 200;
  sim::SimTime spacing{};
  std::uint64_t phase_seed = 7;
  bool operator==(const MsgBench&) const = default;
};

struct ForkWait {
  SandboxId sandbox = 0;
  sched::VcpuId vcpu = 0;
  std::uint64_t iterations = 0;
  sim::SimTime syscall_cost{150};
  sim::SimTime create_cost{20000};
  sim::SimTime destroy_cost{10000};
  bool operator==(const ForkWait&) const = default;
};

struct Periodic {
  SandboxId sandbox = 0;
  sched::VcpuId vcpu = 0;
  sim::SimTime offset{};
  sim::SimTime period{};
  sim::SimTime wcet{};
  std::uint64_t jobs = 0;
  bool operator==(const Periodic&) const = default;
};

struct CpuHog {
  SandboxId sandbox = 0;
  sched::VcpuId vcpu = 0;
  bool operator==(const CpuHog&) const = default;
};

using Workload = std::variant<IcmpFlood, MsgStream, MsgBench, ForkWait, Periodic, CpuHog>;

/// Blast target: "0x..." absolute, or "kernel:N", "channel:N", "ept-data:N",
/// "shared", each optionally followed by "+offset".
struct BlastSpec {
  std::string target;
  std::uint64_t length = mem::kPageSize;
  std::uint8_t fill = 0xFF;
  bool operator==(const BlastSpec&) const = default;
};

struct ReplyTrigger {
  std::size_t flow = 0;  // index of the icmp-flood workload
  std::uint64_t replies = 0;
  bool operator==(const ReplyTrigger&) const = default;
};

struct FaultConfig {
  SandboxId sandbox = 0;
  dev::DeviceId device = 0;
  std::optional<sim::SimTime> at;
  std::optional<ReplyTrigger> after_replies;
  std::optional<recovery::Mode> mode;
  std::vector<BlastSpec> blast;
  bool operator==(const FaultConfig&) const = default;
};

struct ScenarioConfig {
  std::string name = "scenario";
  sim::SimConfig sim;
  mem::LayoutSizes layout;
  sandbox::CostModel costs;
  irq::IrqConfig irq;
  ipc::IpcConfig ipc;
  dev::NicConfig nic;
  std::vector<SandboxSpec> sandboxes;
  std::vector<DeviceSpec> devices;
  std::vector<VcpuSpec> vcpus;
  std::vector<DriverSpec> drivers;
  std::vector<VifSpec> vifs;
  std::vector<ChannelSpec> channels;
  std::vector<Workload> workloads;
  std::vector<FaultConfig> faults;

  bool operator==(const ScenarioConfig&) const = default;
};

// ---- helpers ---------------------------------------------------------------

inline dev::Mac parse_mac(const std::string& s) {
  dev::Mac m{};
  unsigned v[6];
  char tail;
  if (std::sscanf(s.c_str(), "%2x:%2x:%2x:%2x:%2x:%2x%c", &v[0], &v[1], &v[2], &v[3], &v[4], &v[5], &tail) != 6)
    throw ConfigError("bad MAC address '" + s + "'");
  for (int i = 0; i < 6; ++i) m[i] = static_cast<std::uint8_t>(v[i]);
  return m;
}

namespace detail {

inline std::string where(const std::string& ctx) { return ctx.empty() ? "" : ctx + ": "; }

template <class T>
T get(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key)) throw ConfigError(where(ctx) + "missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where(ctx) + "field '" + key + "' has the wrong type");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& ctx) {
  if (!j.contains(key)) return fallback;
  return get<T>(j, key, ctx);
}

/// Time fields are `<name>_cycles` (canonical) or `<name>_ms`.
inline std::optional<sim::SimTime> time_opt(const json& j, const std::string& name, const sim::SimConfig& cfg,
                                            const std::string& ctx) {
  const std::string kc = name + "_cycles", km = name + "_ms";
  if (j.contains(kc) && j.contains(km)) throw ConfigError(where(ctx) + "give either " + kc + " or " + km);
  if (j.contains(kc)) return sim::SimTime{get<std::uint64_t>(j, kc.c_str(), ctx)};
  if (j.contains(km)) {
    const double ms = get<double>(j, km.c_str(), ctx);
    if (ms < 0) throw ConfigError(where(ctx) + km + " must be non-negative");
    return sim::cycles_from_millis(ms, cfg);
  }
  return std::nullopt;
}

inline sim::SimTime time_req(const json& j, const std::string& name, const sim::SimConfig& cfg, const std::string& ctx) {
  auto t = time_opt(j, name, cfg, ctx);
  if (!t) throw ConfigError(where(ctx) + "missing field '" + name + "_cycles' (or '" + name + "_ms')");
  return *t;
}

inline sim::SimTime time_or(const json& j, const std::string& name, sim::SimTime fallback, const sim::SimConfig& cfg,
                            const std::string& ctx) {
  return time_opt(j, name, cfg, ctx).value_or(fallback);
}

inline void put_time(json& j, const std::string& name, sim::SimTime t) { j[name + "_cycles"] = t.cycles; }

inline std::string ctx_of(const char* what, std::size_t i) { return std::string(what) + "[" + std::to_string(i) + "]"; }

}  // namespace detail

// ---- parsing ---------------------------------------------------------------

inline Workload workload_from_json(const json& j, const sim::SimConfig& sc, const std::string& ctx) {
  using namespace detail;
  const auto type = get<std::string>(j, "type", ctx);
  if (type == "icmp-flood") {
    IcmpFlood w;
    w.device = get_or<dev::DeviceId>(j, "device", 0, ctx);
    w.dst_ip = get<std::string>(j, "dst_ip", ctx);
    w.src_ip = get_or<std::string>(j, "src_ip", w.src_ip, ctx);
    w.start = time_or(j, "start", {}, sc, ctx);
    w.interval = time_req(j, "interval", sc, ctx);
    w.count = get<std::uint64_t>(j, "count", ctx);
    if (j.contains("stop_after_replies")) w.stop_after_replies = get<std::uint64_t>(j, "stop_after_replies", ctx);
    w.timeout = time_opt(j, "timeout", sc, ctx);
    return w;
  }
  if (type == "msg-stream") {
    MsgStream w;
    w.channel = get<ipc::ChannelId>(j, "channel", ctx);
    w.sender = get<SandboxId>(j, "sender", ctx);
    w.sender_vcpu = get<sched::VcpuId>(j, "sender_vcpu", ctx);
    w.receiver_vcpu = get<sched::VcpuId>(j, "receiver_vcpu", ctx);
    w.size = get_or<std::uint64_t>(j, "size", w.size, ctx);
    w.start = time_or(j, "start", {}, sc, ctx);
    w.send_interval = time_req(j, "send_interval", sc, ctx);
    w.recv_interval = time_req(j, "recv_interval", sc, ctx);
    w.stop = time_req(j, "stop", sc, ctx);
    return w;
  }
  if (type == "msg-bench") {
    MsgBench w;
    w.channel = get<ipc::ChannelId>(j, "channel", ctx);
    w.sender = get<SandboxId>(j, "sender", ctx);
    w.sender_vcpu = get<sched::VcpuId>(j, "sender_vcpu", ctx);
    w.receiver_vcpu = get<sched::VcpuId>(j, "receiver_vcpu", ctx);
    w.sizes = get<std::vector<std::uint64_t>>(j, "sizes", ctx);
    w.trials = get_or<std::uint64_t>(j, "trials", w.trials, ctx);
    w.spacing = time_req(j, "spacing", sc, ctx);
    w.phase_seed = get_or<std::uint64_t>(j, "phase_seed", w.phase_seed, ctx);
    return w;
  }
  if (type == "forkwait") {
    ForkWait w;
    w.sandbox = get<SandboxId>(j, "sandbox", ctx);
    w.vcpu = get<sched::VcpuId>(j, "vcpu", ctx);
    w.iterations = get<std::uint64_t>(j, "iterations", ctx);
    w.syscall_cost = time_or(j, "syscall_cost", w.syscall_cost, sc, ctx);
    w.create_cost = time_or(j, "create_cost", w.create_cost, sc, ctx);
    w.destroy_cost = time_or(j, "destroy_cost", w.destroy_cost, sc, ctx);
    return w;
  }
  if (type == "periodic") {
    Periodic w;
    w.sandbox = get<SandboxId>(j, "sandbox", ctx);
    w.vcpu = get<sched::VcpuId>(j, "vcpu", ctx);
    w.offset = time_or(j, "offset", {}, sc, ctx);
    w.period = time_req(j, "period", sc, ctx);
    w.wcet = time_req(j, "wcet", sc, ctx);
    w.jobs = get<std::uint64_t>(j, "jobs", ctx);
    return w;
  }
  if (type == "cpu-hog") {
    CpuHog w;
    w.sandbox = get<SandboxId>(j, "sandbox", ctx);
    w.vcpu = get<sched::VcpuId>(j, "vcpu", ctx);
    return w;
  }
  throw ConfigError(where(ctx) + "unknown workload type '" + type + "'");
}

inline json workload_to_json(const Workload& w) {
  using detail::put_time;
  json j;
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, IcmpFlood>) {
          j["type"] = "icmp-flood";
          j["device"] = x.device;
          j["dst_ip"] = x.dst_ip;
          j["src_ip"] = x.src_ip;
          put_time(j, "start", x.start);
          put_time(j, "interval", x.interval);
          j["count"] = x.count;
          if (x.stop_after_replies) j["stop_after_replies"] = *x.stop_after_replies;
          if (x.timeout) put_time(j, "timeout", *x.timeout);
        } else if constexpr (std::is_same_v<T, MsgStream>) {
          j["type"] = "msg-stream";
          j["channel"] = x.channel;
          j["sender"] = x.sender;
          j["sender_vcpu"] = x.sender_vcpu;
          j["receiver_vcpu"] = x.receiver_vcpu;
          j["size"] = x.size;
          put_time(j, "start", x.start);
          put_time(j, "send_interval", x.send_interval);
          put_time(j, "recv_interval", x.recv_interval);
          put_time(j, "stop", x.stop);
        } else if constexpr (std::is_same_v<T, MsgBench>) {
          j["type"] = "msg-bench";
          j["channel"] = x.channel;
          j["sender"] = x.sender;
          j["sender_vcpu"] = x.sender_vcpu;
          j["receiver_vcpu"] = x.receiver_vcpu;
          j["sizes"] = x.sizes;
          j["trials"] = x.trials;
          put_time(j, "spacing", x.spacing);
          j["phase_seed"] = x.phase_seed;
        } else if constexpr (std::is_same_v<T, ForkWait>) {
          j["type"] = "forkwait";
          j["sandbox"] = x.sandbox;
          j["vcpu"] = x.vcpu;
          j["iterations"] = x.iterations;
          put_time(j, "syscall_cost", x.syscall_cost);
          put_time(j, "create_cost", x.create_cost);
          put_time(j, "destroy_cost", x.destroy_cost);
        } else if constexpr (std::is_same_v<T, Periodic>) {
          j["type"] = "periodic";
          j["sandbox"] = x.sandbox;
          j["vcpu"] = x.vcpu;
          put_time(j, "offset", x.offset);
          put_time(j, "period", x.period);
          put_time(j, "wcet", x.wcet);
          j["jobs"] = x.jobs;
        } else {
          j["type"] = "cpu-hog";
          j["sandbox"] = x.sandbox;
          j["vcpu"] = x.vcpu;
        }
      },
      w);
  return j;
}

inline ScenarioConfig from_json(const json& root) {
  using namespace detail;
  if (!root.is_object()) throw ConfigError("scenario must be a JSON object");
  ScenarioConfig c;
  c.name = get_or<std::string>(root, "name", c.name, "");

  if (root.contains("sim")) {
    const auto& s = root["sim"];
    c.sim.cycles_per_second = get_or<std::uint64_t>(s, "cycles_per_second", c.sim.cycles_per_second, "sim");
    c.sim.seed = get_or<std::uint64_t>(s, "seed", c.sim.seed, "sim");
    if (c.sim.cycles_per_second == 0) throw ConfigError("sim: cycles_per_second must be > 0");
    c.sim.horizon = time_or(s, "horizon", c.sim.horizon, c.sim, "sim");
    try {
      c.sim.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("sim: ") + e.what());
    }
  }
  const auto& sc = c.sim;

  if (root.contains("layout")) {
    const auto& l = root["layout"];
    c.layout.host_bytes = get_or<std::uint64_t>(l, "host_bytes", c.layout.host_bytes, "layout");
    c.layout.bios_bytes = get_or<std::uint64_t>(l, "bios_bytes", c.layout.bios_bytes, "layout");
    c.layout.kernel_bytes = get_or<std::uint64_t>(l, "kernel_bytes", c.layout.kernel_bytes, "layout");
    c.layout.shared_bytes = get_or<std::uint64_t>(l, "shared_bytes", c.layout.shared_bytes, "layout");
    c.layout.ept_data_bytes = get_or<std::uint64_t>(l, "ept_data_bytes", c.layout.ept_data_bytes, "layout");
  }
  if (root.contains("costs")) {
    const auto& k = root["costs"];
    auto cyc = [&](const char* key, sim::SimTime& field) {
      field = sim::SimTime{get_or<std::uint64_t>(k, key, field.cycles, "costs")};
    };
    cyc("vm_exit", c.costs.vm_exit);
    cyc("vm_enter", c.costs.vm_enter);
    cyc("driver_switch", c.costs.driver_switch);
    cyc("ipi_round_trip", c.costs.ipi_round_trip);
    cyc("driver_reinit", c.costs.driver_reinit);
    cyc("network_reinit", c.costs.network_reinit);
    cyc("reboot", c.costs.reboot);
  }
  if (root.contains("irq")) {
    const auto& k = root["irq"];
    c.irq.delivery_latency = time_or(k, "delivery_latency", c.irq.delivery_latency, sc, "irq");
    c.irq.demux_cost = time_or(k, "demux_cost", c.irq.demux_cost, sc, "irq");
  }
  if (root.contains("ipc")) {
    const auto& k = root["ipc"];
    c.ipc.copy_bytes_per_cycle = get_or<std::uint64_t>(k, "copy_bytes_per_cycle", c.ipc.copy_bytes_per_cycle, "ipc");
    c.ipc.poll_cost = time_or(k, "poll_cost", c.ipc.poll_cost, sc, "ipc");
    if (c.ipc.copy_bytes_per_cycle == 0) throw ConfigError("ipc: copy_bytes_per_cycle must be > 0");
  }
  if (root.contains("nic")) {
    const auto& k = root["nic"];
    c.nic.icmp_service_cost = time_or(k, "icmp_service_cost", c.nic.icmp_service_cost, sc, "nic");
    c.nic.lock_spin = time_or(k, "lock_spin", c.nic.lock_spin, sc, "nic");
    c.nic.private_bytes = get_or<std::uint64_t>(k, "private_bytes", c.nic.private_bytes, "nic");
  }

  const auto arr = [&](const char* key) -> json {
    if (!root.contains(key)) return json::array();
    if (!root[key].is_array()) throw ConfigError(std::string(key) + " must be an array");
    return root[key];
  };

  std::size_t i = 0;
  for (const auto& s : arr("sandboxes")) {
    const auto ctx = ctx_of("sandboxes", i++);
    SandboxSpec sb;
    sb.id = get<SandboxId>(s, "id", ctx);
    sb.services = get_or<std::vector<std::string>>(s, "services", {}, ctx);
    if (s.contains("recovery")) {
      const auto& r = s["recovery"];
      sb.recovery.mode = recovery::parse_mode(get_or<std::string>(r, "mode", "local", ctx));
      sb.recovery.target_selection = recovery::parse_selection(get_or<std::string>(r, "target_selection", "round-robin", ctx));
      sb.recovery.diversity = get_or<bool>(r, "diversity", false, ctx);
      sb.recovery.grant_redirect = get_or<bool>(r, "grant_redirect", true, ctx);
    }
    sb.preemption_timeout = time_or(s, "preemption_timeout", {}, sc, ctx);
    c.sandboxes.push_back(sb);
  }
  i = 0;
  for (const auto& d : arr("devices")) {
    const auto ctx = ctx_of("devices", i++);
    DeviceSpec ds;
    ds.id = get<dev::DeviceId>(d, "id", ctx);
    const auto v = get<unsigned>(d, "vector", ctx);
    if (v > 255) throw ConfigError(ctx + ": vector must fit in 8 bits");
    ds.vector = static_cast<irq::Vector>(v);
    c.devices.push_back(ds);
  }
  i = 0;
  for (const auto& v : arr("vcpus")) {
    const auto ctx = ctx_of("vcpus", i++);
    VcpuSpec vs;
    vs.id = get<sched::VcpuId>(v, "id", ctx);
    vs.sandbox = get<SandboxId>(v, "sandbox", ctx);
    const auto kind = get_or<std::string>(v, "kind", "main", ctx);
    if (kind == "main")
      vs.kind = sched::VcpuKind::main;
    else if (kind == "io")
      vs.kind = sched::VcpuKind::io;
    else
      throw ConfigError(ctx + ": unknown vcpu kind '" + kind + "'");
    vs.c_max = time_opt(v, "c_max", sc, ctx);
    vs.period = time_opt(v, "period", sc, ctx);
    if (v.contains("bandwidth")) vs.bandwidth = get<double>(v, "bandwidth", ctx);
    if (v.contains("device")) vs.device = get<dev::DeviceId>(v, "device", ctx);
    c.vcpus.push_back(vs);
  }
  i = 0;
  for (const auto& d : arr("drivers")) {
    const auto ctx = ctx_of("drivers", i++);
    DriverSpec ds;
    ds.sandbox = get<SandboxId>(d, "sandbox", ctx);
    ds.device = get<dev::DeviceId>(d, "device", ctx);
    ds.io_vcpu = get<sched::VcpuId>(d, "io_vcpu", ctx);
    if (d.contains("service_vcpu")) ds.service_vcpu = get<sched::VcpuId>(d, "service_vcpu", ctx);
    c.drivers.push_back(ds);
  }
  i = 0;
  for (const auto& v : arr("vifs")) {
    const auto ctx = ctx_of("vifs", i++);
    VifSpec vs;
    vs.sandbox = get<SandboxId>(v, "sandbox", ctx);
    vs.device = get_or<dev::DeviceId>(v, "device", 0, ctx);
    vs.ip = get<std::string>(v, "ip", ctx);
    vs.mac = get_or<std::string>(v, "mac", "02:00:00:00:00:00", ctx);
    c.vifs.push_back(vs);
  }
  i = 0;
  for (const auto& ch : arr("channels")) {
    const auto ctx = ctx_of("channels", i++);
    ChannelSpec cs;
    cs.id = get<ipc::ChannelId>(ch, "id", ctx);
    cs.a = get<SandboxId>(ch, "a", ctx);
    cs.b = get<SandboxId>(ch, "b", ctx);
    cs.is_private = get_or<bool>(ch, "private", false, ctx);
    c.channels.push_back(cs);
  }
  i = 0;
  for (const auto& w : arr("workloads")) {
    c.workloads.push_back(workload_from_json(w, sc, ctx_of("workloads", i++)));
  }
  i = 0;
  for (const auto& f : arr("faults")) {
    const auto ctx = ctx_of("faults", i++);
    FaultConfig fc;
    fc.sandbox = get<SandboxId>(f, "sandbox", ctx);
    fc.device = get_or<dev::DeviceId>(f, "device", 0, ctx);
    fc.at = time_opt(f, "at", sc, ctx);
    if (f.contains("after_replies")) {
      const auto& r = f["after_replies"];
      fc.after_replies = ReplyTrigger{get_or<std::size_t>(r, "flow", 0, ctx), get<std::uint64_t>(r, "count", ctx)};
    }
    if (f.contains("mode")) fc.mode = recovery::parse_mode(get<std::string>(f, "mode", ctx));
    if (f.contains("blast")) {
      if (!f["blast"].is_array()) throw ConfigError(ctx + ": blast must be an array");
      for (const auto& b : f["blast"]) {
        BlastSpec bs;
        bs.target = get<std::string>(b, "target", ctx);
        bs.length = get_or<std::uint64_t>(b, "length", bs.length, ctx);
        const auto fill = get_or<unsigned>(b, "fill", 0xFF, ctx);
        if (fill > 255) throw ConfigError(ctx + ": blast fill must be a byte");
        bs.fill = static_cast<std::uint8_t>(fill);
        fc.blast.push_back(bs);
      }
    }
    c.faults.push_back(fc);
  }
  return c;
}

inline json to_json(const ScenarioConfig& c) {
  using detail::put_time;
  json j;
  j["name"] = c.name;
  j["sim"] = {{"cycles_per_second", c.sim.cycles_per_second}, {"seed", c.sim.seed}};
  put_time(j["sim"], "horizon", c.sim.horizon);
  j["layout"] = {{"host_bytes", c.layout.host_bytes},     {"bios_bytes", c.layout.bios_bytes},
                 {"kernel_bytes", c.layout.kernel_bytes}, {"shared_bytes", c.layout.shared_bytes},
                 {"ept_data_bytes", c.layout.ept_data_bytes}};
  j["costs"] = {{"vm_exit", c.costs.vm_exit.cycles},
                {"vm_enter", c.costs.vm_enter.cycles},
                {"driver_switch", c.costs.driver_switch.cycles},
                {"ipi_round_trip", c.costs.ipi_round_trip.cycles},
                {"driver_reinit", c.costs.driver_reinit.cycles},
                {"network_reinit", c.costs.network_reinit.cycles},
                {"reboot", c.costs.reboot.cycles}};
  j["irq"] = json::object();
  put_time(j["irq"], "delivery_latency", c.irq.delivery_latency);
  put_time(j["irq"], "demux_cost", c.irq.demux_cost);
  j["ipc"] = {{"copy_bytes_per_cycle", c.ipc.copy_bytes_per_cycle}};
  put_time(j["ipc"], "poll_cost", c.ipc.poll_cost);
  j["nic"] = {{"private_bytes", c.nic.private_bytes}};
  put_time(j["nic"], "icmp_service_cost", c.nic.icmp_service_cost);
  put_time(j["nic"], "lock_spin", c.nic.lock_spin);

  j["sandboxes"] = json::array();
  for (const auto& s : c.sandboxes) {
    json o = {{"id", s.id},
              {"services", s.services},
              {"recovery",
               {{"mode", std::string(recovery::to_string(s.recovery.mode))},
                {"target_selection", std::string(recovery::to_string(s.recovery.target_selection))},
                {"diversity", s.recovery.diversity},
                {"grant_redirect", s.recovery.grant_redirect}}}};
    put_time(o, "preemption_timeout", s.preemption_timeout);
    j["sandboxes"].push_back(o);
  }
  j["devices"] = json::array();
  for (const auto& d : c.devices) j["devices"].push_back({{"id", d.id}, {"vector", d.vector}});
  j["vcpus"] = json::array();
  for (const auto& v : c.vcpus) {
    json o = {{"id", v.id}, {"sandbox", v.sandbox}, {"kind", std::string(sched::to_string(v.kind))}};
    if (v.c_max) put_time(o, "c_max", *v.c_max);
    if (v.period) put_time(o, "period", *v.period);
    if (v.bandwidth) o["bandwidth"] = *v.bandwidth;
    if (v.device) o["device"] = *v.device;
    j["vcpus"].push_back(o);
  }
  j["drivers"] = json::array();
  for (const auto& d : c.drivers) {
    json o = {{"sandbox", d.sandbox}, {"device", d.device}, {"io_vcpu", d.io_vcpu}};
    if (d.service_vcpu) o["service_vcpu"] = *d.service_vcpu;
    j["drivers"].push_back(o);
  }
  j["vifs"] = json::array();
  for (const auto& v : c.vifs)
    j["vifs"].push_back({{"sandbox", v.sandbox}, {"device", v.device}, {"ip", v.ip}, {"mac", v.mac}});
  j["channels"] = json::array();
  for (const auto& ch : c.channels)
    j["channels"].push_back({{"id", ch.id}, {"a", ch.a}, {"b", ch.b}, {"private", ch.is_private}});
  j["workloads"] = json::array();
  for (const auto& w : c.workloads) j["workloads"].push_back(workload_to_json(w));
  j["faults"] = json::array();
  for (const auto& f : c.faults) {
    json o = {{"sandbox", f.sandbox}, {"device", f.device}};
    if (f.at) put_time(o, "at", *f.at);
    if (f.after_replies) o["after_replies"] = {{"flow", f.after_replies->flow}, {"count", f.after_replies->replies}};
    if (f.mode) o["mode"] = std::string(recovery::to_string(*f.mode));
    o["blast"] = json::array();
    for (const auto& b : f.blast) o["blast"].push_back({{"target", b.target}, {"length", b.length}, {"fill", b.fill}});
    j["faults"].push_back(o);
  }
  return j;
}

// ---- validation ------------------------------------------------------------

/// Effective (c_max, period) of a VCPU after defaults are applied.
inline std::pair<sim::SimTime, sim::SimTime> vcpu_budget(const ScenarioConfig& c, const VcpuSpec& v) {
  const std::string ctx = "vcpu " + std::to_string(v.id) + " of sandbox " + std::to_string(v.sandbox);
  if (v.kind == sched::VcpuKind::main) {
    if (!v.c_max || !v.period) throw ConfigError(ctx + ": main VCPUs need c_max and period");
    return {*v.c_max, *v.period};
  }
  if (!v.bandwidth) throw ConfigError(ctx + ": I/O VCPUs need a bandwidth");
  if (!(*v.bandwidth > 0.0 && *v.bandwidth <= 1.0)) throw ConfigError(ctx + ": bandwidth must be in (0, 1]");
  sim::SimTime period{};
  if (v.period) {
    period = *v.period;
  } else {
    // Shortest period among the sandbox's Main VCPUs.
    for (const auto& m : c.vcpus)
      if (m.sandbox == v.sandbox && m.kind == sched::VcpuKind::main && m.period)
        if (period.cycles == 0 || *m.period < period) period = *m.period;
    if (period.cycles == 0) throw ConfigError(ctx + ": no period given and no Main VCPU to default from");
  }
  const auto cap = static_cast<std::uint64_t>(std::llround(*v.bandwidth * static_cast<double>(period.cycles)));
  return {sim::SimTime{std::max<std::uint64_t>(cap, 1)}, period};
}

inline std::uint64_t resolve_blast_target(const std::string& target, const mem::MemoryLayout& l,
                                          const std::vector<ChannelSpec>& channels) {
  std::string base = target;
  std::uint64_t off = 0;
  if (auto plus = target.find('+'); plus != std::string::npos) {
    base = target.substr(0, plus);
    off = std::stoull(target.substr(plus + 1), nullptr, 0);
  }
  auto index = [&](const std::string& prefix) -> std::size_t {
    return static_cast<std::size_t>(std::stoull(base.substr(prefix.size())));
  };
  try {
    if (base.rfind("0x", 0) == 0 || (!base.empty() && std::isdigit(static_cast<unsigned char>(base[0]))))
      return std::stoull(base, nullptr, 0) + off;
    if (base.rfind("kernel:", 0) == 0) return l.kernels.at(index("kernel:")).begin + off;
    if (base.rfind("ept-data:", 0) == 0) return l.ept_data.at(index("ept-data:")).begin + off;
    if (base == "shared") return l.shared.begin + off;
    if (base.rfind("channel:", 0) == 0) {
      const auto id = index("channel:");
      for (std::size_t k = 0; k < channels.size(); ++k)
        if (channels[k].id == id) return l.shared.begin + (k + ipc::ChannelTable::kReservedSlots) * mem::kPageSize + off;
      throw ConfigError("blast target refers to unknown channel " + std::to_string(id));
    }
  } catch (const std::out_of_range&) {
    throw ConfigError("blast target '" + target + "' is out of range");
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad blast target '" + target + "'");
  }
  throw ConfigError("bad blast target '" + target + "'");
}

/// Reference and admission checks. Admission failures raise AdmissionError
/// carrying the utilization sum and bound.
inline void validate(const ScenarioConfig& c) {
  c.sim.validate();
  if (c.sandboxes.empty()) throw ConfigError("at least one sandbox is required");
  for (std::size_t i = 0; i < c.sandboxes.size(); ++i)
    if (c.sandboxes[i].id != i) throw ConfigError("sandbox ids must be 0..n-1 in order");
  mem::plan_layout(c.sandboxes.size(), c.layout);
  const auto n = c.sandboxes.size();
  auto sandbox_ok = [&](SandboxId s, const std::string& ctx) {
    if (s >= n) throw ConfigError(ctx + ": unknown sandbox " + std::to_string(s));
  };
  auto device_ok = [&](dev::DeviceId d, const std::string& ctx) {
    if (d >= c.devices.size()) throw ConfigError(ctx + ": unknown device " + std::to_string(d));
  };
  for (std::size_t i = 0; i < c.devices.size(); ++i) {
    if (c.devices[i].id != i) throw ConfigError("device ids must be 0..n-1 in order");
    for (std::size_t k = 0; k < i; ++k)
      if (c.devices[k].vector == c.devices[i].vector) throw ConfigError("devices share a vector");
  }
  std::map<std::pair<SandboxId, sched::VcpuId>, const VcpuSpec*> vcpus;
  for (const auto& v : c.vcpus) {
    const auto ctx = "vcpu " + std::to_string(v.id);
    sandbox_ok(v.sandbox, ctx);
    if (!vcpus.emplace(std::make_pair(v.sandbox, v.id), &v).second) throw ConfigError(ctx + ": duplicate id");
    if (v.device) device_ok(*v.device, ctx);
    const auto [cap, period] = vcpu_budget(c, v);
    if (cap.cycles == 0 || cap > period) throw ConfigError(ctx + ": need 0 < c_max <= period");
  }
  auto vcpu_ok = [&](SandboxId s, sched::VcpuId id, std::optional<sched::VcpuKind> kind, const std::string& ctx) {
    auto it = vcpus.find({s, id});
    if (it == vcpus.end())
      throw ConfigError(ctx + ": unknown vcpu " + std::to_string(id) + " in sandbox " + std::to_string(s));
    if (kind && it->second->kind != *kind) throw ConfigError(ctx + ": vcpu " + std::to_string(id) + " has the wrong kind");
  };
  std::set<std::pair<SandboxId, dev::DeviceId>> drivers;
  for (std::size_t i = 0; i < c.drivers.size(); ++i) {
    const auto& d = c.drivers[i];
    const auto ctx = detail::ctx_of("drivers", i);
    sandbox_ok(d.sandbox, ctx);
    device_ok(d.device, ctx);
    vcpu_ok(d.sandbox, d.io_vcpu, sched::VcpuKind::io, ctx);
    if (d.service_vcpu) vcpu_ok(d.sandbox, *d.service_vcpu, sched::VcpuKind::main, ctx);
    if (!drivers.insert({d.sandbox, d.device}).second) throw ConfigError(ctx + ": duplicate driver");
  }
  std::set<std::pair<dev::DeviceId, std::uint32_t>> ips;
  for (std::size_t i = 0; i < c.vifs.size(); ++i) {
    const auto& v = c.vifs[i];
    const auto ctx = detail::ctx_of("vifs", i);
    sandbox_ok(v.sandbox, ctx);
    device_ok(v.device, ctx);
    if (!ips.insert({v.device, dev::parse_ip(v.ip)}).second) throw ConfigError(ctx + ": duplicate address " + v.ip);
    parse_mac(v.mac);
  }
  std::map<ipc::ChannelId, const ChannelSpec*> chans;
  for (std::size_t i = 0; i < c.channels.size(); ++i) {
    const auto& ch = c.channels[i];
    const auto ctx = detail::ctx_of("channels", i);
    if (ch.id != i) throw ConfigError(ctx + ": channel ids must be 0..n-1 in order");
    sandbox_ok(ch.a, ctx);
    sandbox_ok(ch.b, ctx);
    if (ch.a == ch.b) throw ConfigError(ctx + ": endpoints must differ");
    chans[ch.id] = &ch;
  }
  const auto shared_slots = c.layout.shared_bytes / mem::kPageSize;
  if (c.channels.size() + ipc::ChannelTable::kReservedSlots > shared_slots)
    throw ConfigError("shared region cannot hold " + std::to_string(c.channels.size()) + " channels");

  std::vector<std::size_t> floods;
  for (std::size_t i = 0; i < c.workloads.size(); ++i) {
    const auto ctx = detail::ctx_of("workloads", i);
    std::visit(
        [&](const auto& w) {
          using T = std::decay_t<decltype(w)>;
          if constexpr (std::is_same_v<T, IcmpFlood>) {
            device_ok(w.device, ctx);
            dev::parse_ip(w.dst_ip);
            dev::parse_ip(w.src_ip);
            if (w.interval.cycles == 0) throw ConfigError(ctx + ": interval must be > 0");
            floods.push_back(i);
          } else if constexpr (std::is_same_v<T, MsgStream> || std::is_same_v<T, MsgBench>) {
            auto it = chans.find(w.channel);
            if (it == chans.end()) throw ConfigError(ctx + ": unknown channel " + std::to_string(w.channel));
            const auto& ch = *it->second;
            if (w.sender != ch.a && w.sender != ch.b) throw ConfigError(ctx + ": sender is not a channel endpoint");
            const SandboxId recv = w.sender == ch.a ? ch.b : ch.a;
            vcpu_ok(w.sender, w.sender_vcpu, sched::VcpuKind::main, ctx);
            vcpu_ok(recv, w.receiver_vcpu, sched::VcpuKind::main, ctx);
            if constexpr (std::is_same_v<T, MsgStream>) {
              if (w.send_interval.cycles == 0 || w.recv_interval.cycles == 0)
                throw ConfigError(ctx + ": intervals must be > 0");
            } else {
              if (w.sizes.empty() || w.trials == 0 || w.spacing.cycles == 0)
                throw ConfigError(ctx + ": msg-bench needs sizes, trials and spacing");
            }
          } else if constexpr (std::is_same_v<T, ForkWait> || std::is_same_v<T, CpuHog>) {
            vcpu_ok(w.sandbox, w.vcpu, std::nullopt, ctx);
          } else if constexpr (std::is_same_v<T, Periodic>) {
            vcpu_ok(w.sandbox, w.vcpu, std::nullopt, ctx);
            if (w.period.cycles == 0 || w.wcet.cycles == 0) throw ConfigError(ctx + ": period and wcet must be > 0");
          }
        },
        c.workloads[i]);
  }
  for (std::size_t i = 0; i < c.faults.size(); ++i) {
    const auto& f = c.faults[i];
    const auto ctx = detail::ctx_of("faults", i);
    sandbox_ok(f.sandbox, ctx);
    device_ok(f.device, ctx);
    if (!drivers.count({f.sandbox, f.device})) throw ConfigError(ctx + ": sandbox has no driver for the device");
    if (f.at.has_value() == f.after_replies.has_value()) throw ConfigError(ctx + ": give exactly one of at or after_replies");
    if (f.after_replies && f.after_replies->flow >= floods.size())
      throw ConfigError(ctx + ": after_replies refers to unknown icmp-flood " + std::to_string(f.after_replies->flow));
    const auto layout = mem::plan_layout(n, c.layout);
    for (const auto& b : f.blast) {
      if (b.length == 0) throw ConfigError(ctx + ": blast length must be > 0");
      resolve_blast_target(b.target, layout, c.channels);
    }
  }

  // Admission per PCPU (one PCPU per sandbox).
  for (SandboxId s = 0; s < n; ++s) {
    std::vector<double> u;
    for (const auto& v : c.vcpus)
      if (v.sandbox == s) {
        const auto [cap, period] = vcpu_budget(c, v);
        u.push_back(static_cast<double>(cap.cycles) / static_cast<double>(period.cycles));
      }
    const auto rep = sched::admit(u);
    if (!rep.accepted) {
      std::ostringstream os;
      os << "sandbox " << s << ": VCPU set not admitted (utilization " << rep.total_utilization << " > bound "
         << rep.bound << " for n=" << rep.n << ")";
      throw AdmissionError(os.str(), rep.total_utilization, rep.bound);
    }
  }
}

/// Parses JSON text. Syntax errors report the line number.
inline ScenarioConfig parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t k = 0; k < std::min<std::size_t>(e.byte ? e.byte - 1 : 0, text.size()); ++k)
      if (text[k] == '\n') ++line;
    throw ConfigError("line " + std::to_string(line) + ": " + e.what());
  }
  auto c = from_json(j);
  validate(c);
  return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace questv::scenario
