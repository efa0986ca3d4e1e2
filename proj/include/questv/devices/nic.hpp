#pragma once

#include <array>
#include <charconv>
#include <cstring>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "questv/errors.hpp"
#include "questv/interrupts/ioapic.hpp"
#include "questv/memory/layout.hpp"
#include "questv/sandbox/sandbox.hpp"

namespace questv::dev {

using DeviceId = std::uint32_t;
using DriverId = std::uint32_t;
using Mac = std::array<std::uint8_t, 6>;

enum class DriverState : std::uint8_t { healthy, corrupted, reinitializing, detached };
enum class Implementation : std::uint8_t { primary, alternate };

constexpr std::string_view to_string(DriverState s) {
  switch (s) {
    case DriverState::healthy: return "healthy";
    case DriverState::corrupted: return "corrupted";
    case DriverState::reinitializing: return "reinitializing";
    case DriverState::detached: return "detached";
  }
  return "?";
}

constexpr std::string_view to_string(Implementation i) { return i == Implementation::primary ? "primary" : "alternate"; }

inline std::string ip_string(std::uint32_t ip) {
  return std::to_string(ip >> 24) + "." + std::to_string((ip >> 16) & 0xFF) + "." + std::to_string((ip >> 8) & 0xFF) +
         "." + std::to_string(ip & 0xFF);
}

inline std::uint32_t parse_ip(std::string_view s) {
  const std::string bad = "bad IPv4 address '" + std::string(s) + "'";
  std::uint32_t out = 0;
  int parts = 0;
  for (std::size_t pos = 0;;) {
    const auto dot = s.find('.', pos);
    const auto tok = s.substr(pos, dot == std::string_view::npos ? std::string_view::npos : dot - pos);
    unsigned v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc{} || p != tok.data() + tok.size() || v > 255) throw ConfigError(bad);
    out = (out << 8) | v;
    if (++parts > 4) throw ConfigError(bad);
    if (dot == std::string_view::npos) break;
    pos = dot + 1;
  }
  if (parts != 4) throw ConfigError(bad);
  return out;
}

struct VirtualInterface {
  SandboxId sandbox = 0;
  DeviceId device = 0;
  std::uint32_t ip = 0;
  Mac mac{};
};

struct IcmpPacket {
  enum class Kind : std::uint8_t { request, reply };
  Kind kind = Kind::request;
  std::uint64_t seq = 0;
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  sim::SimTime timestamp;
  std::uint32_t flow = 0;  // which generator sent it
};

struct NicConfig {
  sim::SimTime icmp_service_cost{5000};
  sim::SimTime lock_spin{100};
  std::uint64_t private_bytes = 64 * mem::KiB;

  bool operator==(const NicConfig&) const = default;
};

struct NicDevice {
  DeviceId id = 0;
  irq::Vector vector = 0;
  mem::Gpa lock_gpa;
  std::vector<DriverId> attached;
};

struct DriverInstance {
  DriverId id = 0;
  SandboxId sandbox = 0;
  DeviceId device = 0;
  DriverState state = DriverState::healthy;
  Implementation impl = Implementation::primary;
  mem::Range private_data;
  std::uint64_t epoch = 0;
  sched::VcpuId io_vcpu = 0;
  std::optional<sched::Priority> service_priority;
};

struct BlastWrite {
  mem::Gpa gpa;
  std::vector<std::uint8_t> bytes;
};

/// Shared NIC devices, their per-sandbox driver instances and virtual
/// interfaces, and the ICMP echo service running inside each driver.
class NicLayer {
 public:
  using ReplySink = std::function<void(const IcmpPacket& reply, SandboxId by)>;

  NicLayer(sandbox::SandboxManager& mgr, irq::IoApic& apic, NicConfig cfg = {}) : mgr_(&mgr), apic_(&apic), cfg_(cfg) {
    apic_->set_handler([this](SandboxId s, irq::Vector v, std::uint64_t cookie) { on_interrupt(s, v, cookie); });
  }

  const NicConfig& config() const noexcept { return cfg_; }
  const std::vector<NicDevice>& devices() const noexcept { return devices_; }
  const NicDevice& device(DeviceId d) const { return devices_.at(d); }
  const std::vector<DriverInstance>& drivers() const noexcept { return drivers_; }
  const DriverInstance& driver(DriverId id) const { return drivers_.at(id); }
  const std::vector<VirtualInterface>& vifs() const noexcept { return vifs_; }

  void set_reply_sink(ReplySink s) { sink_ = std::move(s); }

  /// Registers a NIC; its lock byte lives in the reserved first page of the
  /// shared region and its vector is broadcast to every sandbox.
  DeviceId add_device(irq::Vector vector) {
    for (const auto& d : devices_)
      if (d.vector == vector) throw ConfigError("vector already used by device " + std::to_string(d.id));
    NicDevice d;
    d.id = static_cast<DeviceId>(devices_.size());
    d.vector = vector;
    d.lock_gpa = mem::Gpa{mgr_->layout().shared.begin + d.id};
    if (d.id >= mem::kPageSize) throw AllocationError("too many devices for the lock page");
    devices_.push_back(d);
    apic_->program(vector, irq::Destinations::all(), mgr_->monitor(0).token());
    return d.id;
  }

  DriverId attach(SandboxId s, DeviceId dev, sched::VcpuId io_vcpu, std::optional<sched::Priority> service_priority) {
    auto& device = devices_.at(dev);
    if (find_driver(s, dev)) throw ConfigError("sandbox already has a driver for device " + std::to_string(dev));
    if (!mgr_->scheduler(s).has_vcpu(io_vcpu)) throw ConfigError("driver I/O VCPU does not exist");
    const auto& k = mgr_->layout().kernels.at(s);
    if ((dev + 1) * cfg_.private_bytes > k.length / 2) throw AllocationError("driver private data does not fit");
    DriverInstance inst;
    inst.id = static_cast<DriverId>(drivers_.size());
    inst.sandbox = s;
    inst.device = dev;
    inst.private_data = mem::Range{k.end() - (dev + 1) * cfg_.private_bytes, cfg_.private_bytes};
    inst.io_vcpu = io_vcpu;
    inst.service_priority = service_priority;
    drivers_.push_back(inst);
    device.attached.push_back(inst.id);
    mgr_->sandbox(s).drivers.push_back(inst.id);
    write_private(inst);
    mgr_->engine().record(s, "driver_attach", sim::fields("driver", inst.id, "device", dev, "io_vcpu", io_vcpu));
    return inst.id;
  }

  void add_vif(SandboxId s, DeviceId dev, std::uint32_t ip, Mac mac) {
    devices_.at(dev);
    for (const auto& v : vifs_)
      if (v.device == dev && v.ip == ip) throw ConfigError("duplicate interface address " + ip_string(ip));
    vifs_.push_back(VirtualInterface{s, dev, ip, mac});
  }

  std::vector<std::uint32_t> local_ips(SandboxId s, DeviceId dev) const {
    std::vector<std::uint32_t> out;
    for (const auto& v : vifs_)
      if (v.sandbox == s && v.device == dev) out.push_back(v.ip);
    return out;
  }

  std::optional<DriverId> find_driver(SandboxId s, DeviceId dev) const {
    for (const auto& d : drivers_)
      if (d.sandbox == s && d.device == dev) return d.id;
    return std::nullopt;
  }

  std::optional<SandboxId> owner_of(std::uint32_t ip, DeviceId dev) const {
    for (const auto& v : vifs_)
      if (v.device == dev && v.ip == ip) return v.sandbox;
    return std::nullopt;
  }

  /// Moves every interface of `from` on `dev` to `to`.
  void move_vifs(DeviceId dev, SandboxId from, SandboxId to) {
    for (auto& v : vifs_)
      if (v.device == dev && v.sandbox == from) {
        v.sandbox = to;
        mgr_->engine().record(to, "vif_adopt", sim::fields("ip", ip_string(v.ip), "from", from));
      }
  }

  /// A packet arrives from the wire: the device raises its vector.
  void nic_rx(DeviceId dev, const IcmpPacket& pkt) {
    const auto& d = devices_.at(dev);
    const std::uint64_t cookie = packets_.size();
    packets_.push_back(Rx{dev, pkt});
    apic_->raise_irq(d.vector, cookie);
  }

  /// Fault-injection hook: marks the driver corrupted and performs the blast
  /// writes from the owning sandbox. Writes outside its writable memory trap.
  std::vector<mem::EptViolation> corrupt_driver(DriverId id, const std::vector<BlastWrite>& blast) {
    auto& inst = drivers_.at(id);
    if (inst.state != DriverState::healthy)
      throw StateError("driver " + std::to_string(id) + " is " + std::string(to_string(inst.state)));
    inst.state = DriverState::corrupted;
    mgr_->engine().record(inst.sandbox, "driver_corrupt", sim::fields("driver", id, "writes", blast.size()));
    std::vector<mem::EptViolation> all;
    for (const auto& w : blast) {
      if (w.bytes.empty()) continue;
      auto buf = w.bytes;
      auto v = mgr_->guest_access(inst.sandbox, w.gpa, mem::AccessKind::write, buf);
      all.insert(all.end(), v.begin(), v.end());
    }
    return all;
  }

  /// Start of reinitialization: in-flight work is discarded and a lock held
  /// by this instance is released.
  void begin_reinit(DriverId id) {
    auto& inst = drivers_.at(id);
    if (inst.state == DriverState::reinitializing) throw StateError("driver is already reinitializing");
    inst.state = DriverState::reinitializing;
    invalidate(inst);
    mgr_->engine().record(inst.sandbox, "driver_reinit_begin", sim::fields("driver", id));
  }

  void switch_implementation(DriverId id) {
    auto& inst = drivers_.at(id);
    inst.impl = inst.impl == Implementation::primary ? Implementation::alternate : Implementation::primary;
    mgr_->engine().record(inst.sandbox, "driver_switch", sim::fields("driver", id, "impl", to_string(inst.impl)));
  }

  void finish_reinit(DriverId id) {
    auto& inst = drivers_.at(id);
    if (inst.state != DriverState::reinitializing) throw StateError("driver is not reinitializing");
    inst.state = DriverState::healthy;
    write_private(inst);
    mgr_->engine().record(inst.sandbox, "driver_healthy", sim::fields("driver", id, "impl", to_string(inst.impl)));
  }

  /// Full reinitialization: optional implementation switch, then driver and
  /// network reinit, each charged its phase cost.
  void driver_reinit(DriverId id, bool switch_impl, std::function<void()> done = {}) {
    begin_reinit(id);
    const auto& c = mgr_->costs();
    auto& eng = mgr_->engine();
    const sim::SimTime sw = switch_impl ? c.driver_switch : sim::SimTime{};
    const auto sb = drivers_.at(id).sandbox;
    eng.schedule_in(sw, sim::EventKind::timer, sb, [this, id, switch_impl, done = std::move(done)]() mutable {
      if (switch_impl) switch_implementation(id);
      const auto& c2 = mgr_->costs();
      mgr_->engine().schedule_in(c2.driver_reinit + c2.network_reinit, sim::EventKind::timer, drivers_.at(id).sandbox,
                                 [this, id, done = std::move(done)] {
                                   finish_reinit(id);
                                   if (done) done();
                                 });
    });
  }

  void detach(DriverId id) {
    auto& inst = drivers_.at(id);
    if (inst.state == DriverState::detached) return;
    inst.state = DriverState::detached;
    invalidate(inst);
    mgr_->engine().record(inst.sandbox, "driver_detach", sim::fields("driver", id));
  }

  /// Re-attaches a detached instance in the uninitialized (reinitializing)
  /// state; finish_reinit makes it healthy.
  void reattach(DriverId id) {
    auto& inst = drivers_.at(id);
    if (inst.state != DriverState::detached) throw StateError("driver is not detached");
    inst.state = DriverState::reinitializing;
  }

  /// Lock holder per the shared lock byte (sandbox id), if any.
  std::optional<SandboxId> lock_holder(DeviceId dev) const {
    const auto b = mgr_->host().read_byte(mem::Hpa{devices_.at(dev).lock_gpa.value});
    if (b == 0) return std::nullopt;
    return static_cast<SandboxId>(b - 1);
  }

 private:
  struct Rx {
    DeviceId device;
    IcmpPacket pkt;
  };

  void write_private(const DriverInstance& inst) {
    std::uint64_t words[3] = {inst.device, inst.epoch, static_cast<std::uint64_t>(inst.impl)};
    std::uint8_t bytes[sizeof words];
    std::memcpy(bytes, words, sizeof words);
    mgr_->guest_access(inst.sandbox, mem::Gpa{inst.private_data.begin}, mem::AccessKind::write, bytes);
  }

  void invalidate(DriverInstance& inst) {
    ++inst.epoch;
    const auto dropped = mgr_->scheduler(inst.sandbox).discard_pending(inst.io_vcpu);
    const auto& dev = devices_.at(inst.device);
    if (lock_holder(inst.device) == inst.sandbox) {
      mgr_->host().write_byte(mem::Hpa{dev.lock_gpa.value}, 0);
      mgr_->engine().record(inst.sandbox, "lock_release", sim::fields("device", dev.id, "forced", true));
    }
    if (dropped > 0) mgr_->engine().record(inst.sandbox, "io_discard", sim::fields("driver", inst.id, "items", dropped));
  }

  void on_interrupt(SandboxId s, irq::Vector v, std::uint64_t cookie) {
    const Rx& rx = packets_.at(cookie);
    const auto& dev = devices_.at(rx.device);
    if (dev.vector != v) return;
    const auto drv = find_driver(s, rx.device);
    const bool has_driver = drv && drivers_[*drv].state != DriverState::detached;
    const auto ips = local_ips(s, rx.device);
    auto& eng = mgr_->engine();
    const auto decision = irq::early_demux(has_driver, ips, rx.pkt.dst_ip);
    if (decision == irq::Demux::discard) {
      eng.record(s, "irq_discard", sim::fields("cookie", cookie, "seq", rx.pkt.seq));
      if (has_driver)
        mgr_->scheduler(s).submit(drivers_[*drv].io_vcpu, apic_->config().demux_cost);
      return;
    }
    auto& inst = drivers_[*drv];
    eng.record(s, "irq_handle", sim::fields("cookie", cookie, "seq", rx.pkt.seq, "flow", rx.pkt.flow));
    const std::uint64_t epoch = inst.epoch;
    const DriverId id = inst.id;
    const IcmpPacket pkt = rx.pkt;
    mgr_->scheduler(s).submit(inst.io_vcpu, apic_->config().demux_cost,
                              [this, id, epoch, pkt] { driver_handle(id, epoch, pkt, false); }, inst.service_priority);
  }

  bool alive(const DriverInstance& inst, std::uint64_t epoch, const IcmpPacket& pkt) {
    if (inst.epoch == epoch && inst.state == DriverState::healthy) return true;
    mgr_->engine().record(inst.sandbox, "icmp_drop",
                          sim::fields("seq", pkt.seq, "flow", pkt.flow, "state", to_string(inst.state)));
    return false;
  }

  /// Serves one request: take the shared lock (spinning on the I/O VCPU if
  /// another sandbox holds it), run the echo service, reply, release.
  void driver_handle(DriverId id, std::uint64_t epoch, const IcmpPacket& pkt, bool waited) {
    auto& inst = drivers_.at(id);
    if (!alive(inst, epoch, pkt)) return;
    const auto& dev = devices_.at(inst.device);
    std::uint8_t cur = 0;
    if (!mgr_->guest_access(inst.sandbox, dev.lock_gpa, mem::AccessKind::read, std::span(&cur, 1)).empty()) return;
    if (cur != 0) {
      if (!waited) mgr_->engine().record(inst.sandbox, "lock_wait", sim::fields("device", dev.id, "holder", cur - 1));
      mgr_->scheduler(inst.sandbox).submit(inst.io_vcpu, cfg_.lock_spin,
                                           [this, id, epoch, pkt] { driver_handle(id, epoch, pkt, true); },
                                           inst.service_priority);
      return;
    }
    std::uint8_t mine = static_cast<std::uint8_t>(inst.sandbox + 1);
    mgr_->guest_access(inst.sandbox, dev.lock_gpa, mem::AccessKind::write, std::span(&mine, 1));
    mgr_->engine().record(inst.sandbox, "lock_acquire", sim::fields("device", dev.id));
    mgr_->scheduler(inst.sandbox).submit(
        inst.io_vcpu, cfg_.icmp_service_cost,
        [this, id, epoch, pkt] {
          auto& in = drivers_.at(id);
          if (!alive(in, epoch, pkt)) return;  // lock already released by invalidate()
          IcmpPacket reply = pkt;
          reply.kind = IcmpPacket::Kind::reply;
          reply.src_ip = pkt.dst_ip;
          reply.dst_ip = pkt.src_ip;
          reply.timestamp = mgr_->engine().now();
          mgr_->engine().record(in.sandbox, "icmp_reply",
                                sim::fields("seq", pkt.seq, "flow", pkt.flow, "rtt", reply.timestamp - pkt.timestamp));
          const auto& d = devices_.at(in.device);
          std::uint8_t zero = 0;
          mgr_->guest_access(in.sandbox, d.lock_gpa, mem::AccessKind::write, std::span(&zero, 1));
          mgr_->engine().record(in.sandbox, "lock_release", sim::fields("device", d.id));
          if (sink_) sink_(reply, in.sandbox);
        },
        inst.service_priority);
  }

  sandbox::SandboxManager* mgr_;
  irq::IoApic* apic_;
  NicConfig cfg_;
  std::vector<NicDevice> devices_;
  std::vector<DriverInstance> drivers_;
  std::vector<VirtualInterface> vifs_;
  std::vector<Rx> packets_;
  ReplySink sink_;
};

}  // namespace questv::dev
