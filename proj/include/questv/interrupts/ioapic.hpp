#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "questv/errors.hpp"
#include "questv/sandbox/sandbox.hpp"
#include "questv/sim/engine.hpp"

namespace questv::irq {

using Vector = std::uint8_t;

/// Destination set of a redirection entry: an explicit set of sandboxes or
/// every sandbox.
struct Destinations {
  bool broadcast_all = false;
  std::set<SandboxId> sandboxes;

  static Destinations all() { return Destinations{true, {}}; }
  static Destinations only(std::set<SandboxId> s) { return Destinations{false, std::move(s)}; }

  bool operator==(const Destinations&) const = default;

  std::vector<SandboxId> resolve(std::size_t n_sandboxes) const {
    std::vector<SandboxId> out;
    if (broadcast_all) {
      for (std::size_t i = 0; i < n_sandboxes; ++i) out.push_back(static_cast<SandboxId>(i));
    } else {
      out.assign(sandboxes.begin(), sandboxes.end());
    }
    return out;
  }

  std::string str() const {
    if (broadcast_all) return "all";
    std::string s;
    for (auto id : sandboxes) s += (s.empty() ? "" : "+") + std::to_string(id);
    return s;
  }
};

struct RedirectionEntry {
  Vector vector = 0;
  Destinations destinations;
};

/// Who is asking to reprogram the redirection table: a monitor (proved by its
/// token) or a sandbox kernel (which needs a grant for that vector).
using RedirectCapability = std::variant<mem::MonitorToken, SandboxId>;

enum class IpiTag : std::uint8_t { recovery_kickstart, notify };

constexpr std::string_view to_string(IpiTag t) {
  return t == IpiTag::recovery_kickstart ? "recovery-kickstart" : "notify";
}

struct Ipi {
  SandboxId src = 0;
  SandboxId dst = 0;
  Vector vector = 0xF0;
  IpiTag tag = IpiTag::notify;
};

struct IrqConfig {
  sim::SimTime delivery_latency{100};
  sim::SimTime demux_cost{200};

  bool operator==(const IrqConfig&) const = default;
};

enum class Demux : std::uint8_t { handle, discard };

/// Early demultiplexing in a sandbox's driver: handle the packet only if it
/// is addressed to one of the sandbox's own interfaces.
inline Demux early_demux(bool has_driver, std::span<const std::uint32_t> local_ips, std::uint32_t dst_ip) {
  if (!has_driver) return Demux::discard;
  for (auto ip : local_ips)
    if (ip == dst_ip) return Demux::handle;
  return Demux::discard;
}

/// Emulated I/O APIC plus the Local APIC delivery path and inter-monitor
/// IPIs. Delivery never involves a monitor.
class IoApic {
 public:
  /// Invoked on the destination sandbox when an interrupt arrives; `cookie`
  /// identifies the device event that raised it.
  using LapicHandler = std::function<void(SandboxId, Vector, std::uint64_t cookie)>;

  IoApic(sandbox::SandboxManager& mgr, IrqConfig cfg = {}) : mgr_(&mgr), cfg_(cfg) {}

  const IrqConfig& config() const noexcept { return cfg_; }

  /// Initial programming at boot, done by the monitors.
  void program(Vector v, Destinations d, const mem::MonitorToken& cap) {
    if (!is_monitor(cap)) throw CapabilityError("I/O APIC programming requires a monitor token");
    check_destinations(d);
    table_[v] = RedirectionEntry{v, std::move(d)};
  }

  std::optional<RedirectionEntry> entry(Vector v) const {
    auto it = table_.find(v);
    if (it == table_.end()) return std::nullopt;
    return it->second;
  }

  /// A monitor grants its own sandbox the right to redirect one vector.
  void grant_redirect(SandboxId s, Vector v, const mem::MonitorToken& cap) {
    if (!(mgr_->monitor(s).token() == cap)) throw CapabilityError("only a sandbox's own monitor may grant it redirection");
    grants_.insert({s, v});
  }

  void revoke_redirect(SandboxId s, Vector v) { grants_.erase({s, v}); }

  bool has_grant(SandboxId s, Vector v) const { return grants_.count({s, v}) != 0; }

  /// Replaces the destination set of a vector in a single step.
  void redirect(Vector v, Destinations d, const RedirectCapability& cap) {
    const bool ok = std::visit(
        [&](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, mem::MonitorToken>)
            return is_monitor(c);
          else
            return has_grant(c, v);
        },
        cap);
    const std::int64_t who = std::holds_alternative<SandboxId>(cap) ? static_cast<std::int64_t>(std::get<SandboxId>(cap))
                                                                     : sim::kHostSandbox;
    if (!ok) {
      mgr_->engine().record(who, "irq_redirect_rejected", sim::fields("vector", int{v}));
      throw CapabilityError("redirecting vector " + std::to_string(v) + " requires a monitor or a granted sandbox");
    }
    check_destinations(d);
    const std::string dest = d.str();
    table_[v] = RedirectionEntry{v, std::move(d)};
    mgr_->engine().record(who, "irq_redirect", sim::fields("vector", int{v}, "dest", dest));
  }

  void set_handler(LapicHandler h) { handler_ = std::move(h); }

  /// Raises a device interrupt. Returns the number of scheduled deliveries.
  std::size_t raise_irq(Vector v, std::uint64_t cookie = 0) {
    auto& eng = mgr_->engine();
    auto it = table_.find(v);
    if (it == table_.end()) {
      eng.record(sim::kHostSandbox, "irq_unknown_vector", sim::fields("vector", int{v}, "cookie", cookie));
      return 0;
    }
    const auto dests = it->second.destinations.resolve(mgr_->size());
    eng.record(sim::kHostSandbox, "irq_raise", sim::fields("vector", int{v}, "cookie", cookie, "dests", dests.size()));
    for (SandboxId s : dests) {
      eng.schedule_in(cfg_.delivery_latency, sim::EventKind::interrupt, s, [this, s, v, cookie] {
        auto& e = mgr_->engine();
        if (mgr_->state(s) == sandbox::State::halted) {
          e.record(s, "irq_lost", sim::fields("vector", int{v}, "cookie", cookie));
          return;
        }
        e.record(s, "irq_deliver", sim::fields("vector", int{v}, "cookie", cookie));
        if (handler_) handler_(s, v, cookie);
      });
    }
    return dests.size();
  }

  /// Request leg then ack leg; the two legs sum to the IPI round-trip cost.
  /// `on_delivered` runs at the destination, `on_acked` back at the source.
  /// A halted destination loses the IPI and no ack follows.
  void send_ipi(const Ipi& ipi, std::function<void()> on_delivered = {}, std::function<void()> on_acked = {}) {
    if (ipi.src >= mgr_->size() || ipi.dst >= mgr_->size()) throw RangeError("IPI endpoint does not exist");
    if (ipi.src == ipi.dst) throw StateError("IPI source and destination must differ");
    auto& eng = mgr_->engine();
    eng.record(ipi.src, "ipi_send", sim::fields("dst", ipi.dst, "vector", int{ipi.vector}, "tag", to_string(ipi.tag)));
    const auto& costs = mgr_->costs();
    eng.schedule_in(costs.ipi_request(), sim::EventKind::ipi, ipi.dst,
                    [this, ipi, on_delivered = std::move(on_delivered), on_acked = std::move(on_acked)]() mutable {
                      auto& e = mgr_->engine();
                      if (mgr_->state(ipi.dst) == sandbox::State::halted) {
                        e.record(ipi.dst, "ipi_lost", sim::fields("src", ipi.src, "tag", to_string(ipi.tag)));
                        return;
                      }
                      e.record(ipi.dst, "ipi_deliver", sim::fields("src", ipi.src, "tag", to_string(ipi.tag)));
                      if (on_delivered) on_delivered();
                      e.schedule_in(mgr_->costs().ipi_ack(), sim::EventKind::ipi, ipi.src,
                                    [this, ipi, on_acked = std::move(on_acked)] {
                                      mgr_->engine().record(ipi.src, "ipi_ack", sim::fields("from", ipi.dst));
                                      if (on_acked) on_acked();
                                    });
                    });
  }

 private:
  bool is_monitor(const mem::MonitorToken& cap) const {
    for (std::size_t i = 0; i < mgr_->size(); ++i)
      if (mgr_->monitor(static_cast<SandboxId>(i)).token() == cap) return true;
    return false;
  }

  void check_destinations(const Destinations& d) const {
    if (!d.broadcast_all && d.sandboxes.empty()) throw ConfigError("redirection destination set is empty");
    for (auto s : d.sandboxes)
      if (s >= mgr_->size()) throw ConfigError("redirection to unknown sandbox " + std::to_string(s));
  }

  sandbox::SandboxManager* mgr_;
  IrqConfig cfg_;
  std::map<Vector, RedirectionEntry> table_;
  std::set<std::pair<SandboxId, Vector>> grants_;
  LapicHandler handler_;
};

}  // namespace questv::irq
