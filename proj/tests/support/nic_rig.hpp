#pragma once

#include "questv/recovery/recovery.hpp"
#include "support/small.hpp"

namespace testing_support {

/// N sandboxes, each with a Main VCPU 0 and an I/O VCPU 1, one NIC on
/// vector 0x30 with a driver in every sandbox and one interface 10.0.0.(s+1).
struct NicRig {
  questv::sim::Engine e;
  questv::sandbox::SandboxManager m;
  questv::irq::IoApic apic{m};
  questv::dev::NicLayer nic{m, apic};
  questv::ipc::ChannelTable chans{m};
  questv::dev::DeviceId dev = 0;
  std::vector<questv::dev::IcmpPacket> replies;
  std::vector<questv::SandboxId> repliers;

  explicit NicRig(std::size_t n = 4) : m(e, n, small_sizes()) {
    using namespace questv;
    dev = nic.add_device(0x30);
    for (SandboxId s = 0; s < n; ++s) {
      auto& sch = m.scheduler(s);
      sch.add_vcpu(sched::VcpuParams{0, sched::VcpuKind::main, sim::SimTime{20'000}, sim::SimTime{100'000}});
      sch.add_vcpu(sched::VcpuParams{1, sched::VcpuKind::io, sim::SimTime{10'000}, sim::SimTime{100'000}});
      nic.attach(s, dev, 1, sched::Priority{0});
      nic.add_vif(s, dev, ip(s), dev::Mac{0x02, 0, 0, 0, 0, static_cast<std::uint8_t>(s)});
      m.launch(s);
    }
    nic.set_reply_sink([this](const dev::IcmpPacket& p, SandboxId by) {
      replies.push_back(p);
      repliers.push_back(by);
    });
  }

  static std::uint32_t ip(questv::SandboxId s) { return questv::dev::parse_ip("10.0.0.1") + s; }

  void ping(questv::SandboxId to, std::uint64_t seq) {
    questv::dev::IcmpPacket p;
    p.seq = seq;
    p.src_ip = questv::dev::parse_ip("192.168.1.9");
    p.dst_ip = ip(to);
    p.timestamp = e.now();
    nic.nic_rx(dev, p);
  }

  std::size_t count(std::string_view type, std::int64_t sandbox = -2) const {
    std::size_t n = 0;
    for (const auto& r : e.trace().records())
      n += r.event_type == type && (sandbox == -2 || r.sandbox == sandbox);
    return n;
  }
};

}  // namespace testing_support
