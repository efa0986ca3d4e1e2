#include <gtest/gtest.h>

#include "questv/sandbox/sandbox.hpp"
#include "support/small.hpp"

using namespace questv;
using namespace questv::sandbox;
using sim::SimTime;
using testing_support::small_sizes;

namespace {

std::size_t count(const sim::Engine& e, std::string_view type) {
  std::size_t n = 0;
  for (const auto& r : e.trace().records()) n += r.event_type == type;
  return n;
}

}  // namespace

TEST(Sandbox, ExitEnterRoundTripCosts) {
  sim::Engine e;
  SandboxManager m(e, 2, small_sizes());
  m.launch(0);
  m.launch(1);
  const auto trap_at = m.vm_exit(0, ExitReason::forced);
  EXPECT_EQ(trap_at, SimTime{707});
  EXPECT_EQ(m.state(0), State::trapped);
  e.run_until(SimTime{10'000});
  // No trap handler: the monitor resumes the guest directly.
  EXPECT_EQ(m.state(0), State::running);
  EXPECT_EQ(m.sandbox(0).trapped_cycles, SimTime{707 + 823});
  EXPECT_EQ(m.sandbox(0).vm_exit_count, 1u);
  EXPECT_EQ(m.sandbox(1).vm_exit_count, 0u);
  EXPECT_EQ(count(e, "vm_entered"), 1u);
}

TEST(Sandbox, StateErrors) {
  sim::Engine e;
  SandboxManager m(e, 1, small_sizes());
  EXPECT_THROW(m.vm_exit(0, ExitReason::forced), StateError);  // not launched
  m.launch(0);
  EXPECT_THROW(m.launch(0), StateError);
  EXPECT_THROW(m.vm_enter(0), StateError);
  EXPECT_THROW(m.begin_recovery(0), StateError);
  m.set_trap_handler([](SandboxId) {});
  m.vm_exit(0, ExitReason::forced);
  EXPECT_THROW(m.vm_exit(0, ExitReason::forced), StateError);
  m.vm_enter(0);
  EXPECT_THROW(m.vm_enter(0), StateError);  // already entering
  e.run_until(SimTime{5000});
  EXPECT_TRUE(m.running(0));
}

TEST(Sandbox, HaltCancelsEntryAndAllowsRelaunch) {
  sim::Engine e;
  SandboxManager m(e, 1, small_sizes());
  m.set_trap_handler([&](SandboxId s) { m.vm_enter(s); });
  m.launch(0);
  m.vm_exit(0, ExitReason::forced);
  e.run_until(SimTime{800});  // trap handled, entry in flight
  m.halt(0);
  e.run_until(SimTime{5000});
  EXPECT_EQ(m.state(0), State::halted);
  EXPECT_EQ(count(e, "vm_entered"), 0u);
  m.launch(0);
  EXPECT_TRUE(m.running(0));
  EXPECT_NE(e.trace().records().back().detail.find("relaunch=1"), std::string::npos);
}

TEST(Sandbox, IpiExitIsFree) {
  sim::Engine e;
  SandboxManager m(e, 1, small_sizes());
  m.launch(0);
  EXPECT_EQ(m.vm_exit(0, ExitReason::ipi), SimTime{0});
}

TEST(Sandbox, TrappedSandboxConsumesNoBudget) {
  sim::Engine e;
  SandboxManager m(e, 1, small_sizes());
  auto& sch = m.scheduler(0);
  sch.add_vcpu(sched::VcpuParams{0, sched::VcpuKind::main, SimTime{1000}, SimTime{2000}});
  m.set_trap_handler([](SandboxId) {});  // stays trapped
  m.launch(0);
  sch.submit(0, SimTime{100'000});
  e.run_until(SimTime{100});
  m.vm_exit(0, ExitReason::forced);
  e.run_until(SimTime{50'000});
  EXPECT_EQ(sch.vcpu(0).fg_executed().cycles + sch.vcpu(0).bg_executed().cycles, 100u);
}

TEST(Sandbox, GuestViolationTrapsOnlyOffender) {
  sim::Engine e;
  SandboxManager m(e, 2, small_sizes());
  m.set_trap_handler([](SandboxId) {});
  m.launch(0);
  m.launch(1);
  const auto h1 = m.kernel_hash(1);
  std::vector<std::uint8_t> buf(16, 0xAB);
  const auto target = m.layout().kernels[1].begin;
  const auto v = m.guest_access_or_trap(0, mem::Gpa{target}, mem::AccessKind::write, buf);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].gpa.value, target);
  EXPECT_EQ(m.state(0), State::trapped);
  EXPECT_TRUE(m.running(1));
  EXPECT_EQ(m.kernel_hash(1), h1);
  // The same write from the owner succeeds.
  EXPECT_TRUE(m.guest_access(1, mem::Gpa{target}, mem::AccessKind::write, buf).empty());
  EXPECT_NE(m.kernel_hash(1), h1);
}

TEST(Sandbox, EptMutationNeedsOwnToken) {
  sim::Engine e;
  SandboxManager m(e, 2, small_sizes());
  const auto mon0 = m.monitor_hash(0);
  const auto k = m.layout().kernels[0].begin;
  EXPECT_THROW(m.ept_set_perms(0, mem::Gpa{k}, 1, mem::Permissions::r(), m.monitor(1).token()), CapabilityError);
  EXPECT_EQ(m.monitor_hash(0), mon0);
  m.ept_set_perms(0, mem::Gpa{k}, 1, mem::Permissions::r(), m.monitor(0).token());
  EXPECT_NE(m.monitor_hash(0), mon0);  // EPT data region mirrors the table
}

TEST(Sandbox, PreemptionTimeoutForcesExits) {
  sim::Engine e;
  SandboxManager m(e, 1, small_sizes());
  m.launch(0);
  m.enable_preemption_timeout(0, SimTime{10'000});
  e.run_until(SimTime{55'000});
  EXPECT_EQ(m.sandbox(0).vm_exit_count, 5u);
  EXPECT_TRUE(m.running(0));
}

TEST(CostModel, IpiLegsSumToRoundTrip) {
  CostModel c;
  EXPECT_EQ(c.ipi_request().cycles, 646u);
  EXPECT_EQ(c.ipi_ack().cycles, 645u);
  for (std::uint64_t rt = 0; rt < 50; ++rt) {
    c.ipi_round_trip = SimTime{rt};
    EXPECT_EQ(c.ipi_request().cycles + c.ipi_ack().cycles, rt);
  }
}
