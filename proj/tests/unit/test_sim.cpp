#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "questv/sim/engine.hpp"

using namespace questv;
using namespace questv::sim;

TEST(Engine, FirstEventGetsIdOne) {
  Engine e;
  EXPECT_EQ(e.schedule(SimTime{0}, EventKind::timer, 0), 1u);
  EXPECT_EQ(e.schedule(SimTime{0}, EventKind::timer, 0), 2u);
}

TEST(Engine, TiesDispatchInInsertionOrder) {
  Engine e;
  std::vector<int> order;
  e.schedule(SimTime{5}, EventKind::timer, 0, [&] { order.push_back(1); });
  e.schedule(SimTime{5}, EventKind::timer, 0, [&] { order.push_back(2); });
  e.schedule(SimTime{3}, EventKind::timer, 0, [&] { order.push_back(0); });
  e.run_until(SimTime{10});
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2}));
}

TEST(Engine, PastEventRejected) {
  Engine e;
  e.run_until(SimTime{20});
  EXPECT_THROW(e.schedule(SimTime{10}, EventKind::timer, 0), PastTimeError);
  EXPECT_THROW(e.run_until(SimTime{19}), PastTimeError);
}

TEST(Engine, EmptyQueueAdvancesClock) {
  Engine e;
  EXPECT_TRUE(e.run_until(SimTime{100}).empty());
  EXPECT_EQ(e.now(), SimTime{100});
}

TEST(Engine, RunUntilReturnsWindowRecords) {
  Engine e;
  e.schedule(SimTime{50}, EventKind::timer, 0, [&] { e.record(0, "tick"); });
  e.schedule(SimTime{150}, EventKind::timer, 0, [&] { e.record(0, "late"); });
  auto recs = e.run_until(SimTime{100});
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].at, SimTime{50});
  EXPECT_EQ(recs[0].event_type, "tick");
  EXPECT_EQ(e.queued(), 1u);
  recs = e.run_until(SimTime{200});
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].event_type, "late");
}

TEST(Engine, ScheduleInOverflow) {
  Engine e;
  EXPECT_NO_THROW(e.schedule_in(SimTime::max(), EventKind::timer, 0));
  e.run_until(SimTime{1});
  EXPECT_THROW(e.schedule_in(SimTime::max(), EventKind::timer, 0), OverflowError);
}

TEST(Engine, StopRequestLeavesClockAtLastEvent) {
  Engine e;
  e.schedule(SimTime{10}, EventKind::timer, 0, [&] { e.request_stop(); });
  e.schedule(SimTime{20}, EventKind::timer, 0);
  EXPECT_EQ(e.advance_until(SimTime{100}), 1u);
  EXPECT_EQ(e.now(), SimTime{10});
  EXPECT_EQ(e.queued(), 1u);
}

TEST(Engine, InvalidConfigRejected) {
  SimConfig c;
  c.cycles_per_second = 0;
  EXPECT_THROW(Engine{c}, ConfigError);
  c = SimConfig{};
  c.horizon = SimTime{0};
  EXPECT_THROW(Engine{c}, ConfigError);
}

// Random schedules: dispatch order is causal and every event is accounted
// for (dispatched or still queued).
TEST(EngineProperty, CausalityAndConservation) {
  std::mt19937_64 rng(42);
  for (int round = 0; round < 50; ++round) {
    Engine e;
    std::vector<std::pair<std::uint64_t, EventId>> seen;
    std::uniform_int_distribution<std::uint64_t> t(0, 1000);
    const int n = 200;
    for (int i = 0; i < n; ++i) {
      const auto at = t(rng);
      const auto id = e.schedule(SimTime{at}, EventKind::timer, 0);
      (void)id;
    }
    e.set_dispatch_hook([&](const Event& ev) { seen.emplace_back(ev.at.cycles, ev.id); });
    const auto cut = t(rng);
    e.advance_until(SimTime{cut});
    for (std::size_t i = 1; i < seen.size(); ++i) EXPECT_LT(seen[i - 1], seen[i]);
    EXPECT_EQ(seen.size() + e.queued(), static_cast<std::size_t>(n));
    EXPECT_EQ(e.dispatched_count() + e.queued(), e.scheduled_count());
  }
}

TEST(Time, CyclesFromMillis) {
  const SimConfig c;
  EXPECT_EQ(cycles_from_millis(0, c).cycles, 0u);
  EXPECT_EQ(cycles_from_millis(500, c).cycles, 1'000'000'000u);
  EXPECT_EQ(cycles_from_millis(3, c).cycles, 6'000'000u);
  SimConfig slow;
  slow.cycles_per_second = 1000;
  EXPECT_EQ(cycles_from_millis(2.5, slow).cycles, 3u);  // half a cycle rounds up
  EXPECT_EQ(cycles_from_millis(2.25, slow).cycles, 2u);
  EXPECT_THROW(cycles_from_millis(-1, c), RangeError);
  EXPECT_THROW(cycles_from_millis(1e13, c), OverflowError);
  EXPECT_DOUBLE_EQ(millis_from_cycles(SimTime{6'000'000}, c), 3.0);
}

TEST(Trace, CsvRoundTrip) {
  Trace t;
  t.append(SimTime{1}, kHostSandbox, "icmp_req", fields("flow", 0, "seq", 3));
  t.append(SimTime{2}, 2, "vm_exit", fields("reason", "forced", "ok", true, "x", 0.5));
  const auto csv = t.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), Trace::kCsvHeader);
  EXPECT_NE(csv.find("1,host,icmp_req,flow=0;seq=3"), std::string::npos);
  EXPECT_NE(csv.find("2,2,vm_exit,reason=forced;ok=1;x=0.5"), std::string::npos);
  std::istringstream in(csv);
  const auto back = Trace::parse_csv(in);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].sandbox, kHostSandbox);
  EXPECT_EQ(back[0].u64("seq"), 3u);
  EXPECT_EQ(back[1].str("reason"), "forced");
  EXPECT_DOUBLE_EQ(back[1].f64("x"), 0.5);
  EXPECT_FALSE(back[1].field("missing"));
}

TEST(Trace, ParseRejectsBadInput) {
  std::istringstream bad_header("a,b,c,d\n");
  EXPECT_THROW(Trace::parse_csv(bad_header), Error);
  std::istringstream bad_line(std::string(Trace::kCsvHeader) + "\n12,0\n");
  EXPECT_THROW(Trace::parse_csv(bad_line), Error);
}
