#include <gtest/gtest.h>

#include <random>

#include "questv/ipc/channel.hpp"
#include "support/small.hpp"

using namespace questv;
using namespace questv::ipc;
using sim::SimTime;
using testing_support::small_sizes;

namespace {

struct Rig {
  sim::Engine e;
  sandbox::SandboxManager m{e, 3, small_sizes()};
  ChannelTable t{m};

  Rig() {
    for (SandboxId s = 0; s < 3; ++s) {
      m.scheduler(s).add_vcpu(sched::VcpuParams{0, sched::VcpuKind::main, SimTime{1000}, SimTime{1000}});
      m.launch(s);
    }
  }
  std::size_t count(std::string_view type) const {
    std::size_t n = 0;
    for (const auto& r : e.trace().records()) n += r.event_type == type;
    return n;
  }
};

}  // namespace

TEST(Mailbox, HeaderLayout) {
  const auto raw = mailbox::encode_header(mailbox::Header{mailbox::kFull, 0x01020304, 0xA0B0C0D0});
  const std::array<std::uint8_t, 9> want{1, 4, 3, 2, 1, 0xD0, 0xC0, 0xB0, 0xA0};
  EXPECT_EQ(raw, want);
  EXPECT_EQ(mailbox::decode_header(raw), (mailbox::Header{1, 0x01020304, 0xA0B0C0D0}));
  std::uint8_t shorty[3]{};
  EXPECT_THROW(mailbox::decode_header(shorty), RangeError);
  EXPECT_FALSE((mailbox::Header{7, 0, 0}.valid()));
  EXPECT_FALSE((mailbox::Header{1, 4088, 0}.valid()));
  EXPECT_TRUE((mailbox::Header{1, 4087, 0}.valid()));
}

TEST(Mailbox, ChunkBoundaries) {
  EXPECT_EQ(mailbox::kMaxPayload, 4087u);
  EXPECT_EQ(mailbox::chunk_count(0), 1u);
  EXPECT_EQ(mailbox::chunk_count(4086), 1u);
  EXPECT_EQ(mailbox::chunk_count(4087), 2u);  // full chunk, then an empty terminator
  EXPECT_EQ(mailbox::chunk_count(4088), 2u);
  EXPECT_EQ(mailbox::chunk_count(8192), 3u);
  std::vector<std::uint8_t> msg(8192);
  const auto parts = mailbox::split(msg);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[0].size(), 4087u);
  EXPECT_EQ(parts[1].size(), 4087u);
  EXPECT_EQ(parts[2].size(), 18u);
  EXPECT_TRUE(mailbox::is_last_chunk(parts[2].size()));
  EXPECT_FALSE(mailbox::is_last_chunk(parts[1].size()));
}

TEST(Fnv1a, KnownValues) {
  EXPECT_EQ(fnv1a({}), 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a(a), 0xaf63dc4c8601ec8cULL);
}

TEST(Channel, CreateErrors) {
  Rig r;
  EXPECT_THROW(r.t.create(1, 1, false), ConfigError);
  EXPECT_THROW(r.t.create(0, 5, false), ConfigError);
  const auto slots = r.t.free_slots();
  EXPECT_EQ(slots, r.m.layout().shared.pages() - 1);  // page 0 holds device locks
  for (std::size_t i = 0; i < slots; ++i) r.t.create(0, 1, false);
  EXPECT_THROW(r.t.create(0, 1, false), AllocationError);
  r.t.destroy(0);
  EXPECT_NO_THROW(r.t.create(0, 2, false));
}

TEST(Channel, PrivateChannelInvisibleToThirdSandbox) {
  Rig r;
  const auto c = r.t.create(0, 1, true);
  EXPECT_TRUE(r.t.peek(0, c.id));
  EXPECT_TRUE(r.t.peek(1, c.id));
  EXPECT_FALSE(r.t.peek(2, c.id));
  EXPECT_EQ(r.count("ept_violation"), 1u);
  const auto pub = r.t.create(0, 1, false);
  EXPECT_TRUE(r.t.peek(2, pub.id));
  EXPECT_THROW(r.t.send(c.id, 2, 0, {1}, false), StateError);
}

TEST(Channel, EmptyMessageRoundTrip) {
  Rig r;
  const auto id = r.t.create(0, 1, false).id;
  SendResult sent;
  PollResult got;
  r.t.send(id, 0, 0, {}, false, [&](const SendResult& s) { sent = s; });
  r.t.receive(id, 1, 0, [&](const PollResult& p) { got = p; });
  r.e.run_until(SimTime{100'000});
  EXPECT_EQ(sent.status, SendStatus::delivered);
  EXPECT_EQ(sent.chunks, 1u);
  ASSERT_EQ(got.status, PollStatus::message);
  EXPECT_TRUE(got.message->bytes.empty());
}

TEST(Channel, SecondSendOnSameDirectionRejected) {
  Rig r;
  const auto id = r.t.create(0, 1, false).id;
  r.t.send(id, 0, 0, {1, 2}, false);
  EXPECT_THROW(r.t.send(id, 0, 0, {3}, false), StateError);
}

TEST(Channel, SkipIfFullConsumesNoSequence) {
  Rig r;
  const auto id = r.t.create(0, 1, false).id;
  r.t.send(id, 0, 0, {1}, false);
  r.e.run_until(SimTime{10'000});
  SendResult skipped;
  r.t.send(id, 0, 0, {2}, true, [&](const SendResult& s) { skipped = s; });
  r.e.run_until(SimTime{20'000});
  EXPECT_EQ(skipped.status, SendStatus::skipped);
  std::vector<std::uint32_t> seqs;
  for (int i = 0; i < 2; ++i) {
    r.t.receive(id, 1, 0, [&](const PollResult& p) { seqs.push_back(p.message->seq); });
    if (i == 0) r.e.run_until(SimTime{30'000});
    if (i == 0) r.t.send(id, 0, 0, {3}, false);
    r.e.run_until(SimTime{40'000 + 10'000 * i});
  }
  EXPECT_EQ(seqs, (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(r.count("msg_missed"), 0u);
}

TEST(Channel, DestroyAbortsInFlightSend) {
  Rig r;
  const auto id = r.t.create(0, 1, false).id;
  SendResult res;
  r.t.send(id, 0, 0, std::vector<std::uint8_t>(20'000, 7), false, [&](const SendResult& s) { res = s; });
  r.e.run_until(SimTime{2'000});  // first chunk written, waiting for the reader
  r.t.destroy(id);
  r.e.run_until(SimTime{100'000});
  EXPECT_EQ(res.status, SendStatus::aborted);
  EXPECT_GE(res.chunks, 1u);
}

TEST(Channel, DamagedHeaderDetectedAndRestored) {
  Rig r;
  const auto c = r.t.create(0, 1, false);
  std::uint8_t junk = 0x5A;
  ASSERT_TRUE(r.m.guest_access(2, c.buffer, mem::AccessKind::write, std::span(&junk, 1)).empty());
  EXPECT_TRUE(r.t.damaged(c.id));
  PollResult got;
  r.t.poll_recv(c.id, 1, 0, [&](const PollResult& p) { got = p; });
  r.e.run_until(SimTime{1000});
  EXPECT_EQ(got.status, PollStatus::damaged);
  EXPECT_THROW(r.t.restore(c.id, r.m.monitor(2).token()), CapabilityError);
  r.t.restore(c.id, r.m.monitor(1).token());
  EXPECT_FALSE(r.t.damaged(c.id));
}

TEST(Channel, CopyCostRoundsUp) {
  Rig r;
  EXPECT_EQ(r.t.copy_cost(0).cycles, 0u);
  EXPECT_EQ(r.t.copy_cost(1).cycles, 1u);
  EXPECT_EQ(r.t.copy_cost(8).cycles, 1u);
  EXPECT_EQ(r.t.copy_cost(9).cycles, 2u);
}

// Random payloads arrive intact and in order, both directions.
TEST(ChannelProperty, RandomPayloadsRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> size(0, 100'000);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 40; ++trial) {
    Rig r;
    const auto id = r.t.create(0, 1, trial % 2 == 0).id;
    const SandboxId from = trial % 3 == 0 ? 1 : 0, to = 1 - from;
    std::vector<std::uint8_t> msg(size(rng));
    for (auto& b : msg) b = static_cast<std::uint8_t>(byte(rng));
    SendResult sent;
    PollResult got;
    r.t.send(id, from, 0, msg, false, [&](const SendResult& s) { sent = s; });
    r.t.receive(id, to, 0, [&](const PollResult& p) { got = p; });
    r.e.run_until(SimTime{10'000'000});
    ASSERT_EQ(sent.status, SendStatus::delivered);
    EXPECT_EQ(sent.chunks, msg.size() / 4087 + 1);
    ASSERT_EQ(got.status, PollStatus::message);
    EXPECT_EQ(got.message->bytes, msg);
  }
}
