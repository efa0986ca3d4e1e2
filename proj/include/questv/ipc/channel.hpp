#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "questv/errors.hpp"
#include "questv/ipc/mailbox.hpp"
#include "questv/sandbox/sandbox.hpp"

namespace questv::ipc {

using ChannelId = std::uint32_t;

struct IpcConfig {
  std::uint64_t copy_bytes_per_cycle = 8;
  sim::SimTime poll_cost{50};

  bool operator==(const IpcConfig&) const = default;
};

struct Channel {
  ChannelId id = 0;
  SandboxId a = 0;
  SandboxId b = 0;
  mem::Gpa buffer;
  std::uint32_t slot = 0;
  bool is_private = false;
  bool destroyed = false;

  bool endpoint(SandboxId s) const { return s == a || s == b; }
  SandboxId peer(SandboxId s) const { return s == a ? b : a; }
};

struct Message {
  std::uint32_t seq = 0;
  std::vector<std::uint8_t> bytes;
};

enum class SendStatus : std::uint8_t { delivered, skipped, aborted };

struct SendResult {
  SendStatus status = SendStatus::aborted;
  std::uint32_t seq = 0;  // seq of the first chunk
  std::size_t chunks = 0;
  sim::SimTime cycles;
};

enum class PollStatus : std::uint8_t { empty, chunk, message, damaged, fault };

struct PollResult {
  PollStatus status = PollStatus::empty;
  std::optional<Message> message;
};

/// Shared-memory mailbox channels. Buffers live in the shared region, one
/// 4KB page each; page 0 of the region is reserved for device locks. Private
/// channels are unmapped from every EPT except the two endpoints'.
class ChannelTable {
 public:
  static constexpr std::uint32_t kReservedSlots = 1;

  explicit ChannelTable(sandbox::SandboxManager& mgr, IpcConfig cfg = {}) : mgr_(&mgr), cfg_(cfg) {
    if (cfg_.copy_bytes_per_cycle == 0) throw ConfigError("copy rate must be > 0");
    const auto pages = mgr.layout().shared.pages();
    for (std::uint64_t s = kReservedSlots; s < pages; ++s) free_.insert(static_cast<std::uint32_t>(s));
  }

  const IpcConfig& config() const noexcept { return cfg_; }
  std::size_t free_slots() const noexcept { return free_.size(); }
  const std::vector<Channel>& channels() const noexcept { return channels_; }
  const Channel& channel(ChannelId id) const { return channels_.at(id); }

  sim::SimTime copy_cost(std::size_t bytes) const {
    return sim::SimTime{(bytes + cfg_.copy_bytes_per_cycle - 1) / cfg_.copy_bytes_per_cycle};
  }

  Channel create(SandboxId a, SandboxId b, bool is_private) {
    if (a == b) throw ConfigError("channel endpoints must differ");
    if (a >= mgr_->size() || b >= mgr_->size()) throw ConfigError("channel endpoint does not exist");
    if (free_.empty()) throw AllocationError("shared region has no free channel slot");
    const std::uint32_t slot = *free_.begin();
    free_.erase(free_.begin());
    Channel c;
    c.id = static_cast<ChannelId>(channels_.size());
    c.a = a;
    c.b = b;
    c.slot = slot;
    c.buffer = mem::Gpa{mgr_->layout().shared.begin + std::uint64_t{slot} * mem::kPageSize};
    c.is_private = is_private;
    channels_.push_back(c);
    state_.emplace_back();
    apply_mappings(c);
    mgr_->host().fill(mem::Hpa{c.buffer.value}, mailbox::kSize, 0);
    mgr_->sandbox(a).channels.push_back(c.id);
    mgr_->sandbox(b).channels.push_back(c.id);
    mgr_->engine().record(sim::kHostSandbox, "channel_create",
                          sim::fields("chan", c.id, "a", a, "b", b, "private", is_private, "gpa",
                                      sandbox::SandboxManager::hex(c.buffer.value)));
    return channels_.back();
  }

  /// Tears a channel down; in-flight sends abort. The page returns to the
  /// shared pool mapped RW everywhere.
  void destroy(ChannelId id) {
    auto& c = channels_.at(id);
    if (c.destroyed) return;
    c.destroyed = true;
    ++state_.at(id).epoch;
    for (std::size_t s = 0; s < mgr_->size(); ++s) {
      const auto sid = static_cast<SandboxId>(s);
      mgr_->ept_map(sid, c.buffer, mem::Hpa{c.buffer.value}, mem::Permissions::rw(), 1, mgr_->monitor(sid).token());
    }
    mgr_->host().fill(mem::Hpa{c.buffer.value}, mailbox::kSize, 0);
    free_.insert(c.slot);
    mgr_->engine().record(sim::kHostSandbox, "channel_destroy", sim::fields("chan", id));
  }

  /// Header is outside the protocol's value set: the buffer was overwritten.
  bool damaged(ChannelId id) const {
    const auto& c = channels_.at(id);
    std::uint8_t raw[mailbox::kPayloadOffset];
    mgr_->host().read(mem::Hpa{c.buffer.value}, raw);
    return !mailbox::decode_header(raw).valid();
  }

  /// Monitor-side re-creation of a channel in place: clears the mailbox,
  /// reapplies the access mappings and drops partial reassembly state.
  void restore(ChannelId id, const mem::MonitorToken& cap) {
    auto& c = channels_.at(id);
    if (!(mgr_->monitor(c.a).token() == cap) && !(mgr_->monitor(c.b).token() == cap))
      throw CapabilityError("channel restore requires an endpoint monitor");
    if (c.destroyed) throw StateError("cannot restore a destroyed channel");
    auto& st = state_.at(id);
    ++st.epoch;
    for (auto& d : st.dir) {
      d.partial.clear();
      d.partial_chunks = 0;
      d.partial_first.reset();
      d.busy = false;
    }
    apply_mappings(c);
    mgr_->host().fill(mem::Hpa{c.buffer.value}, mailbox::kSize, 0);
    const SandboxId who = mgr_->monitor(c.a).token() == cap ? c.a : c.b;
    mgr_->engine().record(who, "channel_restore", sim::fields("chan", id));
  }

  /// Reads the mailbox header as sandbox s would; nullopt on EPT violation.
  std::optional<mailbox::Header> peek(SandboxId s, ChannelId id) {
    const auto& c = channels_.at(id);
    std::uint8_t raw[mailbox::kPayloadOffset];
    if (!mgr_->guest_access(s, c.buffer, mem::AccessKind::read, raw).empty()) return std::nullopt;
    return mailbox::decode_header(raw);
  }

  /// Sends `bytes` chunk by chunk from a thread on (sender, vcpu). Every poll
  /// and copy is VCPU work. With `skip_if_full` the send gives up if the
  /// mailbox is not empty at its first poll.
  void send(ChannelId id, SandboxId sender, sched::VcpuId vcpu, std::vector<std::uint8_t> bytes, bool skip_if_full,
            std::function<void(const SendResult&)> done = {}) {
    const auto& c = channels_.at(id);
    if (!c.endpoint(sender)) throw StateError("sender is not a channel endpoint");
    auto op = std::make_shared<SendOp>();
    op->chan = id;
    op->sender = sender;
    op->vcpu = vcpu;
    op->bytes = std::move(bytes);
    op->n_chunks = mailbox::chunk_count(op->bytes.size());
    op->skip_if_full = skip_if_full;
    op->start = mgr_->engine().now();
    op->epoch = state_.at(id).epoch;
    op->done = std::move(done);
    auto& d = dir_of(id, sender);
    if (d.busy) throw StateError("a send is already in progress on this channel direction");
    d.busy = true;
    mgr_->engine().record(sender, "msg_send_start",
                          sim::fields("chan", id, "bytes", op->bytes.size(), "chunks", op->n_chunks, "fnv", fnv1a(op->bytes)));
    send_poll(op);
  }

  /// One poll of the mailbox by a thread on (receiver, vcpu).
  void poll_recv(ChannelId id, SandboxId receiver, sched::VcpuId vcpu, std::function<void(const PollResult&)> done) {
    const auto& c = channels_.at(id);
    if (!c.endpoint(receiver)) throw StateError("receiver is not a channel endpoint");
    mgr_->scheduler(receiver).submit(vcpu, cfg_.poll_cost, [this, id, receiver, vcpu, done = std::move(done)]() mutable {
      recv_after_poll(id, receiver, vcpu, std::move(done));
    });
  }

  /// Busy-polls until a complete message, a damaged mailbox or a fault.
  void receive(ChannelId id, SandboxId receiver, sched::VcpuId vcpu, std::function<void(const PollResult&)> done) {
    poll_recv(id, receiver, vcpu, [this, id, receiver, vcpu, done = std::move(done)](const PollResult& r) mutable {
      if (r.status == PollStatus::empty || r.status == PollStatus::chunk)
        receive(id, receiver, vcpu, std::move(done));
      else if (done)
        done(r);
    });
  }

 private:
  struct Direction {
    std::uint32_t next_seq = 0;  // sender side
    bool busy = false;
    std::optional<std::uint32_t> expected;  // receiver side
    std::vector<std::uint8_t> partial;
    std::optional<std::uint32_t> partial_first;
    std::size_t partial_chunks = 0;
    std::map<std::uint32_t, sim::SimTime> started;  // first seq -> send start
  };

  struct State {
    std::uint64_t epoch = 0;
    Direction dir[2];  // [0]: a -> b, [1]: b -> a
  };

  struct SendOp {
    ChannelId chan = 0;
    SandboxId sender = 0;
    sched::VcpuId vcpu = 0;
    std::vector<std::uint8_t> bytes;
    std::size_t n_chunks = 0;
    std::size_t next_chunk = 0;
    std::uint32_t first_seq = 0;
    bool skip_if_full = false;
    sim::SimTime start;
    std::uint64_t epoch = 0;
    std::function<void(const SendResult&)> done;
  };

  Direction& dir_of(ChannelId id, SandboxId sender) { return state_.at(id).dir[channels_.at(id).a == sender ? 0 : 1]; }

  void apply_mappings(const Channel& c) {
    for (std::size_t s = 0; s < mgr_->size(); ++s) {
      const auto sid = static_cast<SandboxId>(s);
      const auto& tok = mgr_->monitor(sid).token();
      if (!c.is_private || c.endpoint(sid))
        mgr_->ept_map(sid, c.buffer, mem::Hpa{c.buffer.value}, mem::Permissions::rw(), 1, tok);
      else
        mgr_->ept_unmap(sid, c.buffer, 1, tok);
    }
  }

  bool stale(const SendOp& op) const {
    return channels_.at(op.chan).destroyed || state_.at(op.chan).epoch != op.epoch;
  }

  void finish(const std::shared_ptr<SendOp>& op, SendStatus st) {
    if (!stale(*op)) dir_of(op->chan, op->sender).busy = false;
    SendResult r{st, op->first_seq, op->next_chunk, mgr_->engine().now() - op->start};
    if (st == SendStatus::delivered)
      mgr_->engine().record(op->sender, "msg_send_done",
                            sim::fields("chan", op->chan, "seq", op->first_seq, "bytes", op->bytes.size(), "chunks",
                                        op->n_chunks, "fnv", fnv1a(op->bytes), "cycles", r.cycles));
    else
      mgr_->engine().record(op->sender, st == SendStatus::skipped ? "msg_send_skipped" : "msg_send_aborted",
                            sim::fields("chan", op->chan, "bytes", op->bytes.size()));
    if (op->done) op->done(r);
  }

  void send_poll(const std::shared_ptr<SendOp>& op) {
    mgr_->scheduler(op->sender).submit(op->vcpu, cfg_.poll_cost, [this, op] { send_after_poll(op); });
  }

  void send_after_poll(const std::shared_ptr<SendOp>& op) {
    if (stale(*op)) return finish(op, SendStatus::aborted);
    const auto& c = channels_.at(op->chan);
    std::uint8_t status = 0;
    if (!mgr_->guest_access(op->sender, c.buffer, mem::AccessKind::read, std::span(&status, 1)).empty())
      return finish(op, SendStatus::aborted);
    if (status != mailbox::kEmpty) {
      if (op->skip_if_full && op->next_chunk == 0) return finish(op, SendStatus::skipped);
      return send_poll(op);
    }
    const std::size_t off = op->next_chunk * mailbox::kMaxPayload;
    const std::size_t len = std::min(mailbox::kMaxPayload, op->bytes.size() - std::min(off, op->bytes.size()));
    mgr_->scheduler(op->sender).submit(op->vcpu, copy_cost(len + mailbox::kPayloadOffset),
                                       [this, op, off, len] { send_write_chunk(op, off, len); });
  }

  void send_write_chunk(const std::shared_ptr<SendOp>& op, std::size_t off, std::size_t len) {
    if (stale(*op)) return finish(op, SendStatus::aborted);
    const auto& c = channels_.at(op->chan);
    auto& d = dir_of(op->chan, op->sender);
    const std::uint32_t seq = d.next_seq;
    // Payload, then length and seq, then the status flip.
    if (len > 0) {
      std::span<std::uint8_t> payload(op->bytes.data() + off, len);
      if (!mgr_->guest_access(op->sender, c.buffer + mailbox::kPayloadOffset, mem::AccessKind::write, payload).empty())
        return finish(op, SendStatus::aborted);
    }
    auto hdr = mailbox::encode_header(mailbox::Header{mailbox::kFull, static_cast<std::uint32_t>(len), seq});
    if (!mgr_->guest_access(op->sender, c.buffer + mailbox::kLengthOffset, mem::AccessKind::write,
                            std::span(hdr.data() + mailbox::kLengthOffset, 8))
             .empty())
      return finish(op, SendStatus::aborted);
    std::uint8_t full = mailbox::kFull;
    if (!mgr_->guest_access(op->sender, c.buffer, mem::AccessKind::write, std::span(&full, 1)).empty())
      return finish(op, SendStatus::aborted);
    if (op->next_chunk == 0) {
      op->first_seq = seq;
      d.started[seq] = op->start;
    }
    ++d.next_seq;
    ++op->next_chunk;
    mgr_->engine().record(op->sender, "msg_chunk", sim::fields("chan", op->chan, "seq", seq, "len", len));
    if (op->next_chunk == op->n_chunks) return finish(op, SendStatus::delivered);
    send_poll(op);
  }

  void recv_after_poll(ChannelId id, SandboxId receiver, sched::VcpuId vcpu,
                       std::function<void(const PollResult&)> done) {
    auto deliver = [&](PollResult r) {
      if (done) done(r);
    };
    const auto& c = channels_.at(id);
    if (c.destroyed) return deliver(PollResult{PollStatus::fault, {}});
    std::uint8_t raw[mailbox::kPayloadOffset];
    if (!mgr_->guest_access(receiver, c.buffer, mem::AccessKind::read, raw).empty())
      return deliver(PollResult{PollStatus::fault, {}});
    const auto h = mailbox::decode_header(raw);
    if (!h.valid()) {
      mgr_->engine().record(receiver, "msg_damaged", sim::fields("chan", id, "status", int{h.status}));
      return deliver(PollResult{PollStatus::damaged, {}});
    }
    if (h.status == mailbox::kEmpty) return deliver(PollResult{PollStatus::empty, {}});
    mgr_->scheduler(receiver).submit(vcpu, copy_cost(h.length + mailbox::kPayloadOffset),
                                     [this, id, receiver, done = std::move(done)]() mutable {
                                       recv_copy_out(id, receiver, std::move(done));
                                     });
  }

  void recv_copy_out(ChannelId id, SandboxId receiver, std::function<void(const PollResult&)> done) {
    auto deliver = [&](PollResult r) {
      if (done) done(r);
    };
    const auto& c = channels_.at(id);
    if (c.destroyed) return deliver(PollResult{PollStatus::fault, {}});
    std::vector<std::uint8_t> raw(mailbox::kSize);
    if (!mgr_->guest_access(receiver, c.buffer, mem::AccessKind::read, raw).empty())
      return deliver(PollResult{PollStatus::fault, {}});
    const auto h = mailbox::decode_header(raw);
    if (!h.valid() || h.status != mailbox::kFull) {
      if (!h.valid()) mgr_->engine().record(receiver, "msg_damaged", sim::fields("chan", id, "status", int{h.status}));
      return deliver(PollResult{h.valid() ? PollStatus::empty : PollStatus::damaged, {}});
    }
    std::uint8_t empty = mailbox::kEmpty;
    mgr_->guest_access(receiver, c.buffer, mem::AccessKind::write, std::span(&empty, 1));

    auto& d = state_.at(id).dir[c.a == receiver ? 1 : 0];
    if (d.expected && h.seq != *d.expected) {
      if (h.seq > *d.expected) {
        mgr_->engine().record(receiver, "msg_missed",
                              sim::fields("chan", id, "from", *d.expected, "count", h.seq - *d.expected));
      } else {
        mgr_->engine().record(receiver, "msg_damaged", sim::fields("chan", id, "stale_seq", h.seq));
        return deliver(PollResult{PollStatus::damaged, {}});
      }
      d.partial.clear();
      d.partial_chunks = 0;
      d.partial_first.reset();
    }
    d.expected = h.seq + 1;
    if (!d.partial_first) d.partial_first = h.seq;
    d.partial.insert(d.partial.end(), raw.begin() + mailbox::kPayloadOffset,
                     raw.begin() + static_cast<std::ptrdiff_t>(mailbox::kPayloadOffset + h.length));
    ++d.partial_chunks;
    if (!mailbox::is_last_chunk(h.length)) return deliver(PollResult{PollStatus::chunk, {}});

    Message m{*d.partial_first, std::move(d.partial)};
    sim::SimTime latency{};
    if (auto it = d.started.find(m.seq); it != d.started.end()) {
      latency = mgr_->engine().now() - it->second;
      d.started.erase(it);
    }
    mgr_->engine().record(receiver, "msg_recv_done",
                          sim::fields("chan", id, "seq", m.seq, "bytes", m.bytes.size(), "chunks", d.partial_chunks,
                                      "fnv", fnv1a(m.bytes), "latency", latency));
    d.partial = {};
    d.partial_chunks = 0;
    d.partial_first.reset();
    deliver(PollResult{PollStatus::message, std::move(m)});
  }

  sandbox::SandboxManager* mgr_;
  IpcConfig cfg_;
  std::vector<Channel> channels_;
  std::vector<State> state_;
  std::set<std::uint32_t> free_;
};

}  // namespace questv::ipc
