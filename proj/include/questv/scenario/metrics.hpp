#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "questv/sim/trace.hpp"
#include "questv/util/sha256.hpp"

namespace questv::scenario {

using nlohmann::json;
using sim::TraceRecord;

struct LinearFit {
  double slope = 0, intercept = 0, r2 = 0;
};

/// Ordinary least squares of y on x with the coefficient of determination.
inline LinearFit fit_affine(const std::vector<double>& x, const std::vector<double>& y) {
  LinearFit f;
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2 || x.size() != y.size()) return f;
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.intercept + f.slope * x[i]);
    ss_res += e * e;
  }
  f.r2 = syy == 0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

namespace detail {

/// k<i>/m<i> hash fields of a blast or recovery record.
inline std::map<std::string, std::string> hash_fields(const TraceRecord& r) {
  std::map<std::string, std::string> out;
  std::string_view rest = r.detail;
  while (!rest.empty()) {
    const auto semi = rest.find(';');
    const auto pair = rest.substr(0, semi);
    const auto eq = pair.find('=');
    if (eq != std::string_view::npos && eq >= 2 && (pair[0] == 'k' || pair[0] == 'm') &&
        std::all_of(pair.begin() + 1, pair.begin() + static_cast<std::ptrdiff_t>(eq),
                    [](char c) { return c >= '0' && c <= '9'; }))
      out.emplace(std::string(pair.substr(0, eq)), std::string(pair.substr(eq + 1)));
    if (semi == std::string_view::npos) break;
    rest.remove_prefix(semi + 1);
  }
  return out;
}

struct RecoveryAcc {
  std::int64_t origin = 0;
  std::string mode;
  std::optional<std::int64_t> target;
  std::uint64_t fault_at = 0;
  std::uint64_t healthy_at = 0;
  std::uint64_t downtime = 0;
  std::uint64_t phase_sum = 0;
  bool healthy = false;
  bool done = false;
  bool fallback = false;
  std::uint64_t violations = 0;
  bool in_blast = false;
  json phases = json::array();
  std::string restored;
  std::map<std::string, std::string> before, after_blast, at_done;
};

}  // namespace detail

/// Every metric is derived from the trace alone, so recomputing from a
/// parsed trace.csv reproduces metrics.json.
inline json compute_metrics(const std::vector<TraceRecord>& recs) {
  using detail::RecoveryAcc;
  json m;
  std::ostringstream csv;
  sim::Trace::write_csv(csv, recs);
  m["trace_sha256"] = util::sha256_hex(csv.str());
  m["records"] = recs.size();
  m["end_cycles"] = recs.empty() ? 0 : recs.back().at.cycles;
  m["completed"] = false;

  std::int64_t n = 0;
  for (const auto& r : recs)
    if (r.sandbox >= 0) n = std::max(n, r.sandbox + 1);

  struct PerSandbox {
    std::uint64_t vm_exits = 0, icmp_replies = 0, irq_handled = 0, irq_discarded = 0, irq_lost = 0;
    std::uint64_t msgs_sent = 0, msgs_received = 0, msgs_missed = 0, msgs_damaged = 0;
    std::uint64_t rtt_sum = 0;
  };
  std::vector<PerSandbox> sb(static_cast<std::size_t>(n));

  struct Flow {
    std::uint64_t requests = 0, replies = 0, missed = 0;
    bool in_order = true;
    std::optional<std::uint64_t> last_seq;
    std::map<std::int64_t, std::uint64_t> by_sandbox;
  };
  std::map<std::uint64_t, Flow> flows;

  struct Chan {
    std::uint64_t sent = 0, skipped = 0, aborted = 0, received = 0, missed = 0, damaged = 0;
    std::map<std::uint64_t, std::string> sent_fnv;  // seq -> fnv
    std::uint64_t integrity_errors = 0;
  };
  std::map<std::uint64_t, Chan> chans;

  std::set<std::uint64_t> bench_chans;
  std::map<std::uint64_t, std::pair<std::uint64_t, long double>> bench;  // size -> (trials, sum)

  std::uint64_t jobs_released = 0, jobs_completed = 0, deadline_misses = 0, forkwait = 0;
  std::uint64_t vm_exits = 0;

  std::vector<RecoveryAcc> recs_acc;
  std::map<std::int64_t, std::size_t> open;  // origin -> index in recs_acc

  std::vector<std::pair<std::uint64_t, std::uint64_t>> missed_sent;  // (sent, flow)
  // Service activity per sandbox (icmp replies and message receptions).
  std::vector<std::vector<std::uint64_t>> activity(static_cast<std::size_t>(n));
  std::vector<std::pair<std::uint64_t, std::int64_t>> msg_missed_at;  // (time, sandbox)

  for (const auto& r : recs) {
    const auto& t = r.event_type;
    const auto s = r.sandbox;
    const auto now = r.at.cycles;
    PerSandbox* ps = s >= 0 ? &sb[static_cast<std::size_t>(s)] : nullptr;
    if (t == "vm_exit") {
      ++vm_exits;
      if (ps) ++ps->vm_exits;
    } else if (t == "icmp_req") {
      ++flows[r.u64("flow")].requests;
    } else if (t == "icmp_reply") {
      auto& f = flows[r.u64("flow")];
      const auto seq = r.u64("seq");
      if (f.last_seq && seq <= *f.last_seq) f.in_order = false;
      f.last_seq = seq;
      ++f.replies;
      ++f.by_sandbox[s];
      if (ps) {
        ++ps->icmp_replies;
        ps->rtt_sum += r.u64("rtt");
        activity[static_cast<std::size_t>(s)].push_back(now);
      }
    } else if (t == "icmp_missed") {
      const auto flow = r.u64("flow");
      ++flows[flow].missed;
      missed_sent.emplace_back(r.u64("sent"), flow);
    } else if (t == "irq_handle") {
      if (ps) ++ps->irq_handled;
    } else if (t == "irq_discard") {
      if (ps) ++ps->irq_discarded;
    } else if (t == "irq_lost") {
      if (ps) ++ps->irq_lost;
    } else if (t == "msg_send_done") {
      auto& c = chans[r.u64("chan")];
      ++c.sent;
      c.sent_fnv[r.u64("seq")] = r.str("fnv");
      if (ps) ++ps->msgs_sent;
    } else if (t == "msg_send_skipped") {
      ++chans[r.u64("chan")].skipped;
    } else if (t == "msg_send_aborted") {
      ++chans[r.u64("chan")].aborted;
    } else if (t == "msg_recv_done") {
      const auto id = r.u64("chan");
      auto& c = chans[id];
      ++c.received;
      auto it = c.sent_fnv.find(r.u64("seq"));
      if (it == c.sent_fnv.end() || it->second != r.str("fnv")) ++c.integrity_errors;
      if (ps) {
        ++ps->msgs_received;
        activity[static_cast<std::size_t>(s)].push_back(now);
      }
      if (bench_chans.count(id)) {
        auto& b = bench[r.u64("bytes")];
        ++b.first;
        b.second += static_cast<long double>(r.u64("latency"));
      }
    } else if (t == "msg_missed") {
      const auto cnt = r.u64("count");
      chans[r.u64("chan")].missed += cnt;
      if (ps) ps->msgs_missed += cnt;
      msg_missed_at.emplace_back(now, s);
    } else if (t == "msg_damaged") {
      ++chans[r.u64("chan")].damaged;
      if (ps) ++ps->msgs_damaged;
    } else if (t == "bench_trial") {
      bench_chans.insert(r.u64("chan"));
    } else if (t == "job_release") {
      ++jobs_released;
    } else if (t == "job_complete") {
      ++jobs_completed;
    } else if (t == "deadline_miss") {
      ++deadline_misses;
    } else if (t == "forkwait_iter") {
      ++forkwait;
    } else if (t == "run_end") {
      m["completed"] = r.str("reason") == "complete";
    } else if (t == "fault_inject") {
      RecoveryAcc a;
      a.origin = s;
      a.mode = r.str("mode");
      a.fault_at = now;
      open[s] = recs_acc.size();
      recs_acc.push_back(std::move(a));
    } else if (t == "blast_begin" || t == "blast_end" || t == "recovery_target" || t == "recovery_fallback" ||
               t == "recovery_phase" || t == "recovery_done" || t == "ept_violation") {
      auto it = open.find(s);
      if (it == open.end()) continue;
      auto& a = recs_acc[it->second];
      if (t == "blast_begin") {
        a.before = detail::hash_fields(r);
        a.in_blast = true;
      } else if (t == "blast_end") {
        a.after_blast = detail::hash_fields(r);
        a.in_blast = false;
      } else if (t == "ept_violation") {
        if (a.in_blast) ++a.violations;
      } else if (t == "recovery_target") {
        a.target = static_cast<std::int64_t>(r.u64("target"));
      } else if (t == "recovery_fallback") {
        a.fallback = true;
        a.mode = "local";
      } else if (t == "recovery_phase") {
        a.phases.push_back({{"name", r.str("phase")}, {"cycles", r.u64("cycles")}});
      } else {
        a.done = true;
        a.mode = r.str("mode");
        a.healthy_at = now;
        a.downtime = r.u64("downtime");
        a.phase_sum = r.u64("phase_sum");
        a.healthy = r.str("healthy") == "1";
        a.restored = r.str("restored");
        a.at_done = detail::hash_fields(r);
        open.erase(it);
      }
    }
  }

  m["vm_exits"] = vm_exits;
  m["sandboxes"] = json::array();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& p = sb[static_cast<std::size_t>(i)];
    m["sandboxes"].push_back({{"id", i},
                              {"vm_exits", p.vm_exits},
                              {"icmp_replies", p.icmp_replies},
                              {"mean_service_cycles", p.icmp_replies ? static_cast<double>(p.rtt_sum) / static_cast<double>(p.icmp_replies) : 0.0},
                              {"irq_handled", p.irq_handled},
                              {"irq_discarded", p.irq_discarded},
                              {"irq_lost", p.irq_lost},
                              {"msgs_sent", p.msgs_sent},
                              {"msgs_received", p.msgs_received},
                              {"msgs_missed", p.msgs_missed},
                              {"msgs_damaged", p.msgs_damaged}});
  }
  m["flows"] = json::array();
  for (const auto& [id, f] : flows) {
    json by = json::object();
    for (const auto& [s, c] : f.by_sandbox) by[std::to_string(s)] = c;
    m["flows"].push_back({{"flow", id},
                          {"requests", f.requests},
                          {"replies", f.replies},
                          {"missed", f.missed},
                          {"in_order", f.in_order},
                          {"replies_by_sandbox", by}});
  }
  m["channels"] = json::array();
  for (const auto& [id, c] : chans)
    m["channels"].push_back({{"chan", id},
                             {"sent", c.sent},
                             {"skipped", c.skipped},
                             {"aborted", c.aborted},
                             {"received", c.received},
                             {"missed", c.missed},
                             {"damaged", c.damaged},
                             {"integrity_errors", c.integrity_errors}});

  m["recoveries"] = json::array();
  for (const auto& a : recs_acc) {
    json o;
    o["origin"] = a.origin;
    o["mode"] = a.mode;
    o["target"] = a.target ? json(*a.target) : json(nullptr);
    o["fallback"] = a.fallback;
    o["phases"] = a.phases;
    o["fault_at_cycles"] = a.fault_at;
    o["violations"] = a.violations;
    o["done"] = a.done;
    if (a.done) {
      o["healthy_at_cycles"] = a.healthy_at;
      o["downtime_cycles"] = a.downtime;
      o["phase_sum_cycles"] = a.phase_sum;
      o["healthy"] = a.healthy;
      o["restored_channels"] = a.restored;
      std::uint64_t missed = 0;
      for (const auto& [sent, flow] : missed_sent)
        if (sent >= a.fault_at && sent <= a.healthy_at) ++missed;
      o["missed_icmp"] = missed;
      // Memory of every sandbox other than origin and target, and every
      // monitor's EPT data, compared before the blast, after it, and at the
      // end of recovery.
      bool kernels_ok = true, monitors_ok = true;
      for (std::int64_t i = 0; i < n; ++i) {
        const auto k = "k" + std::to_string(i), mk = "m" + std::to_string(i);
        const bool bystander = i != a.origin && (!a.target || i != *a.target);
        auto same = [&](const std::string& key, bool through_done) {
          auto b = a.before.find(key), e = a.after_blast.find(key), d = a.at_done.find(key);
          if (b == a.before.end() || e == a.after_blast.end()) return false;
          if (b->second != e->second) return false;
          if (through_done && (d == a.at_done.end() || d->second != b->second)) return false;
          return true;
        };
        if (bystander && !same(k, true)) kernels_ok = false;
        if (!same(mk, false)) monitors_ok = false;
      }
      o["bystander_memory_unchanged"] = kernels_ok;
      o["monitor_memory_unchanged"] = monitors_ok;
      std::uint64_t bystander_missed = 0;
      for (const auto& [t, s] : msg_missed_at)
        if (t >= a.fault_at && t <= a.healthy_at && s != a.origin && (!a.target || s != *a.target)) ++bystander_missed;
      o["bystander_missed_messages"] = bystander_missed;
      // Service gap of the origin sandbox around the recovery interval.
      const auto& act = activity[static_cast<std::size_t>(a.origin)];
      std::uint64_t inside = 0;
      std::optional<std::uint64_t> last_before, first_after;
      for (auto t : act) {
        if (t <= a.fault_at) last_before = t;
        if (t > a.fault_at && t < a.healthy_at) ++inside;
        if (t >= a.healthy_at && !first_after) first_after = t;
      }
      o["origin_gap"] = {{"activity_inside", inside},
                         {"last_before_cycles", last_before ? json(*last_before) : json(nullptr)},
                         {"first_after_cycles", first_after ? json(*first_after) : json(nullptr)}};
    }
    m["recoveries"].push_back(o);
  }

  json mb = json::object();
  if (!bench.empty()) {
    std::vector<double> xs, ys;
    mb["sizes"] = json::array();
    for (const auto& [size, b] : bench) {
      const double mean = static_cast<double>(b.second / static_cast<long double>(b.first));
      mb["sizes"].push_back({{"size", size}, {"trials", b.first}, {"mean_cycles", mean}});
      xs.push_back(static_cast<double>(size));
      ys.push_back(mean);
    }
    const auto fit = fit_affine(xs, ys);
    mb["fit"] = {{"slope", fit.slope}, {"intercept", fit.intercept}, {"r2", fit.r2}};
  }
  m["msgbench"] = mb;
  m["jobs"] = {{"released", jobs_released}, {"completed", jobs_completed}, {"deadline_misses", deadline_misses}};
  m["forkwait_iterations"] = forkwait;
  return m;
}

// ---- figure series ---------------------------------------------------------

/// One row per ICMP event: time, flow, event, seq, cumulative replies.
inline std::string fig6_series(const std::vector<TraceRecord>& recs, double cycles_per_second,
                               const std::string& arm = "main") {
  std::ostringstream os;
  os << "arm,time_s,flow,event,seq,sandbox,cumulative_replies\n";
  std::map<std::uint64_t, std::uint64_t> cum;
  for (const auto& r : recs) {
    const auto& t = r.event_type;
    if (t != "icmp_req" && t != "icmp_reply" && t != "icmp_missed") continue;
    const auto flow = r.u64("flow");
    if (t == "icmp_reply") ++cum[flow];
    os << arm << ',' << static_cast<double>(r.at.cycles) / cycles_per_second << ',' << flow << ','
       << t.substr(5) << ',' << r.u64("seq") << ',';
    if (r.sandbox >= 0) os << r.sandbox;
    else os << "host";
    os << ',' << cum[flow] << '\n';
  }
  return os.str();
}

/// Per-sandbox message receptions and ICMP replies in 1 s buckets.
inline std::string fig10_series(const std::vector<TraceRecord>& recs, std::uint64_t cycles_per_second) {
  std::map<std::pair<std::uint64_t, std::int64_t>, std::pair<std::uint64_t, std::uint64_t>> b;
  std::int64_t n = 0;
  std::uint64_t last = 0;
  for (const auto& r : recs) {
    if (r.sandbox >= 0) n = std::max(n, r.sandbox + 1);
    last = r.at.cycles / cycles_per_second;
    if (r.sandbox < 0) continue;
    if (r.event_type == "msg_recv_done") ++b[{last, r.sandbox}].first;
    if (r.event_type == "icmp_reply") ++b[{last, r.sandbox}].second;
  }
  std::ostringstream os;
  os << "time_s,sandbox,msgs_per_s,replies_per_s\n";
  for (std::uint64_t sec = 0; sec <= last; ++sec)
    for (std::int64_t s = 0; s < n; ++s) {
      auto it = b.find({sec, s});
      os << sec << ',' << s << ',' << (it == b.end() ? 0 : it->second.first) << ','
         << (it == b.end() ? 0 : it->second.second) << '\n';
    }
  return os.str();
}

}  // namespace questv::scenario
