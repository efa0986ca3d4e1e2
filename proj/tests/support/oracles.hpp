#pragma once

// Test-side oracles computed from traces or raw constants, independent of the
// code paths they check.

#include <algorithm>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "questv/sim/trace.hpp"

namespace oracle {

using Interval = std::pair<std::uint64_t, std::uint64_t>;
using VcpuKey = std::pair<std::int64_t, std::uint64_t>;  // (sandbox, vcpu)

/// Foreground execution intervals per VCPU, rebuilt from vcpu_dispatch /
/// vcpu_preempt records. An interval still open at the end is closed at `end`.
inline std::map<VcpuKey, std::vector<Interval>> fg_intervals(const std::vector<questv::sim::TraceRecord>& recs,
                                                            std::uint64_t end) {
  std::map<VcpuKey, std::vector<Interval>> out;
  std::map<std::int64_t, std::pair<std::uint64_t, std::uint64_t>> open;  // sandbox -> (vcpu, start)
  for (const auto& r : recs) {
    if (r.event_type == "vcpu_dispatch") {
      if (r.str("band") == "fg") open[r.sandbox] = {r.u64("vcpu"), r.at.cycles};
      else open.erase(r.sandbox);
    } else if (r.event_type == "vcpu_preempt") {
      auto it = open.find(r.sandbox);
      if (it != open.end() && it->second.first == r.u64("vcpu")) {
        if (r.at.cycles > it->second.second)
          out[{r.sandbox, it->second.first}].push_back({it->second.second, r.at.cycles});
        open.erase(it);
      }
    }
  }
  for (const auto& [sb, o] : open)
    if (end > o.second) out[{sb, o.first}].push_back({o.second, end});
  return out;
}

/// Execution inside [t, t + len) for sorted, disjoint intervals.
inline std::uint64_t executed_in(const std::vector<Interval>& iv, std::uint64_t t, std::uint64_t len) {
  const std::uint64_t e = t + len;
  std::uint64_t sum = 0;
  auto it = std::lower_bound(iv.begin(), iv.end(), Interval{t, 0},
                             [](const Interval& a, const Interval& b) { return a.second <= b.first; });
  for (; it != iv.end() && it->first < e; ++it) sum += std::min(it->second, e) - std::max(it->first, t);
  return sum;
}

/// Largest execution over any window of length `len` whose start is one of
/// `starts` or an interval start (the maximum is attained at an interval
/// start, so the latter alone already makes this exact).
inline std::uint64_t max_window(const std::vector<Interval>& iv, std::uint64_t len,
                                const std::vector<std::uint64_t>& starts = {}) {
  std::uint64_t best = 0;
  for (const auto& i : iv) best = std::max(best, executed_in(iv, i.first, len));
  for (auto t : starts) best = std::max(best, executed_in(iv, t, len));
  return best;
}

/// Fixed per-phase costs of the recovery columns, summed here rather than
/// taken from the cost model.
inline constexpr std::uint64_t kVmExit = 707, kVmEnter = 823, kSwitch = 12427, kIpi = 1291;
inline constexpr std::uint64_t kDriverReinit = 134244605, kNetworkReinit = 68750060;

inline std::uint64_t local_phase_sum() { return kVmExit + kSwitch + kVmEnter + kDriverReinit + kNetworkReinit; }
inline std::uint64_t remote_phase_sum() { return kVmExit + kIpi + kVmEnter + kDriverReinit + kNetworkReinit; }

/// Liu-Layland bound by repeated bisection on x^n = 2 (no pow()).
inline double ll_bound(std::size_t n) {
  double lo = 1.0, hi = 2.0;
  for (int k = 0; k < 200; ++k) {
    const double mid = (lo + hi) / 2;
    double p = 1.0;
    for (std::size_t i = 0; i < n; ++i) p *= mid;
    (p < 2.0 ? lo : hi) = mid;
  }
  return static_cast<double>(n) * (lo - 1.0);
}

/// Ordinary least squares R^2 for y = a + b x, computed in long double.
inline double r_squared(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    sxy += static_cast<long double>(x[i]) * y[i];
    syy += static_cast<long double>(y[i]) * y[i];
  }
  const long double cov = sxy - sx * sy / n, vx = sxx - sx * sx / n, vy = syy - sy * sy / n;
  if (vy == 0) return 1.0;
  return static_cast<double>(cov * cov / (vx * vy));
}

}  // namespace oracle
