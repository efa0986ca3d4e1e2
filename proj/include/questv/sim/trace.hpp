#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "questv/errors.hpp"
#include "questv/sim/time.hpp"

namespace questv::sim {

/// Sandbox column value for records not owned by any sandbox.
inline constexpr std::int64_t kHostSandbox = -1;

namespace detail {

inline void append_field(std::string& out, std::string_view v) { out.append(v); }
inline void append_field(std::string& out, const std::string& v) { out.append(v); }
inline void append_field(std::string& out, const char* v) { out.append(v); }
inline void append_field(std::string& out, bool v) { out.append(v ? "1" : "0"); }
inline void append_field(std::string& out, SimTime v) { out.append(std::to_string(v.cycles)); }
inline void append_field(std::string& out, double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 12);
  out.append(buf, end);
}
template <class T>
  requires std::is_integral_v<T>
void append_field(std::string& out, T v) {
  out.append(std::to_string(v));
}

inline void append_pairs(std::string&) {}

template <class V, class... Rest>
void append_pairs(std::string& out, std::string_view key, const V& value, const Rest&... rest) {
  if (!out.empty()) out.push_back(';');
  out.append(key);
  out.push_back('=');
  append_field(out, value);
  append_pairs(out, rest...);
}

}  // namespace detail

/// Builds a `k=v;k=v` detail string from alternating keys and values.
template <class... Args>
std::string fields(const Args&... args) {
  static_assert(sizeof...(Args) % 2 == 0, "fields() takes key/value pairs");
  std::string out;
  detail::append_pairs(out, args...);
  return out;
}

struct TraceRecord {
  SimTime at;
  std::int64_t sandbox = kHostSandbox;
  std::string event_type;
  std::string detail;

  bool operator==(const TraceRecord&) const = default;

  std::optional<std::string_view> field(std::string_view key) const {
    std::string_view rest = detail;
    while (!rest.empty()) {
      const auto semi = rest.find(';');
      const std::string_view pair = rest.substr(0, semi);
      const auto eq = pair.find('=');
      if (eq != std::string_view::npos && pair.substr(0, eq) == key) return pair.substr(eq + 1);
      if (semi == std::string_view::npos) break;
      rest.remove_prefix(semi + 1);
    }
    return std::nullopt;
  }

  std::uint64_t u64(std::string_view key) const {
    const auto v = field(key);
    if (!v) throw Error("trace record " + event_type + " lacks field " + std::string(key));
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{}) throw Error("trace field " + std::string(key) + " is not an integer");
    return out;
  }

  double f64(std::string_view key) const {
    const auto v = field(key);
    if (!v) throw Error("trace record " + event_type + " lacks field " + std::string(key));
    double out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{}) throw Error("trace field " + std::string(key) + " is not a number");
    return out;
  }

  std::string str(std::string_view key) const {
    const auto v = field(key);
    return v ? std::string(*v) : std::string{};
  }
};

/// Append-only event log. Export format is CSV with header
/// `time_cycles,sandbox,event_type,detail`.
class Trace {
 public:
  static constexpr std::string_view kCsvHeader = "time_cycles,sandbox,event_type,detail";

  void append(SimTime at, std::int64_t sandbox, std::string event_type, std::string detail) {
    if (!records_.empty() && at < records_.back().at)
      throw InvariantError("trace records must be appended in time order");
    records_.push_back(TraceRecord{at, sandbox, std::move(event_type), std::move(detail)});
  }

  const std::vector<TraceRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

  void write_csv(std::ostream& os) const { write_csv(os, records_); }

  static void write_csv(std::ostream& os, const std::vector<TraceRecord>& records) {
    os << kCsvHeader << '\n';
    for (const auto& r : records) {
      os << r.at.cycles << ',';
      if (r.sandbox == kHostSandbox)
        os << "host";
      else
        os << r.sandbox;
      os << ',' << r.event_type << ',' << r.detail << '\n';
    }
  }

  std::string to_csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }

  static std::vector<TraceRecord> parse_csv(std::istream& is) {
    std::vector<TraceRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line_no == 1) {
        if (line != kCsvHeader) throw Error("trace csv: unexpected header");
        continue;
      }
      if (line.empty()) continue;
      // detail is the last column and never contains commas.
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      const auto c3 = line.find(',', c2 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos || c3 == std::string::npos)
        throw Error("trace csv: malformed line " + std::to_string(line_no));
      TraceRecord r;
      r.at.cycles = std::stoull(line.substr(0, c1));
      const std::string sb = line.substr(c1 + 1, c2 - c1 - 1);
      r.sandbox = sb == "host" ? kHostSandbox : std::stoll(sb);
      r.event_type = line.substr(c2 + 1, c3 - c2 - 1);
      r.detail = line.substr(c3 + 1);
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  std::vector<TraceRecord> records_;
};

}  // namespace questv::sim
