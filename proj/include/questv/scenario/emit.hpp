#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "questv/errors.hpp"
#include "questv/scenario/builtins.hpp"
#include "questv/scenario/metrics.hpp"

namespace questv::scenario {

namespace fs = std::filesystem;

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out.flush()) throw Error("write failed: " + p.string());
}

inline std::string trace_file_name(const DemoResult& d, std::size_t i) {
  return i == 0 ? "trace.csv" : "trace_" + d.arms[i].name + ".csv";
}

/// Size against mean transfer cycles, one column per arm.
inline std::string fig9_series(const DemoResult& d) {
  std::map<std::uint64_t, std::map<std::string, double>> rows;
  for (const auto& a : d.arms)
    if (a.metrics["msgbench"].contains("sizes"))
      for (const auto& s : a.metrics["msgbench"]["sizes"])
        rows[s["size"].get<std::uint64_t>()][a.name] = s["mean_cycles"].get<double>();
  std::ostringstream os;
  os << "size";
  for (const auto& a : d.arms) os << ',' << a.name << "_cycles";
  os << '\n';
  for (const auto& [size, cols] : rows) {
    os << size;
    for (const auto& a : d.arms) {
      auto it = cols.find(a.name);
      os << ',';
      if (it != cols.end()) os << it->second;
    }
    os << '\n';
  }
  return os.str();
}

/// Writes traces, metrics.json, figure series and the scenario files of
/// every arm into `dir`.
inline void emit(const DemoResult& d, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());

  json metrics;
  metrics["demo"] = d.demo;
  metrics["arms"] = json::object();
  std::string fig6, fig10;
  bool any_icmp = false, any_bench = false;
  for (std::size_t i = 0; i < d.arms.size(); ++i) {
    const auto& a = d.arms[i];
    std::ostringstream csv;
    sim::Trace::write_csv(csv, a.records);
    write_file(dir / trace_file_name(d, i), csv.str());
    metrics["arms"][a.name] = a.metrics;
    write_file(dir / (d.arms.size() == 1 ? std::string("scenario.json") : "scenario_" + a.name + ".json"),
               to_json(a.config).dump(2) + "\n");

    const auto cps = static_cast<double>(a.config.sim.cycles_per_second);
    auto s6 = fig6_series(a.records, cps, a.name);
    if (s6.find('\n') + 1 < s6.size()) any_icmp = true;
    fig6 += i == 0 ? s6 : s6.substr(s6.find('\n') + 1);
    if (!a.metrics["msgbench"].empty()) any_bench = true;
    if (i == 0) fig10 = fig10_series(a.records, a.config.sim.cycles_per_second);
  }
  write_file(dir / "metrics.json", metrics.dump(2) + "\n");
  if (any_icmp) write_file(dir / "fig6_series.csv", fig6);
  if (any_bench) write_file(dir / "fig9_series.csv", fig9_series(d));
  write_file(dir / "fig10_series.csv", fig10);
}

}  // namespace questv::scenario
