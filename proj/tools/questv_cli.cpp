#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "questv/scenario/builtins.hpp"
#include "questv/scenario/config.hpp"
#include "questv/scenario/emit.hpp"

namespace qs = questv::scenario;

namespace {

void summarize(const qs::DemoResult& d, std::ostream& os) {
  for (const auto& a : d.arms) {
    const auto& m = a.metrics;
    os << d.demo << " [" << a.name << "] " << (a.completed ? "complete" : "horizon reached") << " at "
       << m["end_cycles"].get<std::uint64_t>() << " cycles, " << m["records"].get<std::uint64_t>()
       << " records, vm_exits=" << m["vm_exits"].get<std::uint64_t>() << "\n";
    for (const auto& f : m["flows"])
      os << "  flow " << f["flow"] << ": requests=" << f["requests"] << " replies=" << f["replies"]
         << " missed=" << f["missed"] << "\n";
    for (const auto& r : m["recoveries"]) {
      os << "  recovery " << r["mode"].get<std::string>() << " of sandbox " << r["origin"] << ":";
      for (const auto& p : r["phases"]) os << " " << p["name"].get<std::string>() << "=" << p["cycles"];
      if (r["done"].get<bool>()) os << " downtime=" << r["downtime_cycles"] << " missed_icmp=" << r["missed_icmp"];
      os << "\n";
    }
    if (m["msgbench"].contains("fit"))
      os << "  msgbench fit: slope=" << m["msgbench"]["fit"]["slope"] << " r2=" << m["msgbench"]["fit"]["r2"] << "\n";
    os << "  trace sha256 " << m["trace_sha256"].get<std::string>() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-event simulator of a virtualized multikernel"};
  app.require_subcommand(1);

  std::string scenario_path, demo_name, out_dir = "out";
  std::optional<std::uint64_t> seed, horizon;
  bool paper_scale = false;

  auto* run = app.add_subcommand("run", "Run a scenario file");
  run->add_option("scenario", scenario_path, "Scenario JSON")->required();
  run->add_option("--seed", seed, "RNG seed");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--horizon", horizon, "Horizon in cycles");

  auto* demo = app.add_subcommand("demo", "Run a built-in experiment");
  demo->add_option("name", demo_name, "Experiment name")->required()->check(CLI::IsMember(qs::builtin_names()));
  demo->add_option("--seed", seed, "RNG seed");
  demo->add_option("--out", out_dir, "Output directory");
  demo->add_flag("--paper-scale", paper_scale, "Use the full msgbench trial count");

  auto* val = app.add_subcommand("validate", "Check a scenario file");
  val->add_option("scenario", scenario_path, "Scenario JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*val) {
      const auto cfg = qs::load_scenario(scenario_path);
      std::cout << "ok: " << cfg.name << " (" << cfg.sandboxes.size() << " sandboxes, " << cfg.vcpus.size()
                << " vcpus, " << cfg.workloads.size() << " workloads)\n";
      return 0;
    }
    qs::DemoResult result;
    if (*run) {
      auto cfg = qs::load_scenario(scenario_path);
      if (seed) cfg.sim.seed = *seed;
      if (horizon) {
        if (*horizon == 0) throw questv::ConfigError("horizon must be > 0");
        cfg.sim.horizon = questv::sim::SimTime{*horizon};
      }
      result.demo = cfg.name;
      result.arms.push_back(qs::run_arm("main", cfg));
    } else {
      result = qs::run_demo(demo_name, seed.value_or(1), paper_scale);
    }
    qs::emit(result, out_dir);
    summarize(result, std::cout);
    std::cout << "wrote " << out_dir << "\n";
    return 0;
  } catch (const questv::ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
