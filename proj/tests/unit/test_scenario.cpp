#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "questv/scenario/emit.hpp"
#include "support/oracles.hpp"

using namespace questv;
using namespace questv::scenario;
using sim::SimTime;

namespace {

// Two sandboxes sharing a NIC with one ping flow; small enough to run fast.
const char* kSmall = R"({
  "name": "small",
  "sim": { "seed": 5, "horizon_ms": 100 },
  "layout": { "host_bytes": 67108864, "kernel_bytes": 8388608, "shared_bytes": 1048576, "ept_data_bytes": 262144 },
  "sandboxes": [ { "id": 0 }, { "id": 1 } ],
  "devices": [ { "id": 0, "vector": 33 } ],
  "vcpus": [
    { "sandbox": 0, "id": 0, "c_max_ms": 2, "period_ms": 10 },
    { "sandbox": 0, "id": 1, "kind": "io", "bandwidth": 0.1, "device": 0 },
    { "sandbox": 1, "id": 0, "c_max_ms": 2, "period_ms": 10 },
    { "sandbox": 1, "id": 1, "kind": "io", "bandwidth": 0.1, "device": 0 }
  ],
  "drivers": [ { "sandbox": 0, "device": 0, "io_vcpu": 1 }, { "sandbox": 1, "device": 0, "io_vcpu": 1 } ],
  "vifs": [ { "sandbox": 1, "ip": "10.0.0.2" } ],
  "workloads": [ { "type": "icmp-flood", "dst_ip": "10.0.0.2", "interval_ms": 1, "count": 50 } ]
})";

json small() { return json::parse(kSmall); }

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, MillisecondFieldsConvert) {
  const auto c = parse(kSmall);
  EXPECT_EQ(c.sim.horizon.cycles, 200'000'000u);
  EXPECT_EQ(c.vcpus[0].c_max->cycles, 4'000'000u);
  const auto [cap, period] = vcpu_budget(c, c.vcpus[1]);
  EXPECT_EQ(period.cycles, 20'000'000u);  // shortest Main period in the sandbox
  EXPECT_EQ(cap.cycles, 2'000'000u);
}

TEST(Config, JsonRoundTrip) {
  const auto c = parse(kSmall);
  const auto back = from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(back, c);
  for (const auto& [name, cfg] : builtin_arms("isolation", 3, false)) EXPECT_EQ(from_json(to_json(cfg)), cfg) << name;
  for (const auto& [name, cfg] : builtin_arms("msgbench", 3, false)) EXPECT_EQ(from_json(to_json(cfg)), cfg) << name;
}

TEST(Config, SyntaxErrorReportsLine) {
  const auto e = error_of("{\n  \"name\": \"x\",\n  oops\n}");
  EXPECT_EQ(e.rfind("line 3:", 0), 0u) << e;
}

TEST(Config, DanglingReferencesRejected) {
  auto j = small();
  j["drivers"][0]["io_vcpu"] = 0;  // a Main VCPU
  EXPECT_NE(error_of(j.dump()).find("wrong kind"), std::string::npos);
  j = small();
  j["vifs"][0]["sandbox"] = 4;
  EXPECT_NE(error_of(j.dump()).find("unknown sandbox"), std::string::npos);
  j = small();
  j["workloads"][0]["device"] = 2;
  EXPECT_NE(error_of(j.dump()).find("unknown device"), std::string::npos);
  j = small();
  j["workloads"].push_back({{"type", "msg-stream"}, {"channel", 0}, {"sender", 0}, {"sender_vcpu", 0},
                            {"receiver_vcpu", 0}, {"send_interval_ms", 1}, {"recv_interval_ms", 1}, {"stop_ms", 5}});
  EXPECT_NE(error_of(j.dump()).find("unknown channel"), std::string::npos);
  j = small();
  j["faults"] = json::array({{{"sandbox", 0}, {"at_ms", 1}, {"after_replies", {{"count", 2}}}}});
  EXPECT_NE(error_of(j.dump()).find("exactly one"), std::string::npos);
}

TEST(Config, FieldErrors) {
  auto j = small();
  j["sim"]["horizon_cycles"] = 5;  // both forms given
  EXPECT_NE(error_of(j.dump()).find("either"), std::string::npos);
  j = small();
  j["workloads"][0]["type"] = "teleport";
  EXPECT_NE(error_of(j.dump()).find("unknown workload type"), std::string::npos);
  j = small();
  j["vcpus"][0].erase("period_ms");
  EXPECT_NE(error_of(j.dump()).find("c_max and period"), std::string::npos);
  j = small();
  j["vcpus"][0]["c_max_ms"] = 20;
  EXPECT_NE(error_of(j.dump()).find("c_max <= period"), std::string::npos);
  j = small();
  j["sandboxes"][1]["id"] = 7;
  EXPECT_NE(error_of(j.dump()).find("0..n-1"), std::string::npos);
  EXPECT_NE(error_of("[1, 2]").find("object"), std::string::npos);
}

TEST(Config, AdmissionErrorCarriesBound) {
  auto j = small();
  j["vcpus"][0]["c_max_ms"] = 4.5;
  j["vcpus"][2]["c_max_ms"] = 1;
  j["vcpus"].push_back({{"sandbox", 0}, {"id", 2}, {"c_max_ms", 3.4}, {"period_ms", 10}});
  try {
    parse(j.dump());
    FAIL() << "expected rejection";
  } catch (const AdmissionError& e) {
    EXPECT_NEAR(e.total(), 0.45 + 0.1 + 0.34, 1e-9);
    EXPECT_NEAR(e.bound(), oracle::ll_bound(3), 1e-12);
  }
}

TEST(Config, BlastTargets) {
  const auto l = mem::plan_layout(2, parse(kSmall).layout);
  const std::vector<ChannelSpec> chans{{0, 0, 1, false}, {1, 0, 1, true}};
  EXPECT_EQ(resolve_blast_target("kernel:1", l, chans), l.kernels[1].begin);
  EXPECT_EQ(resolve_blast_target("kernel:0+0x10", l, chans), l.kernels[0].begin + 16);
  EXPECT_EQ(resolve_blast_target("ept-data:1", l, chans), l.ept_data[1].begin);
  EXPECT_EQ(resolve_blast_target("shared", l, chans), l.shared.begin);
  EXPECT_EQ(resolve_blast_target("channel:1", l, chans), l.shared.begin + 2 * mem::kPageSize);
  EXPECT_EQ(resolve_blast_target("0x2000", l, chans), 0x2000u);
  EXPECT_THROW(resolve_blast_target("kernel:9", l, chans), ConfigError);
  EXPECT_THROW(resolve_blast_target("channel:5", l, chans), ConfigError);
  EXPECT_THROW(resolve_blast_target("moon", l, chans), ConfigError);
}

TEST(Machine, SmallScenarioRuns) {
  const auto r = run_arm("main", parse(kSmall));
  EXPECT_TRUE(r.completed);
  const auto& f = r.metrics["flows"][0];
  EXPECT_EQ(f["requests"], 50);
  EXPECT_EQ(f["replies"], 50);
  EXPECT_EQ(f["replies_by_sandbox"]["1"], 50);
  EXPECT_EQ(r.metrics["sandboxes"][0]["irq_discarded"], 50);
  EXPECT_EQ(r.metrics["vm_exits"], 0);
}

TEST(Machine, MetricsRecomputedFromCsvMatch) {
  const auto r = run_arm("main", parse(kSmall));
  std::ostringstream csv;
  sim::Trace::write_csv(csv, r.records);
  std::istringstream in(csv.str());
  const auto parsed = sim::Trace::parse_csv(in);
  auto from_csv = compute_metrics(parsed);
  auto mem = compute_metrics(r.records);
  EXPECT_EQ(from_csv, mem);
  EXPECT_EQ(mem["trace_sha256"], util::sha256_hex(csv.str()));
}

TEST(Machine, SameSeedSameTraceDifferentSeedMayDiffer) {
  const auto a = run_arm("main", parse(kSmall));
  const auto b = run_arm("main", parse(kSmall));
  EXPECT_EQ(a.metrics["trace_sha256"], b.metrics["trace_sha256"]);
}

TEST(Machine, HorizonStopsRun) {
  auto c = parse(kSmall);
  c.sim.horizon = SimTime{10'000'000};  // 5 ms: the flood cannot finish
  const auto r = run_arm("main", c);
  EXPECT_FALSE(r.completed);
  EXPECT_LE(r.records.back().at.cycles, 10'000'000u);
}

TEST(Machine, PeriodicJobsMeetDeadlines) {
  auto j = small();
  j["workloads"] = json::array({{{"type", "periodic"}, {"sandbox", 0}, {"vcpu", 0}, {"period_ms", 10}, {"wcet_ms", 2}, {"jobs", 8}},
                                {{"type", "cpu-hog"}, {"sandbox", 0}, {"vcpu", 1}}});
  const auto r = run_arm("main", parse(j.dump()));
  EXPECT_EQ(r.metrics["jobs"]["released"], 8);
  EXPECT_EQ(r.metrics["jobs"]["completed"], 8);
  EXPECT_EQ(r.metrics["jobs"]["deadline_misses"], 0);
}

TEST(Metrics, AffineFit) {
  const std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9};
  const auto f = fit_affine(x, y);
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 1.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  const std::vector<double> y2{1, 3, 2, 5};
  EXPECT_NEAR(fit_affine(x, y2).r2, oracle::r_squared(x, y2), 1e-12);
}

TEST(Emit, WritesParseableFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "questv_emit_test";
  std::filesystem::remove_all(dir);
  DemoResult d;
  d.demo = "small";
  d.arms.push_back(run_arm("main", parse(kSmall)));
  emit(d, dir);
  for (const char* f : {"trace.csv", "metrics.json", "fig6_series.csv", "fig10_series.csv", "scenario.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream t(dir / "trace.csv");
  EXPECT_EQ(sim::Trace::parse_csv(t).size(), d.arms[0].records.size());
  std::ifstream m(dir / "metrics.json");
  const auto mj = json::parse(m);
  EXPECT_EQ(mj["arms"]["main"]["trace_sha256"], d.arms[0].metrics["trace_sha256"]);
  std::ifstream s(dir / "scenario.json");
  std::stringstream ss;
  ss << s.rdbuf();
  EXPECT_NO_THROW(parse(ss.str()));
  std::filesystem::remove_all(dir);
}

TEST(Builtins, UnknownDemo) { EXPECT_THROW(builtin_arms("nope", 1, false), ConfigError); }

TEST(Builtins, AllValidate) {
  for (const auto& name : builtin_names())
    for (const auto& [arm, cfg] : builtin_arms(name, 1, false)) EXPECT_NO_THROW(validate(cfg)) << name << "/" << arm;
}
