// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <bit>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "gpux/harness.hpp"
#include "gpux/xmaps.hpp"
#include "program_gen.hpp"

using namespace gpux;

namespace {

const std::string kRoot = GPUX_SOURCE_DIR;

// Pinned tolerances and time limits.
constexpr double kStrideFaultCut = 0.40;      // STRIDE removes at least 40% of faults
constexpr double kWastedPrefetchExtra = 0.05;  // ADAPTIVE_SEQ migrates at least 5% more
constexpr double kLcP99Ratio = 0.50;
constexpr double kBeThroughputTol = 0.05;
constexpr double kGreedyModerate = 0.95;
constexpr double kBudgetTol = 0.05;
constexpr double kImbalance = 10.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

Scenario scenario(const std::string& name) { return load_scenario(kRoot + "/scenarios/" + name); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string log_text(const std::vector<LogRecord>& log) {
  std::ostringstream o;
  write_log(o, log);
  return o.str();
}

Outcome with_limit(double limit_s, double took_s, Outcome o) {
  o.detail += " in " + fmt(took_s) + "s (limit " + fmt(limit_s) + "s)";
  if (took_s >= limit_s) o.pass = false;
  return o;
}

Outcome corpus() {
  auto sum = corpus_check(kRoot + "/corpus");
  std::set<Rule> covered;
  for (const auto& e : sum.entries) covered.insert(e.expect_rules.begin(), e.expect_rules.end());
  std::size_t missing = 0;
  for (auto r : {Rule::UniformBranch, Rule::UniformLoopBound, Rule::UniformMapKey, Rule::ForbiddenSync,
                 Rule::NonUniformAtomic, Rule::Budget, Rule::UnboundedLoop, Rule::OobAccess})
    missing += covered.count(r) == 0;
  Outcome o;
  o.pass = sum.ok() && sum.entries.size() >= 40 && missing == 0;
  o.detail = std::to_string(sum.passed) + "/" + std::to_string(sum.entries.size()) + " programs match, " +
             std::to_string(missing) + " required rules uncovered";
  return o;
}

Outcome soundness() {
  testgen::ProgramGen gen(2024);
  auto& rng = gen.rng();
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    auto p = gen.accepted();
    auto ctx = testgen::random_access_context(rng, 0xffffffffu);
    LocalMaps maps(2);
    auto r = run_hook(p, ctx, maps, ExecMode::PerLane);
    for (int l = 1; l < kWarpSize; ++l)
      if (r.lane_branches[static_cast<std::size_t>(l)] != r.lane_branches[0]) {
        ++violations;
        break;
      }
  }
  return {violations == 0, "1000 accepted programs, " + std::to_string(violations) + " divergent"};
}

Outcome leader_equivalence() {
  testgen::ProgramGen gen(4048);
  auto& rng = gen.rng();
  int state_mismatch = 0, cost_violations = 0;
  for (int t = 0; t < 1000; ++t) {
    auto p = gen.accepted();
    auto mask = testgen::random_mask(rng);
    auto ctx = testgen::random_access_context(rng, mask);
    LocalMaps a(2), b(2);
    auto lane = run_hook(p, ctx, a, ExecMode::PerLane);
    auto leader = run_hook(p, ctx, b, ExecMode::WarpLeader);
    state_mismatch += !(a == b);
    if (std::popcount(mask) > 1 && !(leader.cost_ns < lane.cost_ns)) ++cost_violations;
  }
  return {state_mismatch == 0 && cost_violations == 0, "1000 cases, " + std::to_string(state_mismatch) +
                                                           " map mismatches, " + std::to_string(cost_violations) +
                                                           " cost violations"};
}

Outcome prefetch_sensitivity() {
  auto none = run_scenario(scenario("stride.ini")).report;
  auto stride = run_scenario(scenario("stride_prefetch.ini")).report;
  auto seq = run_scenario(scenario("stride_seq.ini")).report;
  auto again = run_scenario(scenario("stride_prefetch.ini")).report;
  double f0 = static_cast<double>(none.tenants[0].faults), f1 = static_cast<double>(stride.tenants[0].faults);
  double m1 = static_cast<double>(stride.tenants[0].migrated_bytes);
  double m2 = static_cast<double>(seq.tenants[0].migrated_bytes);
  Outcome o;
  o.pass = none.oversubscription == 1.25 && f1 <= (1 - kStrideFaultCut) * f0 && m2 >= (1 + kWastedPrefetchExtra) * m1 &&
           again == stride;
  o.detail = "faults " + fmt(f0) + " -> " + fmt(f1) + " (-" + fmt(100 * (1 - f1 / f0)) +
             "%), ADAPTIVE_SEQ migrates " + fmt(m2 / m1) + "x STRIDE bytes";
  return o;
}

// Replays MIGRATE and EVICT records to rebuild residency, then classifies
// every ACCESS by whether its page was resident just before that access.
double replay_hit_rate(const std::vector<LogRecord>& log, bool& consistent) {
  std::map<int64_t, std::set<int64_t>> resident;  // region -> pages
  std::vector<std::pair<int64_t, bool>> changed;  // (page, resident before) since the last access
  uint64_t accesses = 0, hits = 0;
  consistent = true;
  for (const auto& e : log) {
    if (e.source != "mem") continue;
    if (e.kind == "MIGRATE") {
      changed.push_back({e.b, resident[e.a].count(e.b) != 0});
      resident[e.a].insert(e.b);
    } else if (e.kind == "EVICT") {
      for (auto p : resident[e.a]) changed.push_back({p, true});
      resident[e.a].clear();
    } else if (e.kind == "ACCESS") {
      bool before = resident[e.a].count(e.b) != 0;
      for (const auto& [p, was] : changed)
        if (p == e.b) {
          before = was;
          break;
        }
      changed.clear();
      ++accesses;
      hits += before;
      if (before != (e.outcome == "HIT")) consistent = false;
    }
  }
  return accesses ? static_cast<double>(hits) / static_cast<double>(accesses) : 0;
}

Outcome eviction_ordering() {
  auto fifo = run_scenario(scenario("zipf_fifo.ini"));
  auto lfu = run_scenario(scenario("zipf_lfu.ini"));
  bool c1 = false, c2 = false;
  double hf = replay_hit_rate(fifo.log, c1), hl = replay_hit_rate(lfu.log, c2);
  Outcome o;
  o.pass = c1 && c2 && hf == fifo.report.tenants[0].hit_rate && hl == lfu.report.tenants[0].hit_rate && hl >= hf &&
           fifo.report.oversubscription == 1.5;
  o.detail = "hit rate LFU " + fmt(hl) + " vs FIFO " + fmt(hf) + ", replay oracle " +
             (c1 && c2 ? "agrees" : "disagrees");
  return o;
}

Outcome multitenant() {
  auto base = run_scenario(scenario("multitenant_baseline.ini")).report;
  auto pol = run_scenario(scenario("multitenant_policy.ini")).report;
  auto hi = pol.tenants[0].completion_ns, lo = pol.tenants[1].completion_ns;
  Outcome o;
  o.pass = pol.tenants[0].priority < pol.tenants[1].priority && hi < lo && pol.memory_time_ns < base.memory_time_ns;
  o.detail = "high " + fmt(hi / 1e6) + "ms, low " + fmt(lo / 1e6) + "ms, combined " + fmt(pol.memory_time_ns / 1e6) +
             "ms vs baseline " + fmt(base.memory_time_ns / 1e6) + "ms";
  return o;
}

const ClassReport* cls(const MetricsReport& r, const std::string& c) {
  for (const auto& x : r.classes)
    if (x.tenant_class == c) return &x;
  return nullptr;
}

Outcome sched_differentiation() {
  auto base = run_scenario(scenario("lcbe_baseline.ini")).report;
  auto pol = run_scenario(scenario("lcbe_policy.ini")).report;
  const auto *blc = cls(base, "LC"), *bbe = cls(base, "BE"), *plc = cls(pol, "LC"), *pbe = cls(pol, "BE");
  if (!blc || !bbe || !plc || !pbe) return {false, "missing class report"};
  uint64_t lc_slice = 0, be_slice = UINT64_MAX;
  for (const auto& q : pol.queues)
    (q.tenant_class == "LC" ? lc_slice : be_slice) = q.timeslice_us;
  double ratio = static_cast<double>(plc->latency.p99_us) / static_cast<double>(blc->latency.p99_us);
  double tput = std::abs(pbe->throughput - bbe->throughput) / bbe->throughput;
  Outcome o;
  o.pass = lc_slice >= 100 * be_slice && ratio <= kLcP99Ratio && tput <= kBeThroughputTol;
  o.detail = "LC P99 " + std::to_string(plc->latency.p99_us) + "us vs " + std::to_string(blc->latency.p99_us) +
             "us (" + fmt(ratio) + "x), BE throughput " + fmt(pbe->throughput) + " vs " + fmt(bbe->throughput);
  return o;
}

std::map<std::string, uint64_t> makespans(const MetricsReport& r) {
  std::map<std::string, uint64_t> m;
  for (const auto& b : r.blocks) m[b.policy] = b.makespan_us;
  return m;
}

Outcome work_stealing() {
  auto mod = makespans(run_scenario(scenario("blocks_moderate.ini")).report);
  auto heavy_s = scenario("blocks_heavy_tail.ini");
  auto heavy = makespans(run_scenario(heavy_s).report);
  double g = static_cast<double>(mod["greedy"]), f = static_cast<double>(mod["fixed"]);
  double hg = static_cast<double>(heavy["greedy"]), hf = static_cast<double>(heavy["fixed"]);
  double hb = static_cast<double>(heavy["budget"]);
  Outcome o;
  o.pass = f > 0 && g <= kGreedyModerate * f && hg > hf && std::abs(hb - hf) <= kBudgetTol * hf &&
           heavy_s.block->config.steal_cost_us > 0;
  o.detail = "moderate greedy/fixed " + fmt(g / f) + "; heavy tail greedy/fixed " + fmt(hg / hf) + ", budget/fixed " +
             fmt(hb / hf);
  return o;
}

MapConfig map_config(uint32_t id, MapKind kind, uint64_t entries = 0) {
  MapConfig c;
  c.id = id;
  c.name = "m" + std::to_string(id);
  c.kind = kind;
  c.entries = entries;
  return c;
}

Outcome map_conservation() {
  std::mt19937_64 rng(7);
  MapStore store(4);
  store.create(map_config(0, MapKind::Hash));
  store.create(map_config(1, MapKind::PerWarpAccum));
  auto arr = map_config(2, MapKind::Array, 128);
  arr.tier_policy = TierPolicy::AccessDriven;
  store.create(arr);
  std::map<std::pair<uint32_t, uint64_t>, int64_t> oracle, merged, host;
  uint64_t last = 0;
  int epoch_errors = 0, read_errors = 0, state_errors = 0;
  for (int k = 0; k < 20; ++k) {
    for (int i = 0; i < 5000; ++i) {
      auto id = static_cast<uint32_t>(rng() % 3);
      uint64_t key = rng() % 128;
      auto delta = static_cast<int64_t>(rng() % 201) - 100;
      bool from_host = rng() % 5 == 0;
      auto origin = from_host ? Origin::from_host()
                              : Origin::from_warp(static_cast<uint32_t>(rng() % 4), static_cast<uint32_t>(rng() % 8));
      store.update(id, key, delta, origin);
      oracle[{id, key}] += delta;
      if (from_host) host[{id, key}] += delta;
      if (i % 101 == 0) {
        auto rid = static_cast<uint32_t>(rng() % 3);
        uint64_t rkey = rng() % 128;
        read_errors += store.lookup(rid, rkey, Origin::from_host()).value != merged[{rid, rkey}] + host[{rid, rkey}];
      }
    }
    auto e = store.snapshot_merge();
    epoch_errors += e <= last;
    last = e;
    merged = oracle;
    host.clear();
  }
  for (const auto& [key, v] : oracle) state_errors += store.lookup(key.first, key.second, Origin::from_host()).value != v;
  for (const auto& r : store.dump()) {
    auto it = oracle.find({r.map_id, r.key});
    state_errors += r.value != (it == oracle.end() ? 0 : it->second);
  }
  Outcome o;
  o.pass = epoch_errors == 0 && read_errors == 0 && state_errors == 0;
  o.detail = "1e5 updates, 20 merges: " + std::to_string(state_errors) + " state, " + std::to_string(epoch_errors) +
             " epoch, " + std::to_string(read_errors) + " host-read mismatches";
  return o;
}

Outcome hook_overhead() {
  auto bare = run_scenario(scenario("overhead_bare.ini"));
  auto empty = run_scenario(scenario("overhead_empty.ini"));
  uint64_t hooks = 0;
  for (const auto& e : empty.log) hooks += e.source == "mem" && e.kind == "HOOK";
  uint64_t per = empty.report.hooks.overhead_ns_per_hook;
  int64_t diff = static_cast<int64_t>(empty.report.memory_makespan_ns) - static_cast<int64_t>(bare.report.memory_makespan_ns);
  bool reconciled = reconcile(empty.report, empty.log).empty() && empty.report.hooks.host_invocations == hooks;
  Outcome o;
  o.pass = hooks > 0 && per > 0 && diff == static_cast<int64_t>(per * hooks) && reconciled &&
           empty.report.tenants[0].faults == bare.report.tenants[0].faults;
  o.detail = "time delta " + std::to_string(diff) + "ns = " + std::to_string(per) + "ns x " + std::to_string(hooks) +
             " logged hooks";
  return o;
}

Outcome determinism() {
  int diffs = 0, runs = 0;
  for (auto name : {"stride_prefetch.ini", "zipf_lfu.ini", "multitenant_policy.ini", "lcbe_policy.ini",
                    "blocks_heavy_tail.ini", "overhead_empty.ini", "kernel_l2.ini"}) {
    auto a = run_scenario(scenario(name)), b = run_scenario(scenario(name));
    diffs += log_text(a.log) != log_text(b.log);
    diffs += emit_report(a.report, ReportFormat::Json) != emit_report(b.report, ReportFormat::Json);
    diffs += emit_report(a.report, ReportFormat::Csv) != emit_report(b.report, ReportFormat::Csv);
    ++runs;
  }
  return {diffs == 0, std::to_string(runs) + " scenarios run twice, " + std::to_string(diffs) + " differing outputs"};
}

Outcome observability() {
  auto t = run_tool("threadhist", scenario("threadhist_skew.ini"));
  double ratio = t.summary.at("imbalance_ratio");
  return {ratio > kImbalance, "threadhist max/min per-worker units " + fmt(ratio)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0: no limit
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "verifier corpus", 5, corpus},
      {2, "accepted programs never diverge", 60, soundness},
      {3, "warp-leader equivalence", 0, leader_equivalence},
      {4, "prefetch pattern sensitivity", 10, prefetch_sensitivity},
      {5, "eviction policy ordering", 10, eviction_ordering},
      {6, "multi-tenant priority", 20, multitenant},
      {7, "scheduling differentiation", 0, sched_differentiation},
      {8, "work-stealing regimes", 0, work_stealing},
      {9, "map conservation", 0, map_conservation},
      {10, "hook overhead bound", 0, hook_overhead},
      {11, "determinism", 0, determinism},
      {12, "threadhist imbalance", 0, observability},
  };
  int failed = 0;
  for (const auto& c : all) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) o = with_limit(c.limit_s, took, o);
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(all.size()) - failed, all.size());
  return failed ? 1 : 0;
}
