#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gpux/assembler.hpp"
#include "gpux/harness.hpp"
#include "gpux/verifier.hpp"

namespace gpux {

namespace {

namespace fs = std::filesystem;

std::string num(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

// Parses the label line; false when the file has none.
bool read_label(const std::string& text, CorpusEntry& e) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto at = line.find("# expect:");
    if (at == std::string::npos) continue;
    std::istringstream f(line.substr(at + 9));
    std::string verdict, rules;
    f >> verdict >> rules;
    if (verdict == "ACCEPT") {
      e.expect_accept = true;
    } else if (verdict == "REJECT") {
      e.expect_accept = false;
      std::stringstream rs(rules);
      std::string r;
      while (std::getline(rs, r, ',')) {
        Rule rule{};
        if (!parse_rule(r, rule)) throw std::runtime_error(e.file + ": unknown rule " + r);
        e.expect_rules.push_back(rule);
      }
      if (e.expect_rules.empty()) throw std::runtime_error(e.file + ": REJECT label names no rule");
    } else {
      throw std::runtime_error(e.file + ": bad label " + verdict);
    }
    return true;
  }
  return false;
}

// Per-warp activity: unit count at enter, unit cost at probe. Keys pack
// (sm, warp) so the histogram has the device's shape.
constexpr const char* kThreadhistEnter = R"(
.hook enter
.map threadhist_units sm
.aggregate max
  mov r1, %threadhist_units
  ldxdw r2, [ctx.sm_id]
  lsh r2, 16
  ldxdw r3, [ctx.warp_id]
  or r2, r3
  mov r3, 1
  call map_update
  mov r0, 0
  exit
)";

constexpr const char* kThreadhistProbe = R"(
.hook probe
.map threadhist_work sm
.aggregate max
  mov r1, %threadhist_work
  ldxdw r2, [ctx.sm_id]
  lsh r2, 16
  ldxdw r3, [ctx.warp_id]
  or r2, r3
  ldxdw r3, [ctx.unit_cost_us]
  call map_update
  mov r0, 0
  exit
)";

// Finish time of every unit, plus one so a zero timestamp stays visible.
constexpr const char* kRetsnoopExit = R"(
.hook exit
.map retsnoop_finish global
.map retsnoop_worker global
.aggregate max
  ldxdw r6, [ctx.unit_id]
  mov r1, %retsnoop_finish
  mov r2, r6
  ldxdw r3, [ctx.time_us]
  add r3, 1
  call map_update
  mov r1, %retsnoop_worker
  mov r2, r6
  ldxdw r3, [ctx.worker_id]
  add r3, 1
  call map_update
  mov r0, 0
  exit
)";

constexpr const char* kLaunchlateEnter = R"(
.hook enter
.map launch_entry global
.aggregate max
  mov r1, %launch_entry
  ldxdw r2, [ctx.unit_id]
  ldxdw r3, [ctx.time_us]
  add r3, 1
  call map_update
  mov r0, 0
  exit
)";

// The scenario with only its first block arm, so per-worker maps describe
// one run.
Scenario single_arm(const Scenario& s) {
  Scenario out = s;
  out.policies.clear();
  bool arm = false;
  for (const auto& p : s.policies) {
    if (p.program("should_try_steal")) {
      if (arm) continue;
      arm = true;
    }
    out.policies.push_back(p);
  }
  return out;
}

const MapReport* find_map(const MetricsReport& r, const std::string& name) {
  for (const auto& m : r.maps)
    if (m.name == name) return &m;
  return nullptr;
}

ToolReport threadhist(const Scenario& base) {
  if (!base.block) throw ScenarioError({"threadhist needs a [block] section"});
  auto s = single_arm(base);
  s.policies.push_back(custom_policy("threadhist", {kThreadhistEnter, kThreadhistProbe}));
  auto res = run_scenario(s);
  const auto* units = find_map(res.report, "threadhist_units");
  const auto* work = find_map(res.report, "threadhist_work");
  ToolReport t;
  t.tool = "threadhist";
  t.columns = {"sm", "warp", "units", "work_us"};
  uint64_t mx = 0, mn = UINT64_MAX;
  for (uint32_t w = 0; w < s.block->workers; ++w) {
    uint64_t sm = w % s.sm_count, warp = w / s.sm_count, key = sm << 16 | warp;
    auto get = [&](const MapReport* m) -> uint64_t {
      if (!m) return 0;
      auto it = m->entries.find(key);
      return it == m->entries.end() ? 0 : static_cast<uint64_t>(it->second);
    };
    auto n = get(units);
    mx = std::max(mx, n);
    mn = std::min(mn, n);
    t.rows.push_back({std::to_string(sm), std::to_string(warp), std::to_string(n), std::to_string(get(work))});
  }
  t.summary["workers"] = s.block->workers;
  t.summary["max_units"] = static_cast<double>(mx);
  t.summary["min_units"] = static_cast<double>(mn);
  // An idle worker counts as one unit so the ratio stays finite.
  t.summary["imbalance_ratio"] = static_cast<double>(mx) / static_cast<double>(std::max<uint64_t>(mn, 1));
  return t;
}

ToolReport kernelretsnoop(const Scenario& base) {
  if (!base.block) throw ScenarioError({"kernelretsnoop needs a [block] section"});
  auto s = single_arm(base);
  s.policies.push_back(custom_policy("kernelretsnoop", {kRetsnoopExit}));
  auto res = run_scenario(s);
  const auto* fin = find_map(res.report, "retsnoop_finish");
  const auto* wk = find_map(res.report, "retsnoop_worker");
  ToolReport t;
  t.tool = "kernelretsnoop";
  t.columns = {"unit", "worker", "finish_us"};
  uint64_t lo = UINT64_MAX, hi = 0;
  if (fin)
    for (const auto& [unit, v] : fin->entries) {
      auto finish = static_cast<uint64_t>(v) - 1;
      int64_t worker = -1;
      if (wk)
        if (auto it = wk->entries.find(unit); it != wk->entries.end()) worker = it->second - 1;
      lo = std::min(lo, finish);
      hi = std::max(hi, finish);
      t.rows.push_back({std::to_string(unit), std::to_string(worker), std::to_string(finish)});
    }
  t.summary["timestamps"] = static_cast<double>(t.rows.size());
  t.summary["first_finish_us"] = t.rows.empty() ? 0 : static_cast<double>(lo);
  t.summary["last_finish_us"] = static_cast<double>(hi);
  t.summary["spread_us"] = t.rows.empty() ? 0 : static_cast<double>(hi - lo);
  return t;
}

ToolReport launchlate(const Scenario& s) {
  auto res = run_scenario(s);
  std::map<uint32_t, std::string> cls;
  for (const auto& q : res.report.queues) cls[q.id] = q.tenant_class;
  if (cls.empty()) throw ScenarioError({"launchlate needs tenants with queues"});

  // Device side: the first block of each launch enters when the engine
  // starts it; the handler stamps that time into a map.
  auto prog = assemble(kLaunchlateEnter);
  if (!verify(prog).accepted()) throw PolicyError("launchlate handler rejected");
  MapStore store(s.sm_count);
  auto slots = bind_maps(store, prog);
  std::map<int64_t, uint64_t> submit;
  std::map<int64_t, uint32_t> queue_of;
  std::set<int64_t> entered;
  for (const auto& e : res.log) {
    if (e.source != "sched") continue;
    if (e.kind == "SUBMIT") {
      submit[e.b] = e.time_ns / 1000;
      queue_of[e.b] = static_cast<uint32_t>(e.a);
    } else if (e.kind == "START" && entered.insert(e.b).second) {
      auto ctx = WarpContext::make("enter", 0, 0);
      ctx.uniform_values["unit_id"] = static_cast<uint64_t>(e.b);
      ctx.uniform_values["time_us"] = e.time_ns / 1000;
      MapView view(store, slots, Origin::from_warp(0, 0));
      run_hook(prog, ctx, view, ExecMode::WarpLeader);
    }
  }
  store.snapshot_merge();
  std::map<std::string, std::vector<uint64_t>> lat;
  for (const auto& [launch, v] : store.get(slots[0]).canonical()) {
    auto it = submit.find(static_cast<int64_t>(launch));
    if (it == submit.end()) continue;
    lat[cls[queue_of[it->first]]].push_back(static_cast<uint64_t>(v) - 1 - it->second);
  }
  ToolReport t;
  t.tool = "launchlate";
  t.columns = {"class", "launches", "mean_us", "p50_us", "p90_us", "p99_us"};
  for (const auto& [c, samples] : lat) {
    auto sum = summarize(samples);
    t.rows.push_back({c, std::to_string(sum.count), num(sum.mean_us), std::to_string(sum.p50_us),
                      std::to_string(sum.p90_us), std::to_string(sum.p99_us)});
    t.summary[c + "_p99_us"] = static_cast<double>(sum.p99_us);
    t.summary[c + "_mean_us"] = sum.mean_us;
  }
  return t;
}

}  // namespace

CorpusSummary corpus_check(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("corpus directory " + dir + " not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".gpa") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("corpus directory " + dir + " holds no programs");
  CorpusSummary sum;
  for (const auto& f : files) {
    CorpusEntry e;
    e.file = fs::relative(f, dir).string();
    std::ifstream in(f);
    std::stringstream ss;
    ss << in.rdbuf();
    if (!read_label(ss.str(), e)) throw std::runtime_error(e.file + ": missing '# expect:' label");
    (e.expect_accept ? sum.accept_count : sum.reject_count)++;
    try {
      auto prog = assemble(ss.str());
      auto rep = verify(prog);
      if (rep.accepted() != e.expect_accept) {
        e.detail = std::string("got ") + (rep.accepted() ? "ACCEPT" : "REJECT") + "\n" + rep.to_text();
      } else {
        e.passed = true;
        for (auto r : e.expect_rules)
          if (!rep.has(r)) {
            e.passed = false;
            e.detail = "missing rule " + std::string(to_string(r)) + "\n" + rep.to_text();
          }
      }
    } catch (const std::exception& ex) {
      e.detail = std::string("assembly failed: ") + ex.what();
    }
    sum.passed += e.passed;
    sum.entries.push_back(std::move(e));
  }
  return sum;
}

std::string ToolReport::to_text() const {
  std::ostringstream o;
  o << "# " << tool << "\n";
  for (std::size_t i = 0; i < columns.size(); ++i) o << (i ? "\t" : "") << columns[i];
  o << "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) o << (i ? "\t" : "") << r[i];
    o << "\n";
  }
  for (const auto& [k, v] : summary) o << "# " << k << " " << num(v) << "\n";
  return o.str();
}

ToolReport run_tool(const std::string& tool, const Scenario& s) {
  if (tool == "threadhist") return threadhist(s);
  if (tool == "kernelretsnoop") return kernelretsnoop(s);
  if (tool == "launchlate") return launchlate(s);
  throw std::invalid_argument("unknown tool " + tool);
}

}  // namespace gpux
