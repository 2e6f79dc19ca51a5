#include "gpux/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "gpux/assembler.hpp"
#include "gpux/verifier.hpp"

namespace gpux {

namespace {

namespace fs = std::filesystem;
using boost::property_tree::ptree;

std::string join_problems(const std::vector<std::string>& p) {
  std::string out = "invalid scenario:";
  for (const auto& s : p) out += "\n  " + s;
  return out;
}

// Per-stream seed so tenants and queues draw independent sequences.
uint64_t sub_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).string();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

bool is_block_hook(std::string_view h) {
  return h == "enter" || h == "exit" || h == "probe" || h == "retprobe" || h == "should_try_steal";
}

bool is_kernel_hook(std::string_view h) { return h == "access" || h == "fence" || h == "enter"; }

std::optional<SchedHook> sched_hook(std::string_view h) {
  if (h == "task_init") return SchedHook::TaskInit;
  if (h == "task_destroy") return SchedHook::TaskDestroy;
  if (h == "launch_arrival") return SchedHook::LaunchArrival;
  return std::nullopt;
}

bool is_mem_hook(std::string_view h) {
  return h == "gpu_activate" || h == "gpu_access" || h == "gpu_evict_prepare" || h == "gpu_prefetch";
}

// A block arm decides stealing; everything else on block hooks observes.
bool is_block_arm(const PolicySpec& p) { return p.program("should_try_steal") != nullptr; }

// Reads one section's keys with typed getters, recording problems instead
// of stopping at the first.
class Section {
 public:
  Section(std::string name, const ptree& t, std::vector<std::string>& problems)
      : name_(std::move(name)), t_(t), problems_(problems) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = t_.find(key);
    if (it == t_.not_found()) return;
    used_.insert(key);
    const auto& v = it->second.data();
    if constexpr (std::is_same_v<T, std::string>) {
      out = v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "1" || v == "true" || v == "yes") out = true;
      else if (v == "0" || v == "false" || v == "no") out = false;
      else bad(key, "expected a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      double d = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
      if (ec != std::errc() || p != v.data() + v.size()) bad(key, "expected a number");
      else out = static_cast<T>(d);
    } else {
      T n{};
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
      if (ec != std::errc() || p != v.data() + v.size()) bad(key, "expected a non-negative integer");
      else out = n;
    }
  }
  /// Megabyte keys: `<base>_mb` scaled, or `<base>_bytes` verbatim.
  void get_bytes(const std::string& base, uint64_t& out) {
    uint64_t mb = 0;
    if (t_.find(base + "_mb") != t_.not_found()) {
      get(base + "_mb", mb);
      out = mb << 20;
    }
    get(base + "_bytes", out);
  }
  void bad(const std::string& key, const std::string& msg) { problems_.push_back("[" + name_ + "] " + key + ": " + msg); }
  void mark(const std::string& key) { used_.insert(key); }
  void finish() {
    for (const auto& [k, v] : t_)
      if (!used_.count(k)) problems_.push_back("[" + name_ + "] unknown key " + k);
  }
  const ptree& tree() const { return t_; }

 private:
  std::string name_;
  const ptree& t_;
  std::vector<std::string>& problems_;
  std::set<std::string> used_;
};

UnitDistribution parse_distribution(const std::string& s) {
  if (s == "uniform") return UnitDistribution::Uniform;
  if (s == "ramp") return UnitDistribution::Ramp;
  if (s == "heavy_tail") return UnitDistribution::HeavyTail;
  if (s == "skew") return UnitDistribution::Skew;
  throw ScenarioError({"unknown unit distribution " + s});
}

// Fills per-tenant keys the memory policies read from the tenant list when
// the policy section leaves them out.
void inject_tenant_params(const std::string& kind, PolicyParams& params, const std::vector<TenantSpec>& tenants,
                          uint64_t capacity) {
  if (kind != "QUOTA_LRU" && kind != "TREE") return;
  std::size_t mem_tenants = 0;
  for (const auto& t : tenants) mem_tenants += t.has_memory();
  for (const auto& t : tenants) {
    if (!t.has_memory()) continue;
    auto id = std::to_string(t.id);
    params.emplace("priority." + id, t.priority);
    if (kind == "QUOTA_LRU")
      params.emplace("quota." + id, static_cast<int64_t>(capacity / std::max<std::size_t>(1, mem_tenants)));
  }
}

}  // namespace

ScenarioError::ScenarioError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

PolicySpec custom_policy(const std::string& name, const std::vector<std::string>& sources) {
  PolicySpec s;
  s.name = name;
  s.kind = "CUSTOM";
  s.tag = "custom";
  bool host = false, device = false;
  for (const auto& src : sources) {
    auto p = assemble(src);
    auto r = verify(p);
    if (!r.accepted()) throw PolicyError("handler " + p.handler_name + " of " + name + " rejected:\n" + r.to_text());
    (domain_of(p.hook_type) == Domain::Device ? device : host) = true;
    s.programs.push_back(std::move(p));
  }
  s.domain = host && device ? Domain::Both : device ? Domain::Device : Domain::Host;
  return s;
}

Scenario parse_scenario(std::string_view text, const std::string& base_dir) {
  ptree root;
  try {
    std::istringstream in{std::string(text)};
    boost::property_tree::ini_parser::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ScenarioError({"line " + std::to_string(e.line()) + ": " + e.message()});
  }
  Scenario s;
  s.base_dir = base_dir;
  std::vector<std::string> problems;
  std::vector<std::pair<std::string, const ptree*>> policy_sections;
  std::map<uint32_t, TenantSpec> tenants;

  for (const auto& [name, tree] : root) {
    if (tree.empty()) {
      problems.push_back("key " + name + " outside any section");
      continue;
    }
    Section sec(name, tree, problems);
    if (name == "scenario") {
      sec.get("name", s.name);
      sec.get("seed", s.seed);
      sec.get("duration_us", s.duration_us);
    } else if (name == "device") {
      sec.get_bytes("capacity", s.mem.capacity_bytes);
      sec.get("link_gbps", s.mem.link_bytes_per_ns);
      sec.get("t_dev_ns", s.mem.t_dev_ns);
      sec.get("migrate_base_ns", s.mem.migrate_base_ns);
      sec.get("prefetch_cap", s.mem.prefetch_cap);
      sec.get("hit_sample", s.mem.hit_sample);
      sec.get("hook_overhead_ns", s.mem.hook_overhead_ns);
      sec.get("device_prefetch_pages", s.mem.device_prefetch_pages);
      sec.get("sm_count", s.sm_count);
    } else if (name == "sched") {
      sec.get("switch_cost_us", s.sched.switch_cost_us);
      sec.get("tick_us", s.sched.tick_us);
    } else if (name == "block") {
      BlockSpec b;
      b.config.sm_count = s.sm_count;
      std::string dist, assign, mode;
      sec.get("workers", b.workers);
      sec.get("units", b.units);
      sec.get("cost_us", b.cost_us);
      sec.get("distribution", dist);
      sec.get("ramp_pct", b.ramp_pct);
      sec.get("heavy_pct", b.heavy_pct);
      sec.get("heavy_factor", b.heavy_factor);
      sec.get("clustered", b.clustered);
      sec.get("pin_heavy", b.pin_heavy);
      sec.get("skew_pct", b.skew_pct);
      sec.get("assignment", assign);
      sec.get("steal_cost_us", b.config.steal_cost_us);
      sec.get("contention_pct", b.config.contention_pct);
      sec.get("mode", mode);
      try {
        if (!dist.empty()) b.distribution = parse_distribution(dist);
        if (!assign.empty()) b.assignment = parse_assignment(assign);
      } catch (const std::exception& e) {
        sec.bad(dist.empty() ? "assignment" : "distribution", e.what());
      }
      if (mode == "per_lane") b.config.mode = ExecMode::PerLane;
      else if (!mode.empty() && mode != "warp_leader") sec.bad("mode", "expected per_lane or warp_leader");
      s.block = b;
    } else if (name.rfind("tenant.", 0) == 0) {
      TenantSpec t;
      uint32_t id = 0;
      auto idtxt = name.substr(7);
      auto [p, ec] = std::from_chars(idtxt.data(), idtxt.data() + idtxt.size(), id);
      if (ec != std::errc() || p != idtxt.data() + idtxt.size()) {
        problems.push_back("[" + name + "] tenant id must be a number");
        continue;
      }
      t.id = id;
      t.name = "tenant" + idtxt;
      std::string cls, hooks;
      sec.get("name", t.name);
      sec.get("class", cls);
      sec.get("priority", t.priority);
      sec.get("pattern", t.pattern);
      sec.get_bytes("working_set", t.gen.working_set_bytes);
      sec.get("events", t.gen.events);
      sec.get("gap_ns", t.gen.gap_ns);
      sec.get("stride_bytes", t.gen.stride_bytes);
      sec.get("theta", t.gen.theta);
      sec.get("scatter", t.gen.scatter);
      sec.get("period_pages", t.gen.period_pages);
      sec.get("repeat", t.gen.repeat);
      sec.get("block_pages", t.gen.block_pages);
      sec.get("hot_fraction", t.gen.hot_fraction);
      sec.get("phase_events", t.gen.phase_events);
      sec.get("trace", t.trace_file);
      sec.get("kernel", t.kernel_file);
      sec.get("warps", t.warps);
      sec.get("kernels", t.kernels);
      sec.get("hooks", hooks);
      sec.get("queues", t.queues);
      sec.get("launches", t.launches);
      sec.get("launch_work_us", t.launch_work_us);
      sec.get("launch_gap_us", t.launch_gap_us);
      sec.get("arrival", t.arrival);
      sec.get("jitter_us", t.jitter_us);
      sec.get("timeslice_us", t.timeslice_us);
      try {
        if (!cls.empty()) t.tenant_class = parse_tenant_class(cls);
      } catch (const std::exception& e) {
        sec.bad("class", e.what());
      }
      try {
        if (!t.pattern.empty()) {
          parse_pattern(t.pattern);
          apply_pattern_arg(t.pattern, t.gen);
        }
      } catch (const std::exception& e) {
        sec.bad("pattern", e.what());
      }
      for (const auto& h : split_list(hooks)) {
        try {
          t.hook_points.push_back(parse_hook_point(h));
        } catch (const std::exception& e) {
          sec.bad("hooks", e.what());
        }
      }
      t.gen.tenant = id;
      if (t.launches > 0 && t.queues == 0) t.queues = 1;
      if (!tenants.emplace(id, t).second) problems.push_back("duplicate tenant " + idtxt);
    } else if (name.rfind("policy.", 0) == 0) {
      policy_sections.emplace_back(name, &tree);
      continue;  // keys checked when the policy is built
    } else {
      problems.push_back("unknown section [" + name + "]");
      continue;
    }
    sec.finish();
  }
  for (auto& [id, t] : tenants) s.tenants.push_back(t);
  if (s.block) s.block->config.sm_count = s.sm_count;

  for (const auto& [name, tree] : policy_sections) {
    auto pname = name.substr(7);
    std::string kind, file, programs;
    PolicyParams params;
    for (const auto& [k, v] : *tree) {
      const auto& d = v.data();
      if (k == "kind") kind = d;
      else if (k == "file") file = d;
      else if (k == "programs") programs = d;
      else {
        int64_t n = 0;
        auto [p, ec] = std::from_chars(d.data(), d.data() + d.size(), n);
        if (ec != std::errc() || p != d.data() + d.size()) problems.push_back("[" + name + "] " + k + ": expected an integer");
        else params[k] = n;
      }
    }
    try {
      if ((!kind.empty()) + (!file.empty()) + (!programs.empty()) != 1)
        throw PolicyError("give exactly one of kind, file or programs");
      PolicySpec spec;
      if (!programs.empty()) {
        if (!params.empty()) throw PolicyError("custom programs take no parameters");
        std::vector<std::string> sources;
        for (const auto& f : split_list(programs)) sources.push_back(read_file(resolve(base_dir, f)));
        spec = custom_policy(pname, sources);
      } else {
        if (!file.empty()) {
          auto fromfile = parse_policy_file(read_file(resolve(base_dir, file)));
          kind = fromfile.kind;
          for (const auto& [k, v] : fromfile.params) params.emplace(k, v);
        }
        inject_tenant_params(kind, params, s.tenants, s.mem.capacity_bytes);
        spec = build_policy(kind, params);
      }
      spec.name = pname;
      s.policies.push_back(std::move(spec));
    } catch (const std::exception& e) {
      problems.push_back("[" + name + "] " + e.what());
    }
  }
  if (!problems.empty()) throw ScenarioError(problems);
  return s;
}

Scenario load_scenario(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ScenarioError({e.what()});
  }
  auto dir = fs::path(path).parent_path().string();
  return parse_scenario(text, dir.empty() ? "." : dir);
}

std::vector<std::string> Scenario::validate() const {
  std::vector<std::string> p;
  if (mem.capacity_bytes == 0 || mem.capacity_bytes % kPageSize != 0)
    p.push_back("device capacity must be a positive multiple of 4096");
  if (mem.link_bytes_per_ns == 0) p.push_back("link bandwidth must be positive");
  if (sm_count == 0) p.push_back("sm_count must be positive");
  if (sched.tick_us == 0) p.push_back("sched tick must be positive");

  std::map<std::string, std::string> mem_claims, sched_claims, kernel_claims, observer_claims;
  for (const auto& pol : policies) {
    auto claim = [&](std::map<std::string, std::string>& m, const std::string& hook) {
      auto [it, fresh] = m.emplace(hook, pol.name);
      if (!fresh) p.push_back("policies " + it->second + " and " + pol.name + " both claim hook " + hook);
    };
    for (const auto& h : pol.hooks()) {
      if (is_mem_hook(h)) claim(mem_claims, h);
      else if (sched_hook(h)) claim(sched_claims, h);
    }
    for (const auto& prog : pol.programs) {
      if (!prog.verified) p.push_back("policy " + pol.name + " handler " + prog.handler_name + " is not verified");
      if (domain_of(prog.hook_type) != Domain::Device) continue;
      if (is_kernel_hook(prog.handler_name) && !is_block_arm(pol)) claim(kernel_claims, prog.handler_name);
      if (is_block_hook(prog.handler_name) && !is_block_arm(pol)) claim(observer_claims, prog.handler_name);
      if (is_block_arm(pol) && !block) p.push_back("block policy " + pol.name + " needs a [block] section");
    }
  }
  // Kernel handlers share one map view per SM, so their map tables must agree.
  const PolicyProgram* with_maps = nullptr;
  for (const auto& pol : policies)
    for (const auto& prog : pol.programs) {
      if (domain_of(prog.hook_type) != Domain::Device || !is_kernel_hook(prog.handler_name) || is_block_arm(pol) ||
          prog.map_refs.empty())
        continue;
      if (with_maps && with_maps->map_refs != prog.map_refs)
        p.push_back("kernel handlers must declare the same maps in the same order");
      with_maps = &prog;
    }

  std::set<uint32_t> ids;
  for (const auto& t : tenants) {
    auto where = "tenant " + std::to_string(t.id) + ": ";
    ids.insert(t.id);
    if (t.priority > 100) p.push_back(where + "priority must be 0..100");
    int sources = !t.pattern.empty() + !t.trace_file.empty() + !t.kernel_file.empty();
    if (sources > 1) p.push_back(where + "give at most one of pattern, trace or kernel");
    if (!t.pattern.empty()) {
      try {
        auto g = t.gen;
        g.events = 1;
        gen_trace(parse_pattern(t.pattern), g, 0);
      } catch (const std::exception& e) {
        p.push_back(where + e.what());
      }
      if (t.gen.events == 0) p.push_back(where + "events must be positive");
    }
    if (!t.trace_file.empty() && !fs::exists(resolve(base_dir, t.trace_file)))
      p.push_back(where + "trace file " + t.trace_file + " not found");
    if (!t.kernel_file.empty()) {
      try {
        parse_kernel_spec(read_file(resolve(base_dir, t.kernel_file)));
      } catch (const std::exception& e) {
        p.push_back(where + e.what());
      }
      if (t.warps == 0 || t.kernels == 0) p.push_back(where + "warps and kernels must be positive");
      if (t.gen.working_set_bytes == 0) p.push_back(where + "kernel tenants need a working set");
    }
    if (t.queues > 0) {
      if (t.launches > 0 && t.launch_work_us == 0) p.push_back(where + "launch work must be positive");
      if (t.arrival != "periodic" && t.arrival != "poisson" && t.arrival != "backlog")
        p.push_back(where + "arrival must be periodic, poisson or backlog");
      if (t.arrival != "backlog" && t.launch_gap_us == 0) p.push_back(where + "launch gap must be positive");
      if (t.arrival == "periodic" && t.jitter_us >= t.launch_gap_us && t.launch_gap_us > 0)
        p.push_back(where + "jitter must be below the launch gap");
      if (t.timeslice_us == 0) p.push_back(where + "timeslice must be positive");
    }
  }
  if (block) {
    if (block->workers == 0) p.push_back("block: workers must be positive");
    if (block->units == 0) p.push_back("block: units must be positive");
    if (block->cost_us == 0) p.push_back("block: cost must be positive");
    if (block->config.contention_pct >= 100) p.push_back("block: contention_pct must be below 100");
    if (block->heavy_pct > 100 || block->skew_pct > 100) p.push_back("block: percentages must be 0..100");
    if (block->heavy_factor == 0) p.push_back("block: heavy_factor must be positive");
  }
  return p;
}

std::vector<WorkUnit> make_units(const BlockSpec& b, uint64_t seed) {
  std::vector<WorkUnit> units(b.units);
  const uint32_t W = b.workers;
  for (uint32_t i = 0; i < b.units; ++i) {
    units[i].id = i;
    units[i].cost_us = b.cost_us;
    units[i].home_worker = b.assignment == Assignment::RoundRobin ? i % W
                                                                  : static_cast<uint32_t>(uint64_t{i} * W / b.units);
  }
  switch (b.distribution) {
    case UnitDistribution::Uniform:
      break;
    case UnitDistribution::Ramp: {
      // Worker w's share grows linearly: weight 100 + ramp_pct * w / (W - 1).
      std::vector<double> weight(W);
      double total = 0;
      for (uint32_t w = 0; w < W; ++w) {
        weight[w] = 100.0 + (W > 1 ? b.ramp_pct * static_cast<double>(w) / (W - 1) : 0);
        total += weight[w];
      }
      uint32_t next = 0;
      double acc = 0;
      for (uint32_t w = 0; w < W; ++w) {
        acc += weight[w];
        auto end = w + 1 == W ? b.units : static_cast<uint32_t>(std::llround(acc / total * b.units));
        for (; next < end; ++next) units[next].home_worker = w;
      }
      break;
    }
    case UnitDistribution::HeavyTail: {
      auto heavy = static_cast<uint32_t>(uint64_t{b.units} * b.heavy_pct / 100);
      std::vector<uint32_t> pick(b.units);
      for (uint32_t i = 0; i < b.units; ++i) pick[i] = i;
      if (!b.clustered) {
        std::mt19937_64 rng(sub_seed(seed, 0xb10c));
        for (uint32_t k = b.units; k > 1; --k) std::swap(pick[k - 1], pick[rng() % k]);
      }
      for (uint32_t k = 0; k < heavy; ++k) {
        units[pick[k]].cost_us = b.cost_us * b.heavy_factor;
        units[pick[k]].pinned = b.pin_heavy;
      }
      break;
    }
    case UnitDistribution::Skew: {
      auto on_zero = static_cast<uint32_t>(uint64_t{b.units} * b.skew_pct / 100);
      for (uint32_t i = 0; i < b.units; ++i)
        units[i].home_worker = i < on_zero || W == 1 ? 0 : 1 + (i - on_zero) % (W - 1);
      break;
    }
  }
  return units;
}

namespace {

LatencyReport to_report(const LatencySummary& s) { return {s.count, s.mean_us, s.p50_us, s.p90_us, s.p99_us}; }

struct MemTenant {
  const TenantSpec* spec;
  uint64_t base = 0;
  uint64_t bytes = 0;
  Trace trace;
  std::size_t next = 0;
  uint64_t clock = 0;
};

}  // namespace

RunResult run_scenario(const Scenario& s) {
  if (auto problems = s.validate(); !problems.empty()) throw ScenarioError(problems);

  RunResult out;
  auto& rep = out.report;
  rep.scenario = s.name;
  rep.seed = s.seed;
  rep.capacity_bytes = s.mem.capacity_bytes;
  rep.hooks.overhead_ns_per_hook = s.mem.hook_overhead_ns;

  MapStore store(s.sm_count);
  MemorySim mem(s.mem);
  for (const auto& pol : s.policies)
    if (auto p = instantiate_mem(pol, store)) mem.attach(p);

  // Traces are loaded and bounds-checked before anything runs.
  std::vector<MemTenant> mts;
  std::vector<std::string> problems;
  uint64_t total_ws = 0;
  for (const auto& t : s.tenants) {
    if (!t.has_memory()) continue;
    MemTenant m;
    m.spec = &t;
    if (!t.pattern.empty()) {
      m.trace = gen_trace(parse_pattern(t.pattern), t.gen, sub_seed(s.seed, t.id));
    } else if (!t.trace_file.empty()) {
      std::ifstream in(resolve(s.base_dir, t.trace_file));
      try {
        auto raw = read_trace(in);
        m.trace.working_set_bytes = raw.working_set_bytes;
        for (auto e : raw.events)
          if (e.op == TraceOp::Access) m.trace.events.push_back(e);
      } catch (const std::exception& e) {
        problems.push_back("tenant " + std::to_string(t.id) + ": " + e.what());
      }
      if (m.trace.working_set_bytes == 0)
        for (const auto& e : m.trace.events)
          m.trace.working_set_bytes = std::max(m.trace.working_set_bytes, (e.a0 / kPageSize + 1) * kPageSize);
    } else {
      m.trace.working_set_bytes = t.gen.working_set_bytes;
    }
    m.bytes = std::max<uint64_t>(m.trace.working_set_bytes, kPageSize);
    for (const auto& e : m.trace.events)
      if (e.a0 >= m.bytes) {
        problems.push_back("tenant " + std::to_string(t.id) + ": access beyond the working set");
        break;
      }
    total_ws += m.trace.working_set_bytes;
    mts.push_back(std::move(m));
  }
  if (!problems.empty()) throw ScenarioError(problems);
  for (auto& m : mts) m.base = mem.allocate(m.spec->id, m.bytes);
  rep.oversubscription = static_cast<double>(total_ws) / static_cast<double>(s.mem.capacity_bytes);

  // Closed loop: the tenant with the earliest clock issues its next access
  // and waits for it before issuing another.
  {
    using Item = std::pair<uint64_t, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> ready;
    for (std::size_t i = 0; i < mts.size(); ++i)
      if (!mts[i].trace.events.empty()) ready.emplace(mts[i].trace.events[0].time_ns, i);
    while (!ready.empty()) {
      auto [when, i] = ready.top();
      ready.pop();
      auto& m = mts[i];
      const auto& e = m.trace.events[m.next++];
      auto o = mem.access(m.base + e.a0, m.spec->id, when);
      m.clock = when + o.latency_ns;
      if (m.next < m.trace.events.size()) ready.emplace(std::max(m.clock, m.trace.events[m.next].time_ns), i);
    }
  }

  // Kernel tenants run after the trace phase on the same memory clock.
  uint64_t kclock = 0;
  for (const auto& m : mts) kclock = std::max(kclock, m.clock);
  std::map<std::string, const PolicyProgram*> kernel_handlers;
  const PolicyProgram* mapped = nullptr;
  for (const auto& pol : s.policies) {
    if (is_block_arm(pol)) continue;
    for (const auto& prog : pol.programs)
      if (domain_of(prog.hook_type) == Domain::Device && is_kernel_hook(prog.handler_name)) {
        kernel_handlers[prog.handler_name] = &prog;
        if (!prog.map_refs.empty()) mapped = &prog;
      }
  }
  uint32_t kernel_id = 0;
  for (auto& m : mts) {
    const auto& t = *m.spec;
    if (t.kernel_file.empty()) continue;
    auto spec = parse_kernel_spec(read_file(resolve(s.base_dir, t.kernel_file)));
    auto ik = instrument(spec, t.hook_points);
    std::vector<uint32_t> slots = mapped ? bind_maps(store, *mapped) : std::vector<uint32_t>{};
    KfuncHandler kf = [&](HelperId id, std::span<const uint64_t, 5> args) -> uint64_t {
      if (id != HelperId::GdevMemPrefetch) return 0;
      if (args[0] >= m.bytes) return 0;
      return mem.device_prefetch(static_cast<uint32_t>((m.base + args[0]) / kRegionSize), kclock);
    };
    std::vector<MapView> views;
    for (uint32_t sm = 0; sm < s.sm_count; ++sm) views.emplace_back(store, slots, Origin::from_warp(sm, 0), kf);
    for (uint32_t k = 0; k < t.kernels; ++k) {
      KernelLaunchConfig cfg;
      cfg.kernel_id = kernel_id++;
      cfg.sm_count = s.sm_count;
      cfg.warps = t.warps;
      auto st = run_kernel(ik, cfg, kernel_handlers, [&](uint32_t sm) -> Runtime& { return views[sm]; },
                           [&](uint32_t, uint64_t addr) {
                             auto o = mem.access(m.base + addr % m.bytes, t.id, kclock);
                             kclock += o.latency_ns;
                           });
      rep.hooks.device_invocations += st.hook_calls;
      rep.hooks.device_cost_ns += st.hook_cost_ns;
      store.snapshot_merge();
    }
    m.clock = kclock;
  }

  for (const auto& m : mts) {
    const auto& t = *m.spec;
    TenantReport tr;
    tr.id = t.id;
    tr.name = t.name;
    tr.tenant_class = std::string(to_string(t.tenant_class));
    tr.priority = t.priority;
    tr.working_set_bytes = m.trace.working_set_bytes;
    if (auto it = mem.tenants().find(t.id); it != mem.tenants().end()) {
      const auto& st = it->second;
      tr.accesses = st.accesses;
      tr.hits = st.hits;
      tr.minor_faults = st.minor_faults;
      tr.major_faults = st.major_faults;
      tr.faults = st.faults();
      tr.migrated_bytes = st.migrated_bytes;
      tr.prefetched_pages = st.prefetched_pages;
      tr.wasted_prefetch_pages = st.wasted_prefetch_pages;
      tr.evictions = st.evictions;
      tr.hit_rate = st.accesses ? static_cast<double>(st.hits) / static_cast<double>(st.accesses) : 0.0;
    }
    tr.completion_ns = m.clock;
    rep.memory_time_ns += m.clock;
    rep.memory_makespan_ns = std::max(rep.memory_makespan_ns, m.clock);
    rep.tenants.push_back(tr);
  }
  rep.hooks.host_invocations = mem.hook_invocations();
  rep.hooks.host_overhead_ns = mem.hook_invocations() * s.mem.hook_overhead_ns;
  rep.hooks.violations = mem.violations();
  rep.hooks.budget_violations = mem.budget_violations();
  for (const auto& e : mem.events())
    out.log.push_back({e.time_ns, "mem", e.kind, e.region, e.page, e.tenant, e.outcome, e.migrated_bytes});

  // Queue scheduling.
  bool any_queues = std::any_of(s.tenants.begin(), s.tenants.end(), [](const TenantSpec& t) { return t.queues > 0; });
  if (any_queues) {
    SchedSim sim(s.sched);
    for (const auto& pol : s.policies)
      if (auto p = instantiate_sched(pol, store)) sim.attach(p);
    struct Sub {
      uint64_t time;
      uint32_t queue;
      uint64_t work;
    };
    std::vector<Sub> subs;
    for (const auto& t : s.tenants) {
      for (uint32_t qi = 0; qi < t.queues; ++qi) {
        QueueAttrs a;
        a.priority = t.priority;
        a.timeslice_us = t.timeslice_us;
        a.tenant_class = t.tenant_class;
        auto cr = sim.queue_create(t.id, a, 0);
        if (cr.rejected) continue;
        std::mt19937_64 rng(sub_seed(s.seed, t.id, qi + 1));
        uint64_t at = t.arrival == "backlog" ? 0 : rng() % t.launch_gap_us;
        for (uint64_t k = 0; k < t.launches; ++k) {
          uint64_t time = at;
          if (t.arrival == "periodic") {
            time = at + k * t.launch_gap_us + (t.jitter_us ? rng() % (t.jitter_us + 1) : 0);
          } else if (t.arrival == "poisson") {
            if (k > 0) at += static_cast<uint64_t>(std::llround(-std::log(1.0 - unit_double(rng)) * t.launch_gap_us));
            time = at;
          }
          subs.push_back({time, cr.queue_id, t.launch_work_us});
        }
      }
    }
    std::stable_sort(subs.begin(), subs.end(), [](const Sub& a, const Sub& b) { return a.time < b.time; });
    std::vector<LogRecord> submits;
    for (const auto& x : subs) {
      auto id = sim.submit(x.queue, x.work, x.time);
      submits.push_back({x.time * 1000, "sched", "SUBMIT", x.queue, static_cast<int64_t>(id),
                         sim.queue(x.queue).tenant, "", 0});
    }
    out.log.insert(out.log.end(), submits.begin(), submits.end());
    if (s.duration_us) sim.advance(s.duration_us);
    else sim.run_to_completion();
    rep.sched_horizon_us = sim.now();

    std::map<TenantClass, uint64_t> done;
    for (const auto& d : sim.queues()) {
      QueueReport qr;
      qr.id = d.id;
      qr.tenant = d.tenant;
      qr.tenant_class = std::string(to_string(d.attrs.tenant_class));
      qr.state = std::string(to_string(d.state));
      qr.priority = d.attrs.priority;
      qr.timeslice_us = d.attrs.timeslice_us;
      for (const auto& l : sim.launches()) {
        if (l.queue != d.id) continue;
        ++qr.launches;
        qr.completed += l.end_us.has_value();
        qr.work_done_us += l.total_us - l.work_us;
      }
      qr.latency = to_report(summarize(sim.latencies(d.id)));
      done[d.attrs.tenant_class] += qr.work_done_us;
      rep.queues.push_back(qr);
    }
    for (auto c : {TenantClass::LC, TenantClass::BE}) {
      if (!done.count(c)) continue;
      ClassReport cr;
      cr.tenant_class = std::string(to_string(c));
      cr.work_done_us = done[c];
      cr.throughput = rep.sched_horizon_us ? static_cast<double>(done[c]) / static_cast<double>(rep.sched_horizon_us) : 0;
      cr.latency = to_report(summarize(sim.latencies(c)));
      rep.classes.push_back(cr);
    }
    rep.hooks.violations += sim.violations();
    std::map<uint32_t, uint32_t> owner;
    for (const auto& d : sim.queues()) owner[d.id] = d.tenant;
    for (const auto& e : sim.events())
      out.log.push_back({e.time_us * 1000, "sched", e.kind, e.queue, e.launch,
                         e.queue >= 0 ? owner[static_cast<uint32_t>(e.queue)] : 0, "", 0});
  }

  // Block scheduling: each arm runs the same units; observers join every arm.
  if (s.block) {
    std::vector<const PolicySpec*> arms;
    BlockPolicySet observers;
    for (const auto& pol : s.policies) {
      if (is_block_arm(pol)) {
        arms.push_back(&pol);
        continue;
      }
      for (const auto& prog : pol.programs)
        if (domain_of(prog.hook_type) == Domain::Device && is_block_hook(prog.handler_name))
          observers[prog.handler_name] = &prog;
    }
    PolicySpec fixed;
    if (arms.empty()) {
      fixed = build_block("FIXED");
      arms.push_back(&fixed);
    }
    auto units = make_units(*s.block, s.seed);
    for (const auto* arm : arms) {
      auto set = block_policy_set(*arm);
      for (const auto& [h, p] : observers) set.emplace(h, p);
      BlockScheduler bs(units, s.block->workers, s.block->config);
      auto r = bs.run(set, &store);
      store.snapshot_merge();
      BlockReport br;
      br.policy = arm->name;
      br.makespan_us = r.makespan_us;
      for (auto v : r.steals) br.steals += v;
      for (auto v : r.attempts) br.attempts += v;
      br.busy_us = r.busy_us;
      br.units_run = r.units_run;
      for (const auto& [h, n] : r.hook_calls) rep.hooks.device_invocations += n;
      rep.hooks.device_cost_ns += r.hook_cost_ns;
      rep.blocks.push_back(br);
      for (const auto& t : r.timeline)
        out.log.push_back({t.start_us * 1000, "block", t.unit < 0 ? "STEAL_FAIL" : t.stolen ? "RUN_STOLEN" : "RUN",
                           t.worker, t.unit, 0, arm->name, (t.end_us - t.start_us) * 1000});
    }
  }

  for (auto id : store.ids()) {
    const auto& m = store.get(id);
    rep.maps.push_back({id, m.name(), m.epoch(), m.canonical()});
  }
  return out;
}

void write_log(std::ostream& out, const std::vector<LogRecord>& log) {
  for (const auto& r : log)
    out << r.time_ns << '\t' << r.source << '\t' << r.kind << '\t' << r.a << '\t' << r.b << '\t' << r.tenant << '\t'
        << (r.outcome.empty() ? "-" : r.outcome) << '\t' << r.bytes << '\n';
}

std::vector<LogRecord> read_log(std::istream& in) {
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream f(line);
    LogRecord r;
    if (!(f >> r.time_ns >> r.source >> r.kind >> r.a >> r.b >> r.tenant >> r.outcome >> r.bytes))
      throw std::runtime_error("malformed log line: " + line);
    if (r.outcome == "-") r.outcome.clear();
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

using nlohmann::ordered_json;

ordered_json latency_json(const LatencyReport& l) {
  return {{"count", l.count}, {"mean_us", l.mean_us}, {"p50_us", l.p50_us}, {"p90_us", l.p90_us}, {"p99_us", l.p99_us}};
}

LatencyReport latency_from(const nlohmann::json& j) {
  return {j.at("count"), j.at("mean_us"), j.at("p50_us"), j.at("p90_us"), j.at("p99_us")};
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

std::string emit_report(const MetricsReport& r, ReportFormat f) {
  if (f == ReportFormat::Csv) {
    std::ostringstream o;
    o << "tenant,name,class,priority,working_set_bytes,accesses,hits,minor_faults,major_faults,faults,"
         "migrated_bytes,prefetched_pages,wasted_prefetch_pages,evictions,hit_rate,completion_ns\n";
    for (const auto& t : r.tenants)
      o << t.id << ',' << t.name << ',' << t.tenant_class << ',' << t.priority << ',' << t.working_set_bytes << ','
        << t.accesses << ',' << t.hits << ',' << t.minor_faults << ',' << t.major_faults << ',' << t.faults << ','
        << t.migrated_bytes << ',' << t.prefetched_pages << ',' << t.wasted_prefetch_pages << ',' << t.evictions << ','
        << fmt_double(t.hit_rate) << ',' << t.completion_ns << '\n';
    return o.str();
  }
  ordered_json j;
  j["schema_version"] = r.schema_version;
  j["scenario"] = r.scenario;
  j["seed"] = r.seed;
  j["capacity_bytes"] = r.capacity_bytes;
  j["oversubscription"] = r.oversubscription;
  j["memory_time_ns"] = r.memory_time_ns;
  j["memory_makespan_ns"] = r.memory_makespan_ns;
  j["sched_horizon_us"] = r.sched_horizon_us;
  j["tenants"] = ordered_json::array();
  for (const auto& t : r.tenants)
    j["tenants"].push_back({{"id", t.id},
                            {"name", t.name},
                            {"class", t.tenant_class},
                            {"priority", t.priority},
                            {"working_set_bytes", t.working_set_bytes},
                            {"accesses", t.accesses},
                            {"hits", t.hits},
                            {"minor_faults", t.minor_faults},
                            {"major_faults", t.major_faults},
                            {"faults", t.faults},
                            {"migrated_bytes", t.migrated_bytes},
                            {"prefetched_pages", t.prefetched_pages},
                            {"wasted_prefetch_pages", t.wasted_prefetch_pages},
                            {"evictions", t.evictions},
                            {"hit_rate", t.hit_rate},
                            {"completion_ns", t.completion_ns}});
  j["queues"] = ordered_json::array();
  for (const auto& q : r.queues)
    j["queues"].push_back({{"id", q.id},
                           {"tenant", q.tenant},
                           {"class", q.tenant_class},
                           {"state", q.state},
                           {"priority", q.priority},
                           {"timeslice_us", q.timeslice_us},
                           {"launches", q.launches},
                           {"completed", q.completed},
                           {"work_done_us", q.work_done_us},
                           {"latency", latency_json(q.latency)}});
  j["classes"] = ordered_json::array();
  for (const auto& c : r.classes)
    j["classes"].push_back({{"class", c.tenant_class},
                            {"work_done_us", c.work_done_us},
                            {"throughput", c.throughput},
                            {"latency", latency_json(c.latency)}});
  j["blocks"] = ordered_json::array();
  for (const auto& b : r.blocks)
    j["blocks"].push_back({{"policy", b.policy},
                           {"makespan_us", b.makespan_us},
                           {"steals", b.steals},
                           {"attempts", b.attempts},
                           {"busy_us", b.busy_us},
                           {"units_run", b.units_run}});
  j["hooks"] = {{"host_invocations", r.hooks.host_invocations},
                {"overhead_ns_per_hook", r.hooks.overhead_ns_per_hook},
                {"host_overhead_ns", r.hooks.host_overhead_ns},
                {"device_invocations", r.hooks.device_invocations},
                {"device_cost_ns", r.hooks.device_cost_ns},
                {"violations", r.hooks.violations},
                {"budget_violations", r.hooks.budget_violations}};
  j["maps"] = ordered_json::array();
  for (const auto& m : r.maps) {
    ordered_json entries = ordered_json::array();
    for (const auto& [k, v] : m.entries) entries.push_back({k, v});
    j["maps"].push_back({{"id", m.id}, {"name", m.name}, {"epoch", m.epoch}, {"entries", entries}});
  }
  return j.dump(2) + "\n";
}

void write_report(const std::string& path, const MetricsReport& r, ReportFormat f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << emit_report(r, f);
  if (!out) throw std::runtime_error("write failed: " + path);
}

MetricsReport load_report_json(std::string_view text) {
  auto j = nlohmann::json::parse(text);
  MetricsReport r;
  r.schema_version = j.at("schema_version");
  if (r.schema_version != kReportSchemaVersion)
    throw std::runtime_error("unsupported report schema " + std::to_string(r.schema_version));
  r.scenario = j.at("scenario");
  r.seed = j.at("seed");
  r.capacity_bytes = j.at("capacity_bytes");
  r.oversubscription = j.at("oversubscription");
  r.memory_time_ns = j.at("memory_time_ns");
  r.memory_makespan_ns = j.at("memory_makespan_ns");
  r.sched_horizon_us = j.at("sched_horizon_us");
  for (const auto& t : j.at("tenants"))
    r.tenants.push_back({t.at("id"), t.at("name"), t.at("class"), t.at("priority"), t.at("working_set_bytes"),
                         t.at("accesses"), t.at("hits"), t.at("minor_faults"), t.at("major_faults"), t.at("faults"),
                         t.at("migrated_bytes"), t.at("prefetched_pages"), t.at("wasted_prefetch_pages"),
                         t.at("evictions"), t.at("hit_rate"), t.at("completion_ns")});
  for (const auto& q : j.at("queues"))
    r.queues.push_back({q.at("id"), q.at("tenant"), q.at("class"), q.at("state"), q.at("priority"),
                        q.at("timeslice_us"), q.at("launches"), q.at("completed"), q.at("work_done_us"),
                        latency_from(q.at("latency"))});
  for (const auto& c : j.at("classes"))
    r.classes.push_back({c.at("class"), c.at("work_done_us"), c.at("throughput"), latency_from(c.at("latency"))});
  for (const auto& b : j.at("blocks"))
    r.blocks.push_back({b.at("policy"), b.at("makespan_us"), b.at("steals"), b.at("attempts"), b.at("busy_us"),
                        b.at("units_run")});
  const auto& h = j.at("hooks");
  r.hooks = {h.at("host_invocations"), h.at("overhead_ns_per_hook"), h.at("host_overhead_ns"),
             h.at("device_invocations"), h.at("device_cost_ns"), h.at("violations"), h.at("budget_violations")};
  for (const auto& m : j.at("maps")) {
    MapReport mr{m.at("id"), m.at("name"), m.at("epoch"), {}};
    for (const auto& e : m.at("entries")) mr.entries[e.at(0).get<uint64_t>()] = e.at(1).get<int64_t>();
    r.maps.push_back(std::move(mr));
  }
  return r;
}

std::vector<std::string> reconcile(const MetricsReport& r, const std::vector<LogRecord>& log) {
  std::vector<std::string> p;
  uint64_t migrates = 0, hooks = 0;
  std::map<uint32_t, uint64_t> hits, faults, accesses;
  for (const auto& e : log) {
    if (e.source != "mem") continue;
    if (e.kind == "MIGRATE") ++migrates;
    else if (e.kind == "HOOK") ++hooks;
    else if (e.kind == "ACCESS") {
      ++accesses[e.tenant];
      (e.outcome == "HIT" ? hits : faults)[e.tenant]++;
    }
  }
  uint64_t migrated = 0;
  for (const auto& t : r.tenants) {
    migrated += t.migrated_bytes;
    auto id = std::to_string(t.id);
    if (t.accesses != accesses[t.id]) p.push_back("tenant " + id + ": accesses disagree with the log");
    if (t.hits != hits[t.id]) p.push_back("tenant " + id + ": hits disagree with the log");
    if (t.faults != faults[t.id]) p.push_back("tenant " + id + ": faults disagree with the log");
    if (t.hits + t.faults != t.accesses) p.push_back("tenant " + id + ": hits + faults != accesses");
  }
  if (migrated != migrates * kPageSize)
    p.push_back("migrated bytes " + std::to_string(migrated) + " != " + std::to_string(migrates) + " migrations x 4096");
  if (r.hooks.host_invocations != hooks) p.push_back("hook invocations disagree with the log");
  if (r.hooks.host_overhead_ns != hooks * r.hooks.overhead_ns_per_hook) p.push_back("hook overhead disagrees with the log");
  return p;
}

}  // namespace gpux
