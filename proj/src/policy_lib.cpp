#include "gpux/policy_lib.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

#include "gpux/assembler.hpp"
#include "gpux/verifier.hpp"

namespace gpux {

namespace {

int64_t param(const PolicyParams& p, const std::string& key, int64_t fallback) {
  auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

// Per-tenant params as tenant -> value, from keys `<prefix>.<tenant>`.
std::map<uint32_t, int64_t> per_tenant(const PolicyParams& p, const std::string& prefix) {
  std::map<uint32_t, int64_t> out;
  for (const auto& [k, v] : p) {
    if (k.size() <= prefix.size() + 1 || k.compare(0, prefix.size() + 1, prefix + ".") != 0) continue;
    auto rest = k.substr(prefix.size() + 1);
    if (rest.empty() || !std::all_of(rest.begin(), rest.end(), ::isdigit))
      throw PolicyError("bad tenant in parameter " + k);
    out[static_cast<uint32_t>(std::stoul(rest))] = v;
  }
  return out;
}

int32_t imm(int64_t v, const char* what) {
  if (v < 0 || v > INT32_MAX) throw PolicyError(std::string(what) + " out of range");
  return static_cast<int32_t>(v);
}

PolicyProgram load(const std::string& src) {
  auto p = assemble(src);
  auto r = verify(p);
  if (!r.accepted()) throw PolicyError("catalog program rejected:\n" + r.to_text());
  return p;
}

std::optional<MemHook> mem_hook(std::string_view name) {
  for (auto h : {MemHook::Activate, MemHook::Access, MemHook::EvictPrepare, MemHook::Prefetch})
    if (hook_name(h) == name) return h;
  return std::nullopt;
}

std::string_view sched_hook_name(SchedHook h) {
  switch (h) {
    case SchedHook::TaskInit: return "task_init";
    case SchedHook::TaskDestroy: return "task_destroy";
    case SchedHook::LaunchArrival: return "launch_arrival";
  }
  return "?";
}

// Pages [first, ...) that still belong to `tenant`'s allocation.
bool tenant_page(const MemorySim& sim, uint32_t tenant, int64_t page) {
  if (page < 0) return false;
  auto region = static_cast<uint64_t>(page) / kPagesPerRegion;
  return region < sim.region_count() && sim.region(static_cast<uint32_t>(region)).tenant == tenant;
}

// ---------------------------------------------------------------------------
// Eviction (bytecode). Every candidate is offered from the victim end; the
// handler keeps the best score seen this round in a map and moves a better
// candidate to the head.

const char* kLfu = R"(
.hook gpu_evict_prepare
.map lfu_best host
  ldxdw r6, [ctx.access_count]
  ldxdw r1, [ctx.position]
  jeq r1, 0, take
  mov r1, %lfu_best
  mov r2, 0
  call map_lookup
  jge r6, r0, keep
take:
  mov r1, %lfu_best
  mov r2, 0
  mov r3, r6
  call map_set
  ldxdw r1, [ctx.region_id]
  call bpf_gpu_move_head
keep:
  mov r0, 0
  exit
)";

// Score, smallest evicted first:
//   bit 61   tenant within quota
//   bit 60   tenant priority outside the eviction band
//   50..59   100 - priority (lower value = more important = kept longer)
//   low bits last access time (LRU within a tenant)
// Config map keys: 0 band lo, 1 band hi, 16 + 2t quota of t, 17 + 2t priority of t.
const char* kQuotaLru = R"(
.hook gpu_evict_prepare
.map quota_cfg host
.map quota_best host
  ldxdw r7, [ctx.tenant]
  lsh r7, 1
  add r7, 16
  mov r1, %quota_cfg
  mov r2, r7
  add r2, 1
  call map_lookup
  mov r8, r0
  mov r9, 100
  sub r9, r8
  lsh r9, 50
  mov r1, %quota_cfg
  mov r2, 0
  call map_lookup
  jslt r8, r0, outside
  mov r1, %quota_cfg
  mov r2, 1
  call map_lookup
  jslt r0, r8, outside
  ja quota
outside:
  mov r1, 1
  lsh r1, 60
  add r9, r1
quota:
  mov r1, %quota_cfg
  mov r2, r7
  call map_lookup
  ldxdw r1, [ctx.tenant_resident_bytes]
  jlt r0, r1, score
  mov r1, 1
  lsh r1, 61
  add r9, r1
score:
  ldxdw r1, [ctx.last_access_ns]
  add r9, r1
  ldxdw r1, [ctx.position]
  jeq r1, 0, take
  mov r1, %quota_best
  mov r2, 0
  call map_lookup
  jge r9, r0, keep
take:
  mov r1, %quota_best
  mov r2, 0
  mov r3, r9
  call map_set
  ldxdw r1, [ctx.region_id]
  call bpf_gpu_move_head
keep:
  mov r0, 0
  exit
)";

// ---------------------------------------------------------------------------
// Prefetch (native).

class StridePrefetch : public MemPolicy {
 public:
  StridePrefetch(uint32_t history, uint32_t depth, uint32_t max_depth)
      : history_(history), depth0_(depth), max_depth_(max_depth) {}
  std::string name() const override { return "STRIDE"; }
  std::vector<MemHook> hooks() const override { return {MemHook::Prefetch}; }

  uint64_t invoke(MemHook, std::span<uint8_t> bytes, MemKfuncs& k) override {
    auto c = from_bytes<MemPrefetchCtx>(bytes);
    if (c.source != 0) return 0;
    auto& st = state(static_cast<uint32_t>(c.tenant));
    auto stride = st.det.observe(c.page);
    if (!stride) return 0;
    if (st.confirmed) st.depth = std::min(max_depth_, st.depth + 1);
    st.confirmed = true;
    auto p = static_cast<int64_t>(c.page);
    uint32_t issued = 0;
    for (uint32_t i = 1; i <= st.depth; ++i) {
      int64_t q = p + static_cast<int64_t>(i) * *stride;
      if (!tenant_page(k.sim(), static_cast<uint32_t>(c.tenant), q)) break;
      k.prefetch_pages(static_cast<uint64_t>(q), 1);
      ++issued;
    }
    st.det.predicted(static_cast<uint64_t>(p + static_cast<int64_t>(issued + 1) * *stride));
    return 0;
  }

  void on_evicted(const EvictionNotice& n) override {
    // A prefetched page that leaves unused is a mispredict.
    if (n.unused_prefetched == 0) return;
    auto& st = state(n.tenant);
    st.depth = std::max(1u, st.depth / 2);
    st.confirmed = false;
  }

 private:
  struct Tenant {
    StrideDetector det;
    uint32_t depth;
    bool confirmed = false;
  };
  Tenant& state(uint32_t t) {
    auto it = tenants_.find(t);
    if (it == tenants_.end()) it = tenants_.emplace(t, Tenant{StrideDetector(history_), depth0_}).first;
    return it->second;
  }
  uint32_t history_, depth0_, max_depth_;
  std::map<uint32_t, Tenant> tenants_;
};

class AdaptiveSeqPrefetch : public MemPolicy {
 public:
  AdaptiveSeqPrefetch(uint32_t min_pages, uint32_t max_pages, uint32_t window)
      : min_(min_pages), max_(max_pages), window_(window) {}
  std::string name() const override { return "ADAPTIVE_SEQ"; }
  std::vector<MemHook> hooks() const override { return {MemHook::Prefetch}; }

  uint64_t invoke(MemHook, std::span<uint8_t> bytes, MemKfuncs& k) override {
    auto c = from_bytes<MemPrefetchCtx>(bytes);
    if (c.source != 0) return 0;
    const auto& sim = k.sim();
    auto tenant = static_cast<uint32_t>(c.tenant);
    Sample s{c.time_ns, 0, 0, 0};
    for (const auto& [t, st] : sim.tenants()) {
      s.migrated += st.migrated_bytes;
      if (t == tenant) {
        s.accesses = st.accesses;
        s.faults = st.faults();
      }
    }
    auto& w = windows_[tenant];
    w.push_back(s);
    if (w.size() > window_) w.pop_front();
    double fault_rate = 1.0, util = 0.0;
    if (w.size() >= 2) {
      const auto& a = w.front();
      if (s.accesses > a.accesses)
        fault_rate = static_cast<double>(s.faults - a.faults) / static_cast<double>(s.accesses - a.accesses);
      if (s.time_ns > a.time_ns)
        util = static_cast<double>(s.migrated - a.migrated) /
               (static_cast<double>(s.time_ns - a.time_ns) * static_cast<double>(sim.config().link_bytes_per_ns));
    }
    fault_rate = std::clamp(fault_rate, 0.0, 1.0);
    util = std::clamp(util, 0.0, 1.0);
    auto n = static_cast<uint32_t>(std::lround(max_ * fault_rate * (1.0 - util)));
    n = std::clamp(n, min_, max_);
    for (uint32_t i = 1; i <= n; ++i) {
      auto q = static_cast<int64_t>(c.page) + i;
      if (!tenant_page(sim, tenant, q)) break;
      k.prefetch_pages(static_cast<uint64_t>(q), 1);
    }
    return 0;
  }

 private:
  struct Sample {
    uint64_t time_ns, accesses, faults, migrated;
  };
  uint32_t min_, max_, window_;
  std::map<uint32_t, std::deque<Sample>> windows_;
};

// Buddy tree over a region's pages: climb from the faulting page while the
// subtree is dense enough, then fetch the rest of the largest dense subtree.
// Hot regions (decayed access count at least the tenant mean) use half the
// density threshold.
class TreePrefetch : public MemPolicy {
 public:
  TreePrefetch(int64_t lo, int64_t hi, std::map<uint32_t, int64_t> prio, uint32_t threshold_pct,
               uint32_t decay_every)
      : lo_(lo), hi_(hi), prio_(std::move(prio)), threshold_(threshold_pct), decay_every_(decay_every) {}
  std::string name() const override { return "TREE"; }
  std::vector<MemHook> hooks() const override { return {MemHook::Access, MemHook::Prefetch}; }

  uint64_t invoke(MemHook h, std::span<uint8_t> bytes, MemKfuncs& k) override {
    if (h == MemHook::Access) {
      auto c = from_bytes<MemAccessCtx>(bytes);
      hot_[static_cast<uint32_t>(c.region_id)] += 1.0;
      if (++calls_ % decay_every_ == 0)
        for (auto& [r, v] : hot_) v *= 0.5;
      return 0;
    }
    auto c = from_bytes<MemPrefetchCtx>(bytes);
    auto tenant = static_cast<uint32_t>(c.tenant);
    auto pit = prio_.find(tenant);
    int64_t prio = pit == prio_.end() ? 50 : pit->second;
    if (prio < lo_ || prio > hi_) return 0;
    const auto& sim = k.sim();
    auto region = static_cast<uint32_t>(c.region_id);
    const auto& res = sim.region(region).resident;
    double sum = 0;
    uint32_t n = 0;
    for (const auto& [r, v] : hot_)
      if (sim.region(r).tenant == tenant) {
        sum += v;
        ++n;
      }
    bool hot = n > 0 && hot_[region] >= sum / n;
    uint32_t thr = hot ? threshold_ / 2 : threshold_;
    uint64_t bit = c.page % kPagesPerRegion;
    uint64_t best_lo = bit, best_size = 1;
    for (uint64_t size = 2; size <= kPagesPerRegion; size *= 2) {
      uint64_t lo = bit & ~(size - 1);
      uint64_t have = res.test(bit) ? 0 : 1;
      for (uint64_t i = lo; i < lo + size; ++i) have += res.test(i) ? 1 : 0;
      if (have * 100 < thr * size) break;
      best_lo = lo;
      best_size = size;
    }
    uint64_t base = c.page - bit;
    for (uint64_t i = best_lo; i < best_lo + best_size; ++i)
      if (i != bit && !res.test(i)) k.prefetch_pages(base + i, 1);
    return 0;
  }

 private:
  int64_t lo_, hi_;
  std::map<uint32_t, int64_t> prio_;
  uint32_t threshold_, decay_every_;
  uint64_t calls_ = 0;
  std::map<uint32_t, double> hot_;
};

// ---------------------------------------------------------------------------
// Scheduling.

std::string timeslice_source(int64_t lc, int64_t be, std::optional<int64_t> lc_prio, std::optional<int64_t> be_prio) {
  std::ostringstream os;
  auto set = [&](int kind, int64_t v) {
    os << "  mov r1, " << kind << "\n  mov r2, " << v << "\n  call bpf_gpu_set_attr\n";
  };
  os << ".hook task_init\n  ldxdw r6, [ctx.tenant_class]\n  jeq r6, 0, lc\n";
  set(1, be);
  if (be_prio) set(0, *be_prio);
  os << "  ja done\nlc:\n";
  set(1, lc);
  if (lc_prio) set(0, *lc_prio);
  os << "done:\n  mov r0, 0\n  exit\n";
  return os.str();
}

// An LC launch arriving while a BE queue holds the engine preempts it.
class PreemptTrigger : public SchedPolicy {
 public:
  std::string name() const override { return "PREEMPT_CTRL"; }
  std::vector<SchedHook> hooks() const override { return {SchedHook::LaunchArrival}; }
  int64_t invoke(SchedHook, std::span<uint8_t> bytes, SchedKfuncs& k) override {
    auto c = from_bytes<SchedQueueCtx>(bytes);
    if (c.tenant_class != static_cast<uint64_t>(TenantClass::LC)) return 0;
    auto cur = k.sim().running();
    if (cur && k.sim().queue(*cur).attrs.tenant_class == TenantClass::BE) k.preempt(*cur);
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Composite handler objects: bytecode for the hooks that have programs,
// native for the rest.

class SpecMemPolicy : public MemPolicy {
 public:
  SpecMemPolicy(std::string name, std::shared_ptr<BytecodeMemPolicy> bc, std::shared_ptr<MemPolicy> native)
      : name_(std::move(name)), bc_(std::move(bc)), native_(std::move(native)) {}
  std::string name() const override { return name_; }
  std::vector<MemHook> hooks() const override {
    std::vector<MemHook> out;
    if (bc_) out = bc_->hooks();
    if (native_)
      for (auto h : native_->hooks()) out.push_back(h);
    return out;
  }
  uint64_t invoke(MemHook h, std::span<uint8_t> ctx, MemKfuncs& k) override {
    if (native_) {
      auto hs = native_->hooks();
      if (std::find(hs.begin(), hs.end(), h) != hs.end()) return native_->invoke(h, ctx, k);
    }
    return bc_ ? bc_->invoke(h, ctx, k) : 0;
  }
  void on_evicted(const EvictionNotice& n) override {
    if (native_) native_->on_evicted(n);
  }

 private:
  std::string name_;
  std::shared_ptr<BytecodeMemPolicy> bc_;
  std::shared_ptr<MemPolicy> native_;
};

class SpecSchedPolicy : public SchedPolicy {
 public:
  SpecSchedPolicy(std::string name, std::shared_ptr<BytecodeSchedPolicy> bc, std::shared_ptr<SchedPolicy> native)
      : name_(std::move(name)), bc_(std::move(bc)), native_(std::move(native)) {}
  std::string name() const override { return name_; }
  std::vector<SchedHook> hooks() const override {
    std::vector<SchedHook> out;
    if (bc_) out = bc_->hooks();
    if (native_)
      for (auto h : native_->hooks()) out.push_back(h);
    return out;
  }
  int64_t invoke(SchedHook h, std::span<uint8_t> ctx, SchedKfuncs& k) override {
    if (native_) {
      auto hs = native_->hooks();
      if (std::find(hs.begin(), hs.end(), h) != hs.end()) return native_->invoke(h, ctx, k);
    }
    return bc_ ? bc_->invoke(h, ctx, k) : 0;
  }

 private:
  std::string name_;
  std::shared_ptr<BytecodeSchedPolicy> bc_;
  std::shared_ptr<SchedPolicy> native_;
};

void preload(const PolicySpec& spec, MapStore& store) {
  for (const auto& [name, kv] : spec.map_init) {
    auto id = store.ensure(name).id();
    for (const auto& [k, v] : kv) store.set(id, k, v);
  }
}

}  // namespace

std::optional<int64_t> StrideDetector::observe(uint64_t page) {
  if (next_expected_ && page == *next_expected_ && delta_ != 0) {
    last_ = page;
    return delta_;
  }
  next_expected_.reset();
  if (last_) {
    auto d = static_cast<int64_t>(page) - static_cast<int64_t>(*last_);
    if (d != 0 && d == delta_) {
      ++run_;
    } else {
      delta_ = d;
      run_ = d != 0 ? 1 : 0;
    }
  }
  last_ = page;
  if (run_ >= history_) return delta_;
  return std::nullopt;
}

std::vector<std::string> PolicySpec::hooks() const {
  std::vector<std::string> out;
  for (const auto& p : programs) out.push_back(p.handler_name);
  if (native_mem)
    for (auto h : native_mem()->hooks()) out.emplace_back(hook_name(h));
  if (native_sched)
    for (auto h : native_sched()->hooks()) out.emplace_back(sched_hook_name(h));
  return out;
}

const PolicyProgram* PolicySpec::program(std::string_view hook) const {
  for (const auto& p : programs)
    if (p.handler_name == hook) return &p;
  return nullptr;
}

PolicySpec build_eviction(const std::string& kind, const PolicyParams& params) {
  PolicySpec s;
  s.name = kind;
  s.kind = kind;
  s.domain = Domain::Host;
  s.params = params;
  if (kind == "FIFO") {
    s.tag = "Global FIFO Eviction";
  } else if (kind == "LFU") {
    s.tag = "Global LFU Eviction";
    s.programs.push_back(load(kLfu));
  } else if (kind == "QUOTA_LRU") {
    s.tag = "Multi-tenant Quota LRU";
    auto quotas = per_tenant(params, "quota");
    auto prios = per_tenant(params, "priority");
    if (quotas.empty()) throw PolicyError("QUOTA_LRU needs quota.<tenant> params");
    for (const auto& [t, q] : quotas)
      if (q <= 0) throw PolicyError("invalid quota for tenant " + std::to_string(t));
    for (const auto& [t, p] : prios)
      if (p < 0 || p > 100) throw PolicyError("priority must be 0..100");
    auto lo = param(params, "band_lo", 0), hi = param(params, "band_hi", 100);
    if (lo < 0 || hi > 100 || lo > hi) throw PolicyError("invalid eviction band");
    auto& cfg = s.map_init["quota_cfg"];
    cfg[0] = lo;
    cfg[1] = hi;
    for (const auto& [t, q] : quotas) {
      cfg[16 + 2 * uint64_t{t}] = q;
      cfg[17 + 2 * uint64_t{t}] = prios.count(t) ? prios[t] : 50;
    }
    for (const auto& [t, p] : prios)
      if (!quotas.count(t)) throw PolicyError("tenant " + std::to_string(t) + " has a priority but no quota");
    s.programs.push_back(load(kQuotaLru));
  } else {
    throw PolicyError("unknown eviction policy " + kind);
  }
  return s;
}

PolicySpec build_prefetch(const std::string& kind, const PolicyParams& params) {
  PolicySpec s;
  s.name = kind;
  s.kind = kind;
  s.params = params;
  s.domain = Domain::Host;
  if (kind == "STRIDE") {
    s.tag = "Stride Prefetch";
    auto history = param(params, "history", 3), depth = param(params, "depth", 32),
         max_depth = param(params, "max_depth", 64);
    if (history < 2 || history > 64) throw PolicyError("stride history must be 2..64");
    if (depth < 1 || max_depth < depth || max_depth > 512) throw PolicyError("invalid stride depth");
    s.native_mem = [=] {
      return std::make_shared<StridePrefetch>(static_cast<uint32_t>(history), static_cast<uint32_t>(depth),
                                              static_cast<uint32_t>(max_depth));
    };
  } else if (kind == "ADAPTIVE_SEQ") {
    s.tag = "Adaptive Seq. Prefetch";
    auto lo = param(params, "min_pages", 4), hi = param(params, "max_pages", 64), window = param(params, "window", 10);
    if (lo < 0 || hi < lo || hi > 512) throw PolicyError("invalid prefetch aggressiveness bounds");
    if (window < 2) throw PolicyError("adaptive window must be at least 2");
    s.native_mem = [=] {
      return std::make_shared<AdaptiveSeqPrefetch>(static_cast<uint32_t>(lo), static_cast<uint32_t>(hi),
                                                   static_cast<uint32_t>(window));
    };
  } else if (kind == "TREE") {
    s.tag = "Tree-based Prefetch";
    auto lo = param(params, "band_lo", 0), hi = param(params, "band_hi", 100);
    auto thr = param(params, "threshold_pct", 50), decay = param(params, "decay_every", 256);
    if (lo < 0 || hi > 100 || lo > hi) throw PolicyError("invalid prefetch band");
    if (thr < 1 || thr > 100) throw PolicyError("tree threshold must be 1..100");
    if (decay < 1) throw PolicyError("decay interval must be positive");
    auto prios = per_tenant(params, "priority");
    s.native_mem = [=] {
      return std::make_shared<TreePrefetch>(lo, hi, prios, static_cast<uint32_t>(thr), static_cast<uint32_t>(decay));
    };
  } else if (kind == "L2_STRIDE_DEVICE") {
    s.tag = "GPU L2 Stride Prefetch";
    s.domain = Domain::Device;
    // The warp covers [min, max]; fetch the span one stride further on.
    s.programs.push_back(load(R"(
.hook access
  ldxdw r1, [ctx.lane_addr]
  call warp_reduce_min
  mov r6, r0
  ldxdw r1, [ctx.lane_addr]
  call warp_reduce_max
  mov r7, r0
  mov r8, r7
  sub r8, r6
  add r8, r7
  ldxdw r1, [ctx.access_size]
  add r8, r1
  mov r1, r8
  call gdev_mem_prefetch
  mov r0, 0
  exit
)"));
  } else {
    throw PolicyError("unknown prefetch policy " + kind);
  }
  return s;
}

PolicySpec build_sched(const std::string& kind, const PolicyParams& params) {
  PolicySpec s;
  s.name = kind;
  s.kind = kind;
  s.params = params;
  s.domain = Domain::Host;
  if (kind != "DYN_TIMESLICE" && kind != "PREEMPT_CTRL") throw PolicyError("unknown sched policy " + kind);
  s.tag = kind == "DYN_TIMESLICE" ? "Dynamic Timeslice" : "Preemption Control";
  for (const auto& [k, v] : params) {
    bool known = k == "timeslice.LC" || k == "timeslice.BE" || k == "priority.LC" || k == "priority.BE";
    if (!known) throw PolicyError("unknown class mapping " + k);
  }
  if (!params.count("timeslice.LC") || !params.count("timeslice.BE"))
    throw PolicyError("missing class mapping: need timeslice.LC and timeslice.BE");
  auto lc = params.at("timeslice.LC"), be = params.at("timeslice.BE");
  if (lc <= 0 || be <= 0) throw PolicyError("timeslices must be positive");
  auto prio = [&](const char* k) -> std::optional<int64_t> {
    if (!params.count(k)) return std::nullopt;
    auto v = params.at(k);
    if (v < 0 || v > 100) throw PolicyError("priority must be 0..100");
    return v;
  };
  s.programs.push_back(load(timeslice_source(imm(lc, "timeslice"), imm(be, "timeslice"), prio("priority.LC"),
                                             prio("priority.BE"))));
  if (kind == "PREEMPT_CTRL") s.native_sched = [] { return std::make_shared<PreemptTrigger>(); };
  return s;
}

PolicySpec build_block(const std::string& kind, const PolicyParams& params) {
  PolicySpec s;
  s.name = kind;
  s.kind = kind;
  s.params = params;
  s.domain = Domain::Device;
  std::string body;
  if (kind == "FIXED") {
    s.tag = "FixedWork";
    body = "  mov r0, 0\n";
  } else if (kind == "GREEDY") {
    s.tag = "Greedy";
    body = "  mov r0, 1\n";
  } else if (kind == "MAX_STEALS") {
    s.tag = "MaxSteals (CLC)";
    auto cap = param(params, "cap", 0);
    if (cap <= 0) throw PolicyError("MAX_STEALS needs a positive cap");
    body = "  ldxdw r1, [ctx.steals_performed]\n  mov r0, 0\n  jge r1, " + std::to_string(imm(cap, "cap")) +
           ", out\n  mov r0, 1\nout:\n";
  } else if (kind == "LATENCY_BUDGET") {
    s.tag = "LatencyBudget (CLC)";
    auto budget = param(params, "budget_us", 0);
    if (budget <= 0) throw PolicyError("LATENCY_BUDGET needs a positive budget_us");
    body = "  ldxdw r1, [ctx.stolen_work_us]\n  mov r0, 0\n  jge r1, " + std::to_string(imm(budget, "budget")) +
           ", out\n  mov r0, 1\nout:\n";
  } else {
    throw PolicyError("unknown block policy " + kind);
  }
  s.programs.push_back(load(".hook should_try_steal\n" + body + "  exit\n"));
  return s;
}

const std::vector<CatalogEntry>& catalog() {
  static const std::vector<CatalogEntry> c = {
      {"FIFO", "eviction", "Global FIFO Eviction", Domain::Host},
      {"LFU", "eviction", "Global LFU Eviction", Domain::Host},
      {"QUOTA_LRU", "eviction", "Multi-tenant Quota LRU", Domain::Host},
      {"ADAPTIVE_SEQ", "prefetch", "Adaptive Seq. Prefetch", Domain::Host},
      {"STRIDE", "prefetch", "Stride Prefetch", Domain::Host},
      {"TREE", "prefetch", "Tree-based Prefetch", Domain::Host},
      {"L2_STRIDE_DEVICE", "prefetch", "GPU L2 Stride Prefetch", Domain::Device},
      {"DYN_TIMESLICE", "sched", "Dynamic Timeslice", Domain::Host},
      {"PREEMPT_CTRL", "sched", "Preemption Control", Domain::Host},
      {"FIXED", "block", "FixedWork", Domain::Device},
      {"GREEDY", "block", "Greedy", Domain::Device},
      {"MAX_STEALS", "block", "MaxSteals (CLC)", Domain::Device},
      {"LATENCY_BUDGET", "block", "LatencyBudget (CLC)", Domain::Device},
  };
  return c;
}

PolicySpec build_policy(const std::string& kind, const PolicyParams& params) {
  for (const auto& e : catalog()) {
    if (e.kind != kind) continue;
    if (e.family == "eviction") return build_eviction(kind, params);
    if (e.family == "prefetch") return build_prefetch(kind, params);
    if (e.family == "sched") return build_sched(kind, params);
    return build_block(kind, params);
  }
  throw PolicyError("unknown policy kind " + kind);
}

PolicySpec parse_policy_file(std::string_view text) {
  std::string name, kind;
  PolicyParams params;
  std::istringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto trim = [](std::string v) {
      auto a = v.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      return v.substr(a, v.find_last_not_of(" \t\r") - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw PolicyError("line " + std::to_string(n) + ": expected key = value");
    auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "name") {
      name = value;
    } else if (key == "kind") {
      kind = value;
    } else {
      try {
        std::size_t used = 0;
        params[key] = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::exception&) {
        throw PolicyError("line " + std::to_string(n) + ": " + key + " needs an integer");
      }
    }
  }
  if (kind.empty()) throw PolicyError("policy file has no kind");
  auto spec = build_policy(kind, params);
  if (!name.empty()) spec.name = name;
  return spec;
}

std::shared_ptr<MemPolicy> instantiate_mem(const PolicySpec& spec, MapStore& store) {
  std::shared_ptr<BytecodeMemPolicy> bc;
  for (const auto& p : spec.programs) {
    if (!mem_hook(p.handler_name)) continue;
    if (!bc) bc = std::make_shared<BytecodeMemPolicy>(spec.name, store);
    bc->add(p);
  }
  auto native = spec.native_mem ? spec.native_mem() : nullptr;
  if (!bc && !native) return nullptr;
  preload(spec, store);
  return std::make_shared<SpecMemPolicy>(spec.name, bc, native);
}

std::shared_ptr<SchedPolicy> instantiate_sched(const PolicySpec& spec, MapStore& store) {
  std::shared_ptr<BytecodeSchedPolicy> bc;
  for (const auto& p : spec.programs) {
    if (p.hook_type != HookType::GpuSched) continue;
    if (!bc) bc = std::make_shared<BytecodeSchedPolicy>(spec.name, store);
    bc->add(p);
  }
  auto native = spec.native_sched ? spec.native_sched() : nullptr;
  if (!bc && !native) return nullptr;
  preload(spec, store);
  return std::make_shared<SpecSchedPolicy>(spec.name, bc, native);
}

BlockPolicySet block_policy_set(const PolicySpec& spec) {
  BlockPolicySet out;
  for (const auto& p : spec.programs)
    if (p.handler_name == "enter" || p.handler_name == "exit" || p.handler_name == "probe" ||
        p.handler_name == "retprobe" || p.handler_name == "should_try_steal")
      out[p.handler_name] = &p;
  return out;
}

}  // namespace gpux
