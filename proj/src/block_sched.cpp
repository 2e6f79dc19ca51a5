#include "gpux/block_sched.hpp"

#include <algorithm>
#include <memory>
#include <queue>

#include "gpux/context.hpp"

namespace gpux {

Assignment parse_assignment(std::string_view s) {
  if (s == "round_robin" || s == "ROUND_ROBIN") return Assignment::RoundRobin;
  if (s == "blocked" || s == "BLOCKED") return Assignment::Blocked;
  throw BlockError("unknown assignment " + std::string(s));
}

uint64_t max_partition_sum(const std::vector<WorkUnit>& units, uint32_t workers) {
  std::vector<uint64_t> sum(workers, 0);
  for (const auto& u : units) sum.at(u.home_worker) += u.cost_us;
  return sum.empty() ? 0 : *std::max_element(sum.begin(), sum.end());
}

namespace {

std::vector<WorkUnit> partition(const std::vector<uint64_t>& costs, uint32_t workers, Assignment a) {
  if (workers == 0) throw BlockError("need at least one worker");
  std::vector<WorkUnit> units;
  std::size_t n = costs.size();
  for (std::size_t i = 0; i < n; ++i) {
    WorkUnit u;
    u.id = static_cast<uint32_t>(i);
    u.cost_us = costs[i];
    if (a == Assignment::RoundRobin)
      u.home_worker = static_cast<uint32_t>(i % workers);
    else
      u.home_worker = static_cast<uint32_t>(i * workers / n);
    units.push_back(u);
  }
  return units;
}

}  // namespace

BlockScheduler::BlockScheduler(const std::vector<uint64_t>& costs, uint32_t workers, Assignment a, BlockConfig cfg)
    : BlockScheduler(partition(costs, workers, a), workers, cfg) {}

BlockScheduler::BlockScheduler(std::vector<WorkUnit> units, uint32_t workers, BlockConfig cfg)
    : cfg_(cfg), units_(std::move(units)), workers_(workers), lock_free_(workers, 0) {
  if (workers == 0) throw BlockError("need at least one worker");
  if (units_.empty()) throw BlockError("need at least one work unit");
  if (cfg_.sm_count == 0) throw BlockError("need at least one SM");
  if (cfg_.contention_pct >= 100) throw BlockError("contention must stay below 100% of the steal cost");
  for (uint32_t w = 0; w < workers; ++w) workers_[w].id = w;
  for (std::size_t i = 0; i < units_.size(); ++i) {
    auto& u = units_[i];
    u.id = static_cast<uint32_t>(i);
    u.state = UnitState::Queued;
    if (u.home_worker >= workers) throw BlockError("unit home worker out of range");
    if (u.cost_us == 0) throw BlockError("unit cost must be positive");
    workers_[u.home_worker].local.push_back(u.id);
  }
}

std::optional<uint32_t> BlockScheduler::pick_victim() const {
  std::optional<uint32_t> best;
  for (const auto& w : workers_)
    if (!w.local.empty() && (!best || w.local.size() > workers_[*best].local.size())) best = w.id;
  return best;
}

std::optional<uint32_t> BlockScheduler::take(uint32_t thief, uint64_t& when, uint32_t* victim_out) {
  auto& t = workers_.at(thief);
  auto victim = pick_victim();
  if (!victim) return std::nullopt;
  if (victim_out) *victim_out = *victim;
  // The attempt holds the victim's deque lock for the steal cost.
  uint64_t start = std::max(when, lock_free_[*victim]);
  when = start + cfg_.steal_cost_us;
  lock_free_[*victim] = when;
  ++t.steal_attempts;
  t.busy_us += cfg_.steal_cost_us;
  t.stolen_work_us += cfg_.steal_cost_us;
  auto& dq = workers_[*victim].local;
  for (auto it = dq.rbegin(); it != dq.rend(); ++it) {
    if (units_[*it].pinned) continue;
    auto id = *it;
    dq.erase(std::next(it).base());
    ++t.steals_performed;
    return id;
  }
  return std::nullopt;
}

std::optional<uint32_t> BlockScheduler::steal(uint32_t thief) {
  auto& t = workers_.at(thief);
  if (!t.local.empty()) throw BlockError("thief deque is not empty");
  uint64_t when = t.clock_us;
  auto id = take(thief, when, nullptr);
  t.clock_us = when;
  if (id) t.local.push_back(*id);
  return id;
}

BlockRunResult BlockScheduler::run(const BlockPolicySet& policy, MapStore* store) {
  struct Bound {
    const PolicyProgram* prog;
    std::vector<uint32_t> slots;
    std::unique_ptr<LocalMaps> local;
  };
  std::map<std::string, Bound> hooks;
  for (const auto& [name, prog] : policy) {
    if (!prog) continue;
    if (!prog->verified) throw BlockError("unverified program rejected at attach: " + name);
    if (prog->handler_name != name) throw BlockError("program for " + prog->handler_name + " attached to " + name);
    Bound b{prog, {}, nullptr};
    if (store)
      b.slots = bind_maps(*store, *prog);
    else
      b.local = std::make_unique<LocalMaps>(prog->map_refs.size());
    hooks.emplace(name, std::move(b));
  }

  BlockRunResult res;
  RunHookOptions opts;
  auto fire = [&](const char* hook, const WorkerBlock& w, const WorkUnit* u, uint64_t now) -> int64_t {
    auto it = hooks.find(hook);
    if (it == hooks.end()) return 0;
    uint32_t sm = w.id % cfg_.sm_count, warp = w.id / cfg_.sm_count;
    auto ctx = WarpContext::make(hook, sm, warp);
    ctx.uniform_values["worker_id"] = w.id;
    ctx.uniform_values["unit_id"] = u ? u->id : 0;
    ctx.uniform_values["unit_cost_us"] = u ? u->cost_us : 0;
    ctx.uniform_values["local_queue_len"] = w.local.size();
    ctx.uniform_values["steals_performed"] = w.steals_performed;
    ctx.uniform_values["stolen_work_us"] = w.stolen_work_us;
    ctx.uniform_values["time_us"] = now;
    HookResult r;
    if (store) {
      MapView view(*store, it->second.slots, Origin::from_warp(sm, warp));
      r = run_hook(*it->second.prog, ctx, view, cfg_.mode, opts);
    } else {
      r = run_hook(*it->second.prog, ctx, *it->second.local, cfg_.mode, opts);
    }
    ++res.hook_calls[hook];
    res.hook_cost_ns += r.cost_ns;
    return r.decision;
  };

  // A worker's pending event either finishes its running unit or, when idle,
  // picks the next one. Contention can push a running unit's end out, which
  // bumps the worker's generation and orphans the old event.
  struct Run {
    std::optional<uint32_t> unit;
    uint64_t start = 0, end = 0;
    bool stolen = false;
    uint64_t gen = 0;
    uint64_t contention_ns = 0;
  };
  std::vector<Run> running(workers_.size());
  using Ev = std::tuple<uint64_t, uint64_t, uint32_t, uint64_t>;  // time, seq, worker, gen
  std::priority_queue<Ev, std::vector<Ev>, std::greater<>> pq;
  uint64_t seq = 0;
  for (const auto& w : workers_) pq.emplace(w.clock_us, seq++, w.id, 0);
  std::size_t queued = 0;
  for (const auto& w : workers_) queued += w.local.size();
  uint64_t makespan = 0;

  auto start_unit = [&](WorkerBlock& w, uint32_t uid, uint64_t start, bool stolen) {
    auto& u = units_[uid];
    u.state = UnitState::Running;
    fire("enter", w, &u, start);
    fire("probe", w, &u, start);
    auto& r = running[w.id];
    r.unit = uid;
    r.start = start;
    r.end = start + u.cost_us;
    r.stolen = stolen;
    w.busy_us += u.cost_us;
    if (stolen) w.stolen_work_us += u.cost_us;
    pq.emplace(r.end, seq++, w.id, r.gen);
  };
  auto finish_unit = [&](WorkerBlock& w) {
    auto& r = running[w.id];
    auto& u = units_[*r.unit];
    fire("retprobe", w, &u, r.end);
    fire("exit", w, &u, r.end);
    u.state = UnitState::Done;
    ++w.units_run;
    res.timeline.push_back({w.id, static_cast<int64_t>(*r.unit), r.start, r.end, r.stolen});
    w.clock_us = r.end;
    makespan = std::max(makespan, r.end);
    r.unit.reset();
  };
  auto interfere = [&](uint32_t victim, uint64_t at) {
    auto& r = running[victim];
    uint64_t ns = cfg_.steal_cost_us * 10 * cfg_.contention_pct;
    if (!r.unit || at >= r.end || ns == 0) return;
    r.contention_ns += ns;
    uint64_t d = r.contention_ns / 1000;
    if (d == 0) return;
    r.contention_ns %= 1000;
    r.end += d;
    ++r.gen;
    pq.emplace(r.end, seq++, victim, r.gen);
  };

  while (!pq.empty()) {
    auto [t, s, id, gen] = pq.top();
    pq.pop();
    if (gen != running[id].gen) continue;
    auto& w = workers_[id];
    w.clock_us = t;
    if (running[id].unit) finish_unit(w);
    if (!w.local.empty()) {
      auto uid = w.local.front();
      w.local.pop_front();
      --queued;
      start_unit(w, uid, std::max(t, lock_free_[id]), false);
      continue;
    }
    if (queued == 0 || fire("should_try_steal", w, nullptr, t) == 0) continue;  // worker retires
    uint64_t when = t;
    uint32_t victim = 0;
    auto got = take(id, when, &victim);
    interfere(victim, when - cfg_.steal_cost_us);
    if (got) {
      --queued;
      start_unit(w, *got, when, true);
      continue;
    }
    res.timeline.push_back({id, -1, when - cfg_.steal_cost_us, when, false});
    w.clock_us = when;
    makespan = std::max(makespan, when);
    // Free attempts would spin in place; sleep until another worker moves.
    if (when == t) {
      std::optional<uint64_t> next;
      for (uint32_t o = 0; o < workers_.size(); ++o) {
        uint64_t c = running[o].unit ? running[o].end : workers_[o].clock_us;
        if (c > t && (!next || c < *next)) next = c;
      }
      if (next) w.clock_us = *next;
    }
    pq.emplace(w.clock_us, seq++, id, running[id].gen);
  }

  res.makespan_us = makespan;
  for (const auto& w : workers_) {
    res.busy_us.push_back(w.busy_us);
    res.steals.push_back(w.steals_performed);
    res.attempts.push_back(w.steal_attempts);
    res.units_run.push_back(w.units_run);
  }
  return res;
}

}  // namespace gpux
