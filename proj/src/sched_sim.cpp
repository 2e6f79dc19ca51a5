#include "gpux/sched_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gpux {

std::string_view to_string(TenantClass c) { return c == TenantClass::LC ? "LC" : "BE"; }

TenantClass parse_tenant_class(std::string_view s) {
  if (s == "LC" || s == "lc") return TenantClass::LC;
  if (s == "BE" || s == "be") return TenantClass::BE;
  throw SchedError("unknown tenant class " + std::string(s));
}

std::string_view to_string(QueueState s) {
  switch (s) {
    case QueueState::Active: return "ACTIVE";
    case QueueState::Rejected: return "REJECTED";
    case QueueState::Destroyed: return "DESTROYED";
  }
  return "?";
}

namespace {

std::optional<SchedHook> sched_hook(std::string_view name) {
  if (name == "task_init") return SchedHook::TaskInit;
  if (name == "task_destroy") return SchedHook::TaskDestroy;
  return std::nullopt;
}

}  // namespace

void BytecodeSchedPolicy::add(PolicyProgram prog, const HookBudget* budget) {
  auto h = sched_hook(prog.handler_name);
  if (!h) throw SchedError("not a sched hook: " + prog.handler_name);
  if (progs_.count(*h)) throw SchedError("hook " + prog.handler_name + " already has a handler");
  progs_.emplace(*h, load_program(store_, std::move(prog), budget));
}

std::vector<SchedHook> BytecodeSchedPolicy::hooks() const {
  std::vector<SchedHook> out;
  for (const auto& [h, p] : progs_) out.push_back(h);
  return out;
}

int64_t BytecodeSchedPolicy::invoke(SchedHook h, std::span<uint8_t> ctx, SchedKfuncs& k) {
  auto it = progs_.find(h);
  if (it == progs_.end()) return 0;
  auto kf = [&k](HelperId id, std::span<const uint64_t, 5> a) -> uint64_t {
    switch (id) {
      case HelperId::SetAttr: k.set_attr(a[0], a[1]); return 0;
      case HelperId::RejectBind: k.reject_bind(); return 0;
      case HelperId::SchedPreempt: k.preempt(static_cast<uint32_t>(a[0])); return 0;
      default: return 0;
    }
  };
  return run_host(it->second, ctx, store_, kf).return_value;
}

LatencySummary summarize(std::vector<uint64_t> s) {
  LatencySummary out;
  out.count = s.size();
  if (s.empty()) return out;
  std::sort(s.begin(), s.end());
  out.mean_us = static_cast<double>(std::accumulate(s.begin(), s.end(), uint64_t{0})) / static_cast<double>(s.size());
  auto rank = [&](double p) {
    auto idx = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(s.size())));
    return s[std::clamp<std::size_t>(idx, 1, s.size()) - 1];
  };
  out.p50_us = rank(50);
  out.p90_us = rank(90);
  out.p99_us = rank(99);
  return out;
}

class SchedSim::Scope : public SchedKfuncs {
 public:
  Scope(SchedSim& sim, QueueDescriptor& target, uint64_t time) : sim_(sim), target_(target), time_(time) {}

  void set_attr(uint64_t kind, uint64_t value) override {
    auto& a = target_.attrs;
    switch (static_cast<QueueAttr>(kind)) {
      case QueueAttr::Priority:
        if (value > 100) throw SchedError("priority out of range");
        a.priority = static_cast<uint32_t>(value);
        return;
      case QueueAttr::TimesliceUs:
        if (value == 0) throw SchedError("timeslice must be positive");
        a.timeslice_us = value;
        return;
      case QueueAttr::InterleaveFreq:
        if (value == 0 || value > 64) throw SchedError("interleave frequency out of range");
        a.interleave_freq = static_cast<uint32_t>(value);
        return;
    }
    throw SchedError("unknown queue attribute " + std::to_string(kind));
  }
  void reject_bind() override { rejected = true; }
  void preempt(uint32_t queue) override { sim_.kfunc_preempt(queue, time_); }
  const SchedSim& sim() const override { return sim_; }

  bool rejected = false;

 private:
  SchedSim& sim_;
  QueueDescriptor& target_;
  uint64_t time_;
};

SchedSim::SchedSim(SchedConfig cfg) : cfg_(cfg) {
  if (cfg_.tick_us == 0) throw SchedError("engine tick must be positive");
}

void SchedSim::attach(std::shared_ptr<SchedPolicy> p) {
  for (auto h : p->hooks())
    if (slots_.count(h)) throw SchedError("sched hook already claimed by " + slots_[h]->name());
  for (auto h : p->hooks()) slots_[h] = p;
}

QueueDescriptor& SchedSim::q(uint32_t id) {
  if (id >= queues_.size()) throw SchedError("unknown queue " + std::to_string(id));
  return queues_[id];
}

const QueueDescriptor& SchedSim::queue(uint32_t id) const {
  if (id >= queues_.size()) throw SchedError("unknown queue " + std::to_string(id));
  return queues_[id];
}

void SchedSim::log(uint64_t t, const char* kind, int64_t queue, int64_t launch) {
  events_.push_back({t, kind, queue, launch});
}

int64_t SchedSim::invoke(SchedHook h, SchedQueueCtx& ctx, QueueDescriptor& target, bool& rejected) {
  auto it = slots_.find(h);
  if (it == slots_.end()) return 0;
  auto saved = target.attrs;
  auto bytes = to_bytes(ctx);
  Scope scope(*this, target, ctx.time_us);
  try {
    int64_t ret = it->second->invoke(h, bytes, scope);
    ctx = from_bytes<SchedQueueCtx>(bytes);
    rejected = scope.rejected || ret < 0;
    return ret;
  } catch (const std::exception&) {
    // Aborted handler: requested attributes stand, queue accepted.
    target.attrs = saved;
    ++violations_;
    log(ctx.time_us, "VIOLATION", target.id);
    rejected = false;
    return 0;
  }
}

CreateResult SchedSim::queue_create(uint32_t tenant, QueueAttrs requested, uint64_t time_us) {
  if (requested.timeslice_us == 0 || requested.interleave_freq == 0 || requested.priority > 100)
    throw SchedError("invalid queue attributes");
  QueueDescriptor d;
  d.id = static_cast<uint32_t>(queues_.size());
  d.tenant = tenant;
  d.attrs = requested;
  queues_.push_back(d);
  auto& nq = queues_.back();
  SchedQueueCtx ctx{nq.id, tenant, static_cast<uint64_t>(requested.tenant_class), requested.priority,
                    requested.timeslice_us, requested.interleave_freq, 0, time_us, 0};
  bool rejected = false;
  invoke(SchedHook::TaskInit, ctx, nq, rejected);
  CreateResult r{nq.id, rejected, 0};
  if (rejected) {
    nq.state = QueueState::Rejected;
    r.retry_after_us = ctx.decision;
    log(time_us, "REJECT", nq.id);
  } else {
    log(time_us, "CREATE", nq.id);
  }
  return r;
}

void SchedSim::queue_destroy(uint32_t id, uint64_t time_us) {
  auto& d = q(id);
  if (d.state == QueueState::Destroyed) throw SchedError("queue " + std::to_string(id) + " already destroyed");
  SchedQueueCtx ctx{d.id, d.tenant, static_cast<uint64_t>(d.attrs.tenant_class), d.attrs.priority,
                    d.attrs.timeslice_us, d.attrs.interleave_freq, d.pending.size(), time_us, 0};
  bool ignored = false;
  invoke(SchedHook::TaskDestroy, ctx, d, ignored);
  for (auto l : d.pending) log(time_us, "CANCEL", id, static_cast<int64_t>(l));
  d.cancelled += d.pending.size();
  d.pending.clear();
  d.state = QueueState::Destroyed;
  preempt_requests_.erase(id);
  if (cur_ == id) {
    cur_.reset();
    preempt_at_.reset();
  }
  log(time_us, "DESTROY", id);
}

uint64_t SchedSim::submit(uint32_t queue, uint64_t work_us, uint64_t time_us) {
  auto& d = q(queue);
  if (d.state != QueueState::Active) throw SchedError("queue " + std::to_string(queue) + " accepts no launches");
  if (work_us == 0) throw SchedError("launch needs work");
  if (!d.pending.empty() && launches_[d.pending.back()].submit_us > time_us)
    throw SchedError("launches must be submitted in time order per queue");
  KernelLaunch l;
  l.id = launches_.size();
  l.queue = queue;
  l.submit_us = time_us;
  l.work_us = l.total_us = work_us;
  l.tenant_class = d.attrs.tenant_class;
  launches_.push_back(l);
  d.pending.push_back(l.id);
  if (slots_.count(SchedHook::LaunchArrival)) {
    if (time_us <= now_)
      announce(l.id);
    else
      unannounced_.emplace(time_us, l.id);
  }
  return l.id;
}

void SchedSim::announce(uint64_t launch) {
  const auto& l = launches_[launch];
  auto& d = queues_[l.queue];
  if (d.state != QueueState::Active) return;
  SchedQueueCtx ctx{d.id, d.tenant, static_cast<uint64_t>(d.attrs.tenant_class), d.attrs.priority,
                    d.attrs.timeslice_us, d.attrs.interleave_freq, d.pending.size(), std::max(now_, l.submit_us), 0};
  bool ignored = false;
  invoke(SchedHook::LaunchArrival, ctx, d, ignored);
}

void SchedSim::announce_due() {
  while (!unannounced_.empty() && unannounced_.top().first <= now_) {
    auto id = unannounced_.top().second;
    unannounced_.pop();
    announce(id);
  }
}

void SchedSim::kfunc_preempt(uint32_t queue, uint64_t time_us) {
  auto& d = q(queue);
  if (cur_ == queue) {
    uint64_t at = next_tick(std::max(time_us, now_));
    if (!preempt_at_ || at < *preempt_at_) preempt_at_ = at;
    return;
  }
  if (d.state != QueueState::Active || d.pending.empty()) {
    log(time_us, "PREEMPT_NOOP", queue);
    return;
  }
  // Waiting queue: the slice it gets next is forfeited at its first tick.
  preempt_requests_.insert(queue);
}

uint64_t SchedSim::next_tick(uint64_t t) const { return (t + cfg_.tick_us - 1) / cfg_.tick_us * cfg_.tick_us; }

bool SchedSim::available(const QueueDescriptor& d) const {
  return d.state == QueueState::Active && !d.pending.empty() && launches_[d.pending.front()].submit_us <= now_;
}

bool SchedSim::any_available() const {
  return std::any_of(queues_.begin(), queues_.end(), [&](const auto& d) { return available(d); });
}

std::optional<uint64_t> SchedSim::next_arrival() const {
  std::optional<uint64_t> t;
  for (const auto& d : queues_)
    if (d.state == QueueState::Active && !d.pending.empty()) {
      auto s = launches_[d.pending.front()].submit_us;
      if (!t || s < *t) t = s;
    }
  return t;
}

void SchedSim::build_round() {
  std::vector<const QueueDescriptor*> active;
  for (const auto& d : queues_)
    if (d.state == QueueState::Active) active.push_back(&d);
  std::stable_sort(active.begin(), active.end(), [](auto* a, auto* b) {
    return std::pair(a->attrs.priority, a->id) < std::pair(b->attrs.priority, b->id);
  });
  uint32_t reps = 0;
  for (auto* d : active) reps = std::max(reps, d->attrs.interleave_freq);
  round_.clear();
  for (uint32_t r = 0; r < reps; ++r)
    for (auto* d : active)
      if (r < d->attrs.interleave_freq) round_.push_back(d->id);
  round_pos_ = 0;
}

bool SchedSim::pick() {
  if (!any_available()) return false;
  // At most one rebuild: the fresh round lists every active queue.
  for (int pass = 0; pass < 2; ++pass) {
    while (round_pos_ < round_.size()) {
      auto id = round_[round_pos_++];
      if (available(queues_[id])) {
        cur_ = id;
        slice_left_ = queues_[id].attrs.timeslice_us;
        if (preempt_requests_.erase(id)) preempt_at_ = next_tick(now_);
        return true;
      }
    }
    build_round();
  }
  return false;
}

void SchedSim::run_until(uint64_t target) {
  while (now_ < target) {
    announce_due();
    if (switching_until_ > now_) {
      uint64_t until = std::min(target, switching_until_);
      if (!unannounced_.empty()) until = std::min(until, unannounced_.top().first);
      now_ = until;
      continue;
    }
    if (!cur_ && !pick()) {
      // Idle engine: the next busy period starts a fresh round.
      round_pos_ = round_.size();
      auto next = next_arrival();
      now_ = (next && *next > now_) ? std::min(target, *next) : target;
      continue;
    }
    auto& d = queues_[*cur_];
    auto& l = launches_[d.pending.front()];
    if (!l.start_us) {
      l.start_us = now_;
      log(now_, "START", d.id, static_cast<int64_t>(l.id));
    }
    uint64_t step = std::min({slice_left_, l.work_us, target - now_});
    if (preempt_at_ && *preempt_at_ > now_) step = std::min(step, *preempt_at_ - now_);
    if (preempt_at_ && *preempt_at_ <= now_) step = 0;
    if (!unannounced_.empty() && unannounced_.top().first > now_)
      step = std::min(step, unannounced_.top().first - now_);
    now_ += step;
    l.work_us -= step;
    slice_left_ -= step;
    busy_us_ += step;
    if (l.work_us == 0) {
      l.end_us = now_;
      d.pending.pop_front();
      log(now_, "COMPLETE", d.id, static_cast<int64_t>(l.id));
    }
    if (preempt_at_ && now_ >= *preempt_at_) {
      log(now_, "PREEMPT", d.id);
      preempt_at_.reset();
      switching_until_ = now_ + cfg_.switch_cost_us;
      cur_.reset();
      continue;
    }
    bool outranked = l.work_us == 0 && std::any_of(queues_.begin(), queues_.end(), [&](const auto& o) {
      return available(o) && o.attrs.priority < d.attrs.priority;
    });
    if (slice_left_ == 0 || outranked) {
      log(now_, "SLICE_END", d.id);
      cur_.reset();
      preempt_at_.reset();
      // A waiting higher-priority queue opens a new round at the kernel boundary.
      if (outranked) round_pos_ = round_.size();
    } else if (!available(d)) {
      cur_.reset();
      preempt_at_.reset();
    }
  }
}

std::vector<SchedEvent> SchedSim::advance(uint64_t dt_us) {
  if (dt_us == 0) throw SchedError("advance needs dt > 0");
  auto first = events_.size();
  run_until(now_ + dt_us);
  return {events_.begin() + static_cast<std::ptrdiff_t>(first), events_.end()};
}

std::vector<SchedEvent> SchedSim::run_to_completion() {
  auto first = events_.size();
  while (next_arrival()) {
    auto next = *next_arrival();
    uint64_t remaining = 0;
    for (const auto& d : queues_)
      if (d.state == QueueState::Active)
        for (auto l : d.pending) remaining += launches_[l].work_us;
    run_until(std::max(now_, next) + remaining + cfg_.switch_cost_us + 1);
  }
  return {events_.begin() + static_cast<std::ptrdiff_t>(first), events_.end()};
}

std::vector<uint64_t> SchedSim::latencies(uint32_t queue) const {
  std::vector<uint64_t> out;
  for (const auto& l : launches_)
    if (l.queue == queue && l.start_us) out.push_back(*l.start_us - l.submit_us);
  return out;
}

std::vector<uint64_t> SchedSim::latencies(TenantClass c) const {
  std::vector<uint64_t> out;
  for (const auto& l : launches_)
    if (l.tenant_class == c && l.start_us) out.push_back(*l.start_us - l.submit_us);
  return out;
}

}  // namespace gpux
