#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "gpux/assembler.hpp"
#include "gpux/sched_sim.hpp"

using namespace gpux;

namespace {

using Fn = std::function<int64_t(SchedHook, std::span<uint8_t>, SchedKfuncs&)>;

class FnSched : public SchedPolicy {
 public:
  FnSched(std::vector<SchedHook> hooks, Fn fn) : hooks_(std::move(hooks)), fn_(std::move(fn)) {}
  std::string name() const override { return "fn"; }
  std::vector<SchedHook> hooks() const override { return hooks_; }
  int64_t invoke(SchedHook h, std::span<uint8_t> c, SchedKfuncs& k) override { return fn_(h, c, k); }

 private:
  std::vector<SchedHook> hooks_;
  Fn fn_;
};

QueueAttrs attrs(uint64_t ts, uint32_t prio = 50, TenantClass c = TenantClass::BE) {
  QueueAttrs a;
  a.timeslice_us = ts;
  a.priority = prio;
  a.tenant_class = c;
  return a;
}

std::optional<uint64_t> first_time(const std::vector<SchedEvent>& ev, const std::string& kind, int64_t queue) {
  for (const auto& e : ev)
    if (e.kind == kind && e.queue == queue) return e.time_us;
  return std::nullopt;
}

// Round robin over queues that each hold one kernel, all present at t=0,
// no switch cost: returns completion times.
std::vector<uint64_t> round_robin_oracle(std::vector<uint64_t> work, uint64_t slice) {
  std::vector<uint64_t> done(work.size(), 0);
  uint64_t t = 0;
  bool left = true;
  while (left) {
    left = false;
    for (std::size_t i = 0; i < work.size(); ++i) {
      if (work[i] == 0) continue;
      auto run = std::min(work[i], slice);
      t += run;
      work[i] -= run;
      if (work[i] == 0) done[i] = t;
      left = left || work[i] > 0;
    }
  }
  return done;
}

}  // namespace

TEST(QueueCreate, NoPolicyKeepsRequest) {
  SchedSim sim;
  auto r = sim.queue_create(3, attrs(777, 10), 0);
  EXPECT_FALSE(r.rejected);
  EXPECT_EQ(sim.queue(r.queue_id).attrs.timeslice_us, 777u);
  EXPECT_EQ(sim.queue(r.queue_id).attrs.priority, 10u);
  EXPECT_EQ(sim.queue(r.queue_id).state, QueueState::Active);
  EXPECT_THROW(sim.queue_create(0, attrs(0), 0), SchedError);
}

TEST(QueueCreate, ClassTimeslices) {
  MapStore store;
  auto pol = std::make_shared<BytecodeSchedPolicy>("ts", store);
  pol->add(assemble(
      ".hook task_init\n"
      "ldxdw r6, [ctx.tenant_class]\n"
      "mov r1, 1\n"
      "mov r2, 200\n"
      "jne r6, 0, set\n"
      "mov r2, 1000000\n"
      "set:\n"
      "call bpf_gpu_set_attr\n"
      "mov r0, 0\n"
      "exit\n"));
  SchedSim sim;
  sim.attach(pol);
  auto lc = sim.queue_create(0, attrs(5000, 50, TenantClass::LC), 0);
  auto be = sim.queue_create(1, attrs(5000, 50, TenantClass::BE), 0);
  EXPECT_EQ(sim.queue(lc.queue_id).attrs.timeslice_us, 1000000u);
  EXPECT_EQ(sim.queue(be.queue_id).attrs.timeslice_us, 200u);
}

TEST(QueueCreate, QuotaRejectsFifth) {
  MapStore store;
  auto pol = std::make_shared<BytecodeSchedPolicy>("quota", store);
  pol->add(assemble(
      ".hook task_init\n"
      ".map qcount host\n"
      "ldxdw r6, [ctx.tenant]\n"
      "mov r1, %qcount\n"
      "mov r2, r6\n"
      "call map_lookup\n"
      "jlt r0, 4, ok\n"
      "call bpf_gpu_reject_bind\n"
      "stdw [ctx.decision], 1000\n"
      "mov r0, -1\n"
      "exit\n"
      "ok:\n"
      "mov r1, %qcount\n"
      "mov r2, r6\n"
      "mov r3, 1\n"
      "call map_update\n"
      "mov r0, 0\n"
      "exit\n"));
  SchedSim sim;
  sim.attach(pol);
  std::mt19937_64 rng(3);
  std::map<uint32_t, int> oracle;
  for (int i = 0; i < 40; ++i) {
    auto tenant = static_cast<uint32_t>(rng() % 5);
    auto r = sim.queue_create(tenant, attrs(100), static_cast<uint64_t>(i));
    bool expect_reject = oracle[tenant] >= 4;
    if (!expect_reject) ++oracle[tenant];
    EXPECT_EQ(r.rejected, expect_reject);
    if (r.rejected) {
      EXPECT_EQ(r.retry_after_us, 1000u);
      EXPECT_EQ(sim.queue(r.queue_id).state, QueueState::Rejected);
      EXPECT_THROW(sim.submit(r.queue_id, 10, 0), SchedError);
    }
  }
}

TEST(QueueCreate, FaultyHandlerAccepts) {
  SchedSim sim;
  sim.attach(std::make_shared<FnSched>(std::vector{SchedHook::TaskInit},
                                       [](SchedHook, std::span<uint8_t>, SchedKfuncs& k) -> int64_t {
                                         k.set_attr(1, 5);
                                         k.set_attr(7, 1);
                                         return 0;
                                       }));
  auto r = sim.queue_create(0, attrs(100), 0);
  EXPECT_FALSE(r.rejected);
  EXPECT_EQ(sim.queue(r.queue_id).attrs.timeslice_us, 100u);
  EXPECT_EQ(sim.violations(), 1u);
}

TEST(QueueDestroy, PendingAndTwice) {
  SchedSim sim;
  std::vector<uint64_t> seen;
  sim.attach(std::make_shared<FnSched>(std::vector{SchedHook::TaskDestroy},
                                       [&](SchedHook, std::span<uint8_t> c, SchedKfuncs&) -> int64_t {
                                         seen.push_back(from_bytes<SchedQueueCtx>(c).pending);
                                         return 0;
                                       }));
  auto a = sim.queue_create(0, attrs(100), 0).queue_id;
  auto b = sim.queue_create(0, attrs(100), 0).queue_id;
  for (int i = 0; i < 3; ++i) sim.submit(b, 50, 0);
  sim.queue_destroy(a, 0);
  sim.queue_destroy(b, 0);
  EXPECT_EQ(seen, (std::vector<uint64_t>{0, 3}));
  EXPECT_EQ(sim.queue(b).cancelled, 3u);
  EXPECT_THROW(sim.queue_destroy(a, 1), SchedError);
  EXPECT_THROW(sim.queue_destroy(99, 1), SchedError);
}

TEST(Advance, SingleKernel) {
  SchedSim sim;
  auto q = sim.queue_create(0, attrs(200), 0).queue_id;
  auto l = sim.submit(q, 100, 0);
  auto ev = sim.advance(500);
  EXPECT_EQ(first_time(ev, "COMPLETE", q), 100u);
  EXPECT_EQ(sim.launches()[l].end_us, 100u);
  EXPECT_THROW(sim.advance(0), SchedError);
}

TEST(Advance, RoundRobinMatchesOracle) {
  SchedSim sim;
  auto a = sim.queue_create(0, attrs(50), 0).queue_id;
  auto b = sim.queue_create(1, attrs(50), 0).queue_id;
  auto la = sim.submit(a, 100, 0);
  auto lb = sim.submit(b, 100, 0);
  sim.advance(1000);
  auto want = round_robin_oracle({100, 100}, 50);
  EXPECT_EQ(sim.launches()[la].end_us, want[0]);
  EXPECT_EQ(sim.launches()[lb].end_us, want[1]);
  EXPECT_LE(want[1], 200u);

  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    SchedSim s;
    uint64_t slice = 1 + rng() % 40;
    std::vector<uint64_t> work;
    for (int i = 0; i < 2 + static_cast<int>(rng() % 4); ++i) {
      work.push_back(1 + rng() % 200);
      s.submit(s.queue_create(0, attrs(slice), 0).queue_id, work.back(), 0);
    }
    s.run_to_completion();
    auto oracle = round_robin_oracle(work, slice);
    for (std::size_t i = 0; i < work.size(); ++i) ASSERT_EQ(s.launches()[i].end_us, oracle[i]);
  }
}

TEST(Advance, InterleaveFrequencyShares) {
  SchedSim sim;
  sim.queue_create(0, attrs(10), 0);
  QueueAttrs twice = attrs(10);
  twice.interleave_freq = 2;
  sim.queue_create(0, twice, 0);
  sim.submit(0, 10000, 0);
  sim.submit(1, 10000, 0);
  sim.advance(3000);
  uint64_t ran_a = 10000 - sim.launches()[0].work_us, ran_b = 10000 - sim.launches()[1].work_us;
  EXPECT_EQ(ran_a, 1000u);
  EXPECT_EQ(ran_b, 2000u);
}

TEST(Advance, TimesliceSplitsLcLatency) {
  // LC queue with short periodic kernels against two BE queues of long ones.
  auto run = [](uint64_t lc_slice, uint64_t be_slice) {
    SchedSim sim;
    auto lc = sim.queue_create(0, attrs(lc_slice, 50, TenantClass::LC), 0).queue_id;
    auto b1 = sim.queue_create(1, attrs(be_slice), 0).queue_id;
    auto b2 = sim.queue_create(2, attrs(be_slice), 0).queue_id;
    for (int i = 0; i < 20; ++i) {
      sim.submit(b1, 5000, 0);
      sim.submit(b2, 5000, 0);
    }
    for (int i = 0; i < 50; ++i) sim.submit(lc, 100, 137 + 3000 * static_cast<uint64_t>(i));
    sim.run_to_completion();
    return summarize(sim.latencies(TenantClass::LC)).p99_us;
  };
  EXPECT_LT(run(2000, 200), run(2000, 2000));
}

TEST(Preempt, IdleQueueIsNoop) {
  SchedSim sim;
  auto q = sim.queue_create(0, attrs(100), 0).queue_id;
  sim.kfunc_preempt(q, 0);
  ASSERT_FALSE(sim.events().empty());
  EXPECT_EQ(sim.events().back().kind, "PREEMPT_NOOP");
  EXPECT_THROW(sim.kfunc_preempt(42, 0), SchedError);
}

TEST(Preempt, LcStartsWithinTickPlusSwitch) {
  SchedConfig cfg;
  SchedSim sim(cfg);
  auto lc = sim.queue_create(0, attrs(1000, 50, TenantClass::LC), 0).queue_id;
  auto be = sim.queue_create(1, attrs(100000), 0).queue_id;
  sim.submit(be, 50000, 0);
  sim.advance(33);
  ASSERT_EQ(sim.running(), be);
  sim.submit(lc, 100, 33);
  sim.kfunc_preempt(be, 33);
  auto ev = sim.advance(100);
  auto start = first_time(ev, "START", lc);
  ASSERT_TRUE(start);
  EXPECT_LE(*start, 33 + cfg.tick_us + cfg.switch_cost_us);
  EXPECT_EQ(first_time(ev, "PREEMPT", be), 40u);
}

TEST(Preempt, EveryTickStarves) {
  SchedConfig cfg;
  cfg.switch_cost_us = cfg.tick_us;
  SchedSim sim(cfg);
  auto be = sim.queue_create(0, attrs(1000), 0).queue_id;
  sim.submit(be, 100, 0);
  for (uint64_t t = 0; t < 1000; t += cfg.tick_us) {
    sim.kfunc_preempt(be, t);
    sim.advance(cfg.tick_us);
  }
  EXPECT_EQ(sim.launches()[0].work_us, 100u);
}

TEST(Property, WorkConservingMakespan) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    SchedSim sim;
    int nq = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < nq; ++i) {
      auto a = attrs(1 + rng() % 300, static_cast<uint32_t>(rng() % 101));
      a.interleave_freq = 1 + static_cast<uint32_t>(rng() % 3);
      sim.queue_create(0, a, 0);
    }
    std::vector<std::pair<uint64_t, uint64_t>> arrivals;
    std::vector<uint64_t> last(static_cast<std::size_t>(nq), 0);
    for (int i = 0; i < 30; ++i) {
      auto qi = static_cast<std::size_t>(rng() % static_cast<uint64_t>(nq));
      last[qi] += rng() % 400;
      auto w = 1 + rng() % 250;
      sim.submit(static_cast<uint32_t>(qi), w, last[qi]);
      arrivals.emplace_back(last[qi], w);
    }
    sim.run_to_completion();
    std::sort(arrivals.begin(), arrivals.end());
    uint64_t t = 0;
    for (auto [at, w] : arrivals) t = std::max(t, at) + w;
    uint64_t end = 0;
    for (const auto& l : sim.launches()) {
      ASSERT_TRUE(l.end_us);
      ASSERT_GE(*l.start_us, l.submit_us);
      end = std::max(end, *l.end_us);
    }
    ASSERT_EQ(end, t);
  }
}

TEST(Property, PriorityDominance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    SchedSim sim;
    // Creation order alternates so queue ids never decide.
    uint32_t hi = 0, lo = 0;
    if (trial % 2) {
      lo = sim.queue_create(1, attrs(100, 60), 0).queue_id;
      hi = sim.queue_create(0, attrs(100, 10), 0).queue_id;
    } else {
      hi = sim.queue_create(0, attrs(100, 10), 0).queue_id;
      lo = sim.queue_create(1, attrs(100, 60), 0).queue_id;
    }
    uint64_t t = 0;
    for (int i = 0; i < 20; ++i) {
      t += rng() % 300;
      auto w = 1 + rng() % 200;
      sim.submit(hi, w, t);
      sim.submit(lo, w, t);
    }
    sim.run_to_completion();
    EXPECT_LE(summarize(sim.latencies(hi)).mean_us, summarize(sim.latencies(lo)).mean_us);
  }
}

TEST(Property, AttributesFromInitGovernFirstRound) {
  SchedSim sim;
  sim.attach(std::make_shared<FnSched>(std::vector{SchedHook::TaskInit},
                                       [](SchedHook, std::span<uint8_t>, SchedKfuncs& k) -> int64_t {
                                         k.set_attr(static_cast<uint64_t>(QueueAttr::TimesliceUs), 37);
                                         return 0;
                                       }));
  auto q = sim.queue_create(0, attrs(1000), 0).queue_id;
  sim.queue_create(1, attrs(1000), 0);
  sim.submit(q, 500, 0);
  sim.submit(1, 500, 0);
  auto ev = sim.advance(100);
  EXPECT_EQ(first_time(ev, "SLICE_END", q), 37u);
}

TEST(Property, DeterministicLog) {
  auto run = [] {
    std::mt19937_64 rng(77);
    SchedSim sim;
    for (int i = 0; i < 3; ++i) sim.queue_create(0, attrs(1 + rng() % 100, static_cast<uint32_t>(rng() % 100)), 0);
    for (int i = 0; i < 40; ++i) sim.submit(static_cast<uint32_t>(i % 3), 1 + rng() % 100, static_cast<uint64_t>(i) * 20);
    sim.run_to_completion();
    return sim.events();
  };
  EXPECT_EQ(run(), run());
}
