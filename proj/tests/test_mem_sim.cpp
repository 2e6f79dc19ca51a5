#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "gpux/assembler.hpp"
#include "gpux/mem_sim.hpp"

using namespace gpux;

namespace {

using Fn = std::function<uint64_t(MemHook, std::span<uint8_t>, MemKfuncs&)>;

class FnPolicy : public MemPolicy {
 public:
  FnPolicy(std::vector<MemHook> hooks, Fn fn) : hooks_(std::move(hooks)), fn_(std::move(fn)) {}
  std::string name() const override { return "fn"; }
  std::vector<MemHook> hooks() const override { return hooks_; }
  uint64_t invoke(MemHook h, std::span<uint8_t> ctx, MemKfuncs& k) override { return fn_(h, ctx, k); }

 private:
  std::vector<MemHook> hooks_;
  Fn fn_;
};

MemConfig small(uint64_t regions) {
  MemConfig c;
  c.capacity_bytes = regions * kRegionSize;
  return c;
}

// Makes a region fully resident.
void fill(MemorySim& sim, uint32_t region, uint64_t t = 0) {
  std::vector<uint64_t> pages;
  for (uint64_t i = 0; i < kPagesPerRegion; ++i) pages.push_back(region * kPagesPerRegion + i);
  for (std::size_t i = 0; i < pages.size(); i += 64)
    sim.prefetch(std::span(pages).subspan(i, 64), 0, t);
}

}  // namespace

TEST(EvictionList, Operations) {
  EvictionList l;
  l.push_tail(1);
  l.push_tail(2);
  l.push_tail(3);
  l.move_head(3);
  EXPECT_EQ(l.order(), (std::vector<uint32_t>{3, 1, 2}));
  l.move_tail(3);
  l.remove(1);
  EXPECT_EQ(l.order(), (std::vector<uint32_t>{2, 3}));
  EXPECT_THROW(l.push_tail(2), MemError);
  EXPECT_THROW(l.move_head(9), MemError);
}

TEST(Activate, EmptyDevice) {
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  sim.activate(0, 0, 0);
  EXPECT_EQ(sim.list().order(), (std::vector<uint32_t>{0}));
  EXPECT_EQ(sim.resident_bytes(), kPageSize);
  EXPECT_THROW(sim.activate(0, 0, 0), MemError);
}

TEST(Activate, AtCapacityEvictsFifoVictim) {
  MemorySim sim(small(2));
  sim.allocate(0, 3 * kRegionSize);
  fill(sim, 0);
  fill(sim, 1);
  sim.activate(2, 0, 10);
  EXPECT_EQ(sim.list().order(), (std::vector<uint32_t>{1, 2}));
  sim.check_invariants();
}

TEST(Evict, FifoWithoutPolicy) {
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  for (uint32_t r = 0; r < 3; ++r) fill(sim, r);
  EXPECT_EQ(sim.evict(kRegionSize, 5), (std::vector<uint32_t>{0}));
  EXPECT_EQ(sim.list().order(), (std::vector<uint32_t>{1, 2}));
}

TEST(Evict, MoveHeadPicksVictim) {
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  for (uint32_t r = 0; r < 3; ++r) fill(sim, r);
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::EvictPrepare},
                                        [](MemHook, std::span<uint8_t> c, MemKfuncs& k) -> uint64_t {
                                          auto ctx = from_bytes<MemEvictCtx>(c);
                                          if (ctx.region_id == 2) k.move_head(2);
                                          return 2;
                                        }));
  EXPECT_EQ(sim.evict(kRegionSize, 5), (std::vector<uint32_t>{2}));
  EXPECT_EQ(sim.hook_invocations(), 3u);
}

TEST(Evict, CountsSeenByPolicy) {
  // Least-frequently-used choice over counts A=9, B=1, C=5.
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  for (uint32_t r = 0; r < 3; ++r) fill(sim, r);
  for (int i = 0; i < 9; ++i) sim.access(0, 0, 100);
  sim.access(kRegionSize, 0, 100);
  for (int i = 0; i < 5; ++i) sim.access(2 * kRegionSize, 0, 100);
  uint64_t best = 0, best_count = 0;
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::EvictPrepare},
                                        [&](MemHook, std::span<uint8_t> c, MemKfuncs& k) -> uint64_t {
                                          auto ctx = from_bytes<MemEvictCtx>(c);
                                          if (ctx.position == 0 || ctx.access_count < best_count) {
                                            if (ctx.position != 0) k.move_head(static_cast<uint32_t>(ctx.region_id));
                                            best = ctx.region_id;
                                            best_count = ctx.access_count;
                                          }
                                          return 0;
                                        }));
  EXPECT_EQ(sim.evict(kRegionSize, 200), (std::vector<uint32_t>{1}));
  EXPECT_EQ(best, 1u);
}

TEST(Evict, BudgetOverrunFallsBackToFifo) {
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  for (uint32_t r = 0; r < 3; ++r) fill(sim, r);
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::EvictPrepare},
                                        [](MemHook, std::span<uint8_t> c, MemKfuncs& k) -> uint64_t {
                                          if (from_bytes<MemEvictCtx>(c).region_id == 2) {
                                            k.move_head(2);
                                            throw BudgetExceeded("instruction budget");
                                          }
                                          return 0;
                                        }));
  EXPECT_EQ(sim.evict(kRegionSize, 5), (std::vector<uint32_t>{0}));
  EXPECT_EQ(sim.violations(), 1u);
  EXPECT_EQ(sim.budget_violations(), 1u);
}

TEST(Kfunc, OutsideHandlerIsViolation) {
  MemorySim sim(small(2));
  sim.allocate(0, kRegionSize);
  sim.activate(0, 0, 0);
  EXPECT_THROW(sim.kfunc_move_head(0), PolicyViolation);
  EXPECT_EQ(sim.violations(), 1u);
}

TEST(Kfunc, UnlistedRegionAbortsHandler) {
  MemorySim sim(small(2));
  sim.allocate(0, 2 * kRegionSize);
  fill(sim, 0);
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::EvictPrepare},
                                        [](MemHook, std::span<uint8_t>, MemKfuncs& k) -> uint64_t {
                                          k.move_head(1);
                                          return 0;
                                        }));
  EXPECT_EQ(sim.evict(kPageSize, 0), (std::vector<uint32_t>{0}));
  EXPECT_EQ(sim.violations(), 1u);
}

TEST(Prefetch, ByteCounts) {
  MemorySim sim(small(3));
  sim.allocate(0, kRegionSize);
  std::vector<uint64_t> sixteen;
  for (uint64_t p = 0; p < 16; ++p) sixteen.push_back(p);
  EXPECT_EQ(sim.prefetch(sixteen, 0, 0), 65536u);
  // Pages 13..20: 13, 14 and 15 are already resident.
  std::vector<uint64_t> overlap;
  for (uint64_t p = 13; p < 21; ++p) overlap.push_back(p);
  EXPECT_EQ(sim.prefetch(overlap, 0, 0), 20480u);
}

TEST(Prefetch, RequestsAreCapped) {
  MemorySim sim(small(3));
  sim.allocate(0, kRegionSize);
  std::vector<uint64_t> many;
  for (uint64_t p = 0; p < 100; ++p) many.push_back(p);
  EXPECT_EQ(sim.prefetch(many, 0, 0), 64u * kPageSize);

  MemorySim sim2(small(3));
  sim2.allocate(0, kRegionSize);
  sim2.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Prefetch},
                                         [](MemHook, std::span<uint8_t> c, MemKfuncs& k) -> uint64_t {
                                           k.prefetch_pages(from_bytes<MemPrefetchCtx>(c).page + 1, 100);
                                           return 0;
                                         }));
  auto out = sim2.access(0, 0, 0);
  EXPECT_EQ(out.kind, AccessKind::MajorFault);
  EXPECT_EQ(out.migrated_bytes, 65u * kPageSize);
  EXPECT_EQ(sim2.tenants().at(0).prefetched_pages, 64u);
}

TEST(Prefetch, OnlyInsidePrefetchHandler) {
  MemorySim sim(small(3));
  sim.allocate(0, kRegionSize);
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Activate},
                                        [](MemHook, std::span<uint8_t>, MemKfuncs& k) -> uint64_t {
                                          k.prefetch_pages(5, 1);
                                          return 0;
                                        }));
  sim.access(0, 0, 0);
  EXPECT_EQ(sim.violations(), 1u);
  EXPECT_FALSE(sim.page_resident(5));
}

TEST(Prefetch, DeviceRequestExpandsOnHost) {
  MemorySim sim(small(3));
  sim.allocate(0, 8 * kRegionSize);
  EXPECT_EQ(sim.device_prefetch(5, 0), 32u * kPageSize);

  MemorySim sim2(small(3));
  sim2.allocate(0, 8 * kRegionSize);
  sim2.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Prefetch},
                                         [](MemHook, std::span<uint8_t> c, MemKfuncs& k) -> uint64_t {
                                           auto ctx = from_bytes<MemPrefetchCtx>(c);
                                           EXPECT_EQ(ctx.source, 1u);
                                           k.prefetch_pages(ctx.page, 32);
                                           return 1;
                                         }));
  EXPECT_EQ(sim2.device_prefetch(5, 0), 32u * kPageSize);
  const auto& ev = sim2.events();
  ASSERT_GE(ev.size(), 2u);
  EXPECT_EQ(ev[0].kind, "PREFETCH");
  EXPECT_EQ(ev[1].kind, "HOOK");
  EXPECT_EQ(ev[1].outcome, "gpu_prefetch");
  EXPECT_TRUE(sim2.page_resident(5 * kPagesPerRegion + 31));
}

TEST(Access, HitFaultKindsAndLatency) {
  MemorySim sim(small(3));
  sim.allocate(0, kRegionSize);
  auto a = sim.access(0, 0, 0);
  EXPECT_EQ(a.kind, AccessKind::MajorFault);
  EXPECT_EQ(a.latency_ns, 3000u + 4096u / 16u + 200u);
  auto b = sim.access(kPageSize, 0, a.latency_ns);
  EXPECT_EQ(b.kind, AccessKind::MinorFault);
  auto c = sim.access(0, 0, 10000);
  EXPECT_EQ(c.kind, AccessKind::Hit);
  EXPECT_EQ(c.latency_ns, 200u);
  EXPECT_THROW(sim.access(kRegionSize, 0, 0), MemError);
}

TEST(Access, HitSampling) {
  MemorySim sim(small(3));
  sim.allocate(0, kRegionSize);
  int calls = 0;
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Access},
                                        [&](MemHook, std::span<uint8_t> c, MemKfuncs&) -> uint64_t {
                                          if (from_bytes<MemAccessCtx>(c).is_fault == 0) ++calls;
                                          return 0;
                                        }));
  sim.access(0, 0, 0);
  for (int i = 0; i < 130; ++i) sim.access(0, 0, 10000);
  EXPECT_EQ(calls, 2);
}

TEST(Attach, HookSlotConflict) {
  MemorySim sim;
  auto noop = [](MemHook, std::span<uint8_t>, MemKfuncs&) -> uint64_t { return 0; };
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::EvictPrepare}, noop));
  sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Prefetch}, noop));
  EXPECT_THROW(sim.attach(std::make_shared<FnPolicy>(std::vector{MemHook::Prefetch}, noop)), MemError);
}

TEST(Bytecode, EvictHandlerReordersList) {
  MapStore store;
  auto pol = std::make_shared<BytecodeMemPolicy>("mru", store);
  // Evicts the most recently listed candidate.
  pol->add(assemble(
      ".hook gpu_evict_prepare\n"
      "ldxdw r1, [ctx.region_id]\n"
      "call bpf_gpu_move_head\n"
      "mov r0, 0\n"
      "exit\n"));
  MemorySim sim(small(3));
  sim.allocate(0, 3 * kRegionSize);
  for (uint32_t r = 0; r < 3; ++r) fill(sim, r);
  sim.attach(pol);
  EXPECT_EQ(sim.evict(kRegionSize, 0), (std::vector<uint32_t>{2}));
  EXPECT_THROW(pol->add(assemble(".hook gpu_evict_prepare\nmov r0, 0\nexit\n")), MemError);
  EXPECT_THROW(pol->add(assemble(".hook gpu_prefetch\nexit\n")), LoadError);
}

namespace {

std::vector<uint64_t> random_trace(std::mt19937_64& rng, uint64_t regions, std::size_t n) {
  std::vector<uint64_t> out;
  uint64_t pages = regions * kPagesPerRegion;
  uint64_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng() % 4 == 0)
      cur = rng() % pages;
    else
      cur = (cur + 1 + rng() % 3) % pages;
    out.push_back(cur * kPageSize);
  }
  return out;
}

}  // namespace

TEST(Property, InvariantsUnderRandomPolicies) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    MemorySim sim(small(2 + rng() % 3));
    uint64_t regions = 3 + rng() % 6;
    sim.allocate(0, regions / 2 * kRegionSize);
    sim.allocate(1, (regions - regions / 2) * kRegionSize);
    auto seed = rng();
    auto chaos = std::make_shared<FnPolicy>(
        std::vector{MemHook::Activate, MemHook::Access, MemHook::EvictPrepare, MemHook::Prefetch},
        [r = std::mt19937_64(seed)](MemHook h, std::span<uint8_t> c, MemKfuncs& k) mutable -> uint64_t {
          const auto& s = k.sim();
          auto order = s.list().order();
          if (!order.empty() && r() % 2) {
            auto pick = order[r() % order.size()];
            r() % 2 ? k.move_head(pick) : k.move_tail(pick);
          }
          if (h == MemHook::Prefetch) {
            auto ctx = from_bytes<MemPrefetchCtx>(c);
            k.prefetch_pages(ctx.page + r() % 700, r() % 80);
          }
          if (r() % 50 == 0) k.move_head(99999);  // occasionally faulty
          return 0;
        });
    sim.attach(chaos);
    uint64_t t = 0;
    for (auto addr : random_trace(rng, regions, 400)) {
      auto out = sim.access(addr, static_cast<uint32_t>(addr / kRegionSize >= regions / 2), t);
      t += out.latency_ns;
      ASSERT_NO_THROW(sim.check_invariants());
      ASSERT_LE(sim.resident_bytes(), sim.config().capacity_bytes);
    }
    uint64_t migrate_events = 0, tenant_bytes = 0;
    for (const auto& e : sim.events()) migrate_events += e.kind == "MIGRATE";
    for (const auto& [id, st] : sim.tenants()) tenant_bytes += st.migrated_bytes;
    EXPECT_EQ(tenant_bytes, migrate_events * kPageSize);
  }
}

TEST(Property, HookOverheadIsExact) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto trace = random_trace(rng, 6, 2000);
    auto run = [&](bool attach, uint64_t overhead) {
      auto cfg = small(3);
      cfg.hook_overhead_ns = overhead;
      MemorySim sim(cfg);
      sim.allocate(0, 6 * kRegionSize);
      if (attach)
        sim.attach(std::make_shared<FnPolicy>(
            std::vector{MemHook::Activate, MemHook::Access, MemHook::EvictPrepare, MemHook::Prefetch},
            [](MemHook, std::span<uint8_t>, MemKfuncs&) -> uint64_t { return 0; }));
      uint64_t t = 0;
      for (auto a : trace) t += sim.access(a, 0, t).latency_ns;
      return std::pair{t, sim.hook_invocations()};
    };
    auto [base, n0] = run(false, 500);
    auto [with, n] = run(true, 500);
    EXPECT_EQ(n0, 0u);
    EXPECT_GT(n, 0u);
    EXPECT_EQ(with - base, 500u * n);
  }
}
