#include "gpux/mem_sim.hpp"

#include <algorithm>

namespace gpux {

void EvictionList::push_tail(uint32_t r) {
  if (contains(r)) throw MemError("region " + std::to_string(r) + " already listed");
  order_.push_back(r);
  pos_[r] = std::prev(order_.end());
}

void EvictionList::remove(uint32_t r) {
  auto it = pos_.find(r);
  if (it == pos_.end()) return;
  order_.erase(it->second);
  pos_.erase(it);
}

void EvictionList::move_head(uint32_t r) {
  auto it = pos_.find(r);
  if (it == pos_.end()) throw MemError("region " + std::to_string(r) + " not listed");
  order_.splice(order_.begin(), order_, it->second);
}

void EvictionList::move_tail(uint32_t r) {
  auto it = pos_.find(r);
  if (it == pos_.end()) throw MemError("region " + std::to_string(r) + " not listed");
  order_.splice(order_.end(), order_, it->second);
}

void EvictionList::restore(const std::vector<uint32_t>& order) {
  order_.clear();
  pos_.clear();
  for (auto r : order) push_tail(r);
}

std::string_view hook_name(MemHook h) {
  switch (h) {
    case MemHook::Activate: return "gpu_activate";
    case MemHook::Access: return "gpu_access";
    case MemHook::EvictPrepare: return "gpu_evict_prepare";
    case MemHook::Prefetch: return "gpu_prefetch";
  }
  return "?";
}

std::string_view to_string(AccessKind k) {
  switch (k) {
    case AccessKind::Hit: return "HIT";
    case AccessKind::MinorFault: return "MINOR_FAULT";
    case AccessKind::MajorFault: return "MAJOR_FAULT";
  }
  return "?";
}

namespace {

std::optional<MemHook> mem_hook(std::string_view name) {
  for (auto h : {MemHook::Activate, MemHook::Access, MemHook::EvictPrepare, MemHook::Prefetch})
    if (hook_name(h) == name) return h;
  return std::nullopt;
}

}  // namespace

void BytecodeMemPolicy::add(PolicyProgram prog, const HookBudget* budget) {
  auto h = mem_hook(prog.handler_name);
  if (!h) throw MemError("not a memory hook: " + prog.handler_name);
  if (progs_.count(*h)) throw MemError("hook " + prog.handler_name + " already has a handler");
  progs_.emplace(*h, load_program(store_, std::move(prog), budget));
}

std::vector<MemHook> BytecodeMemPolicy::hooks() const {
  std::vector<MemHook> out;
  for (const auto& [h, p] : progs_) out.push_back(h);
  return out;
}

const LoadedProgram* BytecodeMemPolicy::program(MemHook h) const {
  auto it = progs_.find(h);
  return it == progs_.end() ? nullptr : &it->second;
}

uint64_t BytecodeMemPolicy::invoke(MemHook hook, std::span<uint8_t> ctx, MemKfuncs& k) {
  const auto* p = program(hook);
  if (!p) return 0;
  auto kf = [&k](HelperId id, std::span<const uint64_t, 5> a) -> uint64_t {
    switch (id) {
      case HelperId::MoveHead: k.move_head(static_cast<uint32_t>(a[0])); return 0;
      case HelperId::MoveTail: k.move_tail(static_cast<uint32_t>(a[0])); return 0;
      case HelperId::PrefetchPages: k.prefetch_pages(a[0], a[1]); return 0;
      default: return 0;
    }
  };
  run_host(*p, ctx, store_, kf);
  const auto& schema = context_schema(hook_name(hook));
  uint64_t d = 0;
  std::memcpy(&d, ctx.data() + schema.decision().offset, sizeof d);
  return d;
}

// Kfunc surface handed to a running handler.
class MemorySim::Scope : public MemKfuncs {
 public:
  Scope(MemorySim& sim, std::vector<uint64_t>* requested) : sim_(sim), requested_(requested) {
    sim_.in_handler_ = true;
  }
  ~Scope() override { sim_.in_handler_ = false; }

  void move_head(uint32_t r) override { sim_.kfunc_move_head(r); }
  void move_tail(uint32_t r) override { sim_.kfunc_move_tail(r); }
  void prefetch_pages(uint64_t first, uint64_t count) override {
    if (!requested_) throw PolicyViolation("prefetch_pages outside a prefetch handler");
    count = std::min<uint64_t>(count, sim_.cfg_.prefetch_cap);
    for (uint64_t i = 0; i < count && requested_->size() < sim_.cfg_.prefetch_cap; ++i)
      requested_->push_back(first + i);
  }
  const MemorySim& sim() const override { return sim_; }

 private:
  MemorySim& sim_;
  std::vector<uint64_t>* requested_;
};

MemorySim::MemorySim(MemConfig cfg) : cfg_(cfg) {
  if (cfg_.capacity_bytes % kPageSize != 0 || cfg_.capacity_bytes < kRegionSize)
    throw MemError("capacity must be a page multiple of at least one region");
  if (cfg_.link_bytes_per_ns == 0 || cfg_.hit_sample == 0) throw MemError("bad memory config");
}

uint64_t MemorySim::allocate(uint32_t tenant, uint64_t bytes) {
  uint64_t n = std::max<uint64_t>(1, (bytes + kRegionSize - 1) / kRegionSize);
  uint64_t base = regions_.size() * kRegionSize;
  for (uint64_t i = 0; i < n; ++i) {
    Region r;
    r.id = static_cast<uint32_t>(regions_.size());
    r.tenant = tenant;
    r.base_addr = r.id * kRegionSize;
    regions_.push_back(r);
  }
  stats_[tenant];
  return base;
}

void MemorySim::attach(std::shared_ptr<MemPolicy> p) {
  for (auto h : p->hooks())
    if (slots_.count(h))
      throw MemError("hook " + std::string(hook_name(h)) + " already claimed by " + slots_[h]->name());
  for (auto h : p->hooks()) slots_[h] = p;
  policies_.push_back(std::move(p));
}

Region& MemorySim::reg(uint32_t id) {
  if (id >= regions_.size()) throw MemError("unknown region " + std::to_string(id));
  return regions_[id];
}

const Region& MemorySim::region(uint32_t id) const {
  if (id >= regions_.size()) throw MemError("unknown region " + std::to_string(id));
  return regions_[id];
}

uint32_t MemorySim::region_of_page(uint64_t page) const {
  return static_cast<uint32_t>(page / kPagesPerRegion);
}

bool MemorySim::page_resident(uint64_t page) const {
  auto r = region_of_page(page);
  return r < regions_.size() && regions_[r].resident.test(page % kPagesPerRegion);
}

uint64_t MemorySim::tenant_resident_bytes(uint32_t tenant) const {
  uint64_t pages = 0;
  for (auto r : list_.order())
    if (regions_[r].tenant == tenant) pages += regions_[r].resident_pages();
  return pages * kPageSize;
}

void MemorySim::log(MemEvent e) {
  if (logging_) events_.push_back(std::move(e));
}

void MemorySim::kfunc_move_head(uint32_t region) {
  if (!in_handler_) {
    ++violations_;
    throw PolicyViolation("move_head outside a handler");
  }
  if (!list_.contains(region)) throw PolicyViolation("move_head: region " + std::to_string(region) + " not listed");
  list_.move_head(region);
}

void MemorySim::kfunc_move_tail(uint32_t region) {
  if (!in_handler_) {
    ++violations_;
    throw PolicyViolation("move_tail outside a handler");
  }
  if (!list_.contains(region)) throw PolicyViolation("move_tail: region " + std::to_string(region) + " not listed");
  list_.move_tail(region);
}

uint64_t MemorySim::invoke(MemHook h, std::span<uint8_t> ctx, uint32_t tenant, uint64_t time_ns,
                           std::vector<uint64_t>* requested) {
  auto it = slots_.find(h);
  if (it == slots_.end()) return 0;
  if (in_handler_) throw MemError("nested handler invocation");
  ++hook_invocations_;
  pending_overhead_ns_ += cfg_.hook_overhead_ns;
  log({time_ns, "HOOK", -1, -1, tenant, std::string(hook_name(h)), 0});
  auto before = list_.order();
  std::string failure;
  bool budget = false;
  uint64_t decision = 0;
  try {
    Scope scope(*this, requested);
    decision = it->second->invoke(h, ctx, scope);
  } catch (const BudgetExceeded& e) {
    failure = e.what();
    budget = true;
  } catch (const PolicyViolation& e) {
    failure = e.what();
  } catch (const ExecError& e) {
    failure = e.what();
  } catch (const MapError& e) {
    failure = e.what();
  }
  if (failure.empty()) return decision;
  // Aborted: undo any reordering so the default order decides.
  list_.restore(before);
  if (requested) requested->clear();
  ++violations_;
  if (budget) ++budget_violations_;
  log({time_ns, "VIOLATION", -1, -1, tenant, failure, 0});
  return 0;
}

void MemorySim::evict_region(uint32_t id, uint64_t time_ns) {
  auto& r = reg(id);
  EvictionNotice n{id, r.tenant, r.resident_pages(), static_cast<uint32_t>(r.prefetched_unused.count())};
  resident_pages_ -= n.pages;
  r.resident.reset();
  r.prefetched_unused.reset();
  list_.remove(id);
  auto& s = stats_[r.tenant];
  ++s.evictions;
  s.wasted_prefetch_pages += n.unused_prefetched;
  log({time_ns, "EVICT", id, -1, r.tenant, std::to_string(n.pages), 0});
  for (const auto& p : policies_) p->on_evicted(n);
}

std::vector<uint32_t> MemorySim::evict(uint64_t needed_bytes, uint64_t time_ns) {
  return evict_rounds(needed_bytes, time_ns, {});
}

std::vector<uint32_t> MemorySim::evict_rounds(uint64_t needed_bytes, uint64_t time_ns,
                                              const std::set<uint32_t>& exclude) {
  std::vector<uint32_t> victims;
  uint64_t freed = 0;
  auto candidates = [&] {
    std::vector<uint32_t> out;
    for (auto r : list_.order())
      if (!exclude.count(r)) out.push_back(r);
    return out;
  };
  while (freed < needed_bytes) {
    // One decision per victim: every candidate is offered to evict_prepare
    // from the victim end, then the first candidate goes.
    auto cands = candidates();
    if (cands.empty()) break;
    uint64_t pos = 0;
    for (auto c : cands) {
      if (!list_.contains(c)) continue;
      const auto& r = regions_[c];
      MemEvictCtx ctx{c, r.tenant, r.access_count, r.last_access_ns, r.resident_pages(), needed_bytes - freed,
                      time_ns, pos++, tenant_resident_bytes(r.tenant), 0};
      auto bytes = to_bytes(ctx);
      invoke(MemHook::EvictPrepare, bytes, r.tenant, time_ns, nullptr);
    }
    auto v = candidates().front();
    freed += regions_[v].resident_pages() * kPageSize;
    evict_region(v, time_ns);
    victims.push_back(v);
  }
  return victims;
}

void MemorySim::make_room(uint64_t pages, uint64_t time_ns, const std::set<uint32_t>& exclude) {
  uint64_t cap_pages = cfg_.capacity_bytes / kPageSize;
  if (resident_pages_ + pages <= cap_pages) return;
  evict_rounds((resident_pages_ + pages - cap_pages) * kPageSize, time_ns, exclude);
}

void MemorySim::enlist(uint32_t id, uint64_t time_ns, uint64_t page) {
  list_.push_tail(id);
  const auto& r = regions_[id];
  log({time_ns, "ACTIVATE", id, static_cast<int64_t>(page), r.tenant, "", 0});
  MemActivateCtx ctx{id, r.tenant, r.base_addr, page, time_ns, r.resident_pages(), 0};
  auto bytes = to_bytes(ctx);
  invoke(MemHook::Activate, bytes, r.tenant, time_ns, nullptr);
}

void MemorySim::place_page(uint64_t page, uint64_t time_ns, bool prefetched) {
  auto id = region_of_page(page);
  auto& r = reg(id);
  auto bit = page % kPagesPerRegion;
  r.resident.set(bit);
  if (prefetched) r.prefetched_unused.set(bit);
  ++resident_pages_;
  auto& s = stats_[r.tenant];
  s.migrated_bytes += kPageSize;
  if (prefetched) ++s.prefetched_pages;
  log({time_ns, "MIGRATE", id, static_cast<int64_t>(page), r.tenant, prefetched ? "PREFETCH" : "DEMAND",
       kPageSize});
  if (!list_.contains(id)) enlist(id, time_ns, page);
}

uint64_t MemorySim::migrate(std::vector<uint64_t> pages, uint64_t time_ns, const std::set<uint32_t>& exclude,
                            uint64_t& finish_ns, std::optional<uint64_t> demand_page) {
  finish_ns = time_ns;
  std::vector<uint64_t> batch;
  std::set<uint64_t> seen;
  if (demand_page && !page_resident(*demand_page)) {
    batch.push_back(*demand_page);
    seen.insert(*demand_page);
  }
  uint64_t prefetched = 0;
  for (auto p : pages) {
    if (prefetched >= cfg_.prefetch_cap) break;
    if (region_of_page(p) >= regions_.size() || page_resident(p) || !seen.insert(p).second) continue;
    batch.push_back(p);
    ++prefetched;
  }
  if (batch.empty()) return 0;
  std::set<uint32_t> pinned = exclude;
  for (auto p : batch) pinned.insert(region_of_page(p));
  make_room(batch.size(), time_ns, pinned);
  uint64_t room = cfg_.capacity_bytes / kPageSize - resident_pages_;
  if (batch.size() > room) batch.resize(room);
  if (batch.empty()) throw MemError("no device capacity for demand page");
  uint64_t bytes = batch.size() * kPageSize;
  uint64_t start = std::max(time_ns, link_free_ns_);
  finish_ns = start + cfg_.migrate_base_ns + bytes / cfg_.link_bytes_per_ns;
  link_free_ns_ = finish_ns;
  for (auto p : batch) place_page(p, time_ns, !(demand_page && p == *demand_page));
  return bytes;
}

void MemorySim::activate(uint32_t region, [[maybe_unused]] uint32_t tenant, uint64_t time_ns, std::optional<uint64_t> page) {
  auto& r = reg(region);
  if (list_.contains(region)) throw MemError("region " + std::to_string(region) + " already active");
  uint64_t p = page.value_or(r.base_addr / kPageSize);
  if (region_of_page(p) != region) throw MemError("page outside region");
  uint64_t finish = 0;
  migrate({}, time_ns, {region}, finish, p);
}

AccessOutcome MemorySim::access(uint64_t addr, uint32_t tenant, uint64_t time_ns) {
  uint64_t page = addr / kPageSize;
  auto id = region_of_page(page);
  auto& r = reg(id);
  pending_overhead_ns_ = 0;
  ++r.access_count;
  r.last_access_ns = time_ns;
  auto& s = stats_[tenant];
  ++s.accesses;
  AccessOutcome out;
  auto bit = page % kPagesPerRegion;
  if (r.resident.test(bit)) {
    r.prefetched_unused.reset(bit);
    out.kind = AccessKind::Hit;
    out.latency_ns = cfg_.t_dev_ns;
    ++s.hits;
    if (++hits_since_sample_ >= cfg_.hit_sample) {
      hits_since_sample_ = 0;
      MemAccessCtx ctx{id, page, addr, tenant, 0, r.access_count, time_ns, 0};
      auto bytes = to_bytes(ctx);
      invoke(MemHook::Access, bytes, tenant, time_ns, nullptr);
    }
  } else {
    out.kind = list_.contains(id) ? AccessKind::MinorFault : AccessKind::MajorFault;
    if (out.kind == AccessKind::MajorFault)
      ++s.major_faults;
    else
      ++s.minor_faults;
    MemAccessCtx actx{id, page, addr, tenant, 1, r.access_count, time_ns, 0};
    auto abytes = to_bytes(actx);
    invoke(MemHook::Access, abytes, tenant, time_ns, nullptr);
    std::vector<uint64_t> requested;
    MemPrefetchCtx pctx{id, page, addr, tenant, 0, time_ns, 0};
    auto pbytes = to_bytes(pctx);
    invoke(MemHook::Prefetch, pbytes, tenant, time_ns, &requested);
    uint64_t finish = time_ns;
    out.migrated_bytes = migrate(requested, time_ns, {id}, finish, page);
    out.latency_ns = finish - time_ns + cfg_.t_dev_ns;
  }
  out.latency_ns += pending_overhead_ns_;
  log({time_ns, "ACCESS", id, static_cast<int64_t>(page), tenant, std::string(to_string(out.kind)),
       out.migrated_bytes});
  return out;
}

uint64_t MemorySim::prefetch(std::span<const uint64_t> pages, [[maybe_unused]] uint32_t tenant, uint64_t time_ns) {
  uint64_t finish = 0;
  return migrate({pages.begin(), pages.end()}, time_ns, {}, finish, std::nullopt);
}

uint64_t MemorySim::device_prefetch(uint32_t region, uint64_t time_ns) {
  auto& r = reg(region);
  uint64_t first = r.base_addr / kPageSize;
  log({time_ns, "PREFETCH", region, static_cast<int64_t>(first), r.tenant, "DEVICE", 0});
  std::vector<uint64_t> requested;
  MemPrefetchCtx ctx{region, first, r.base_addr, r.tenant, 1, time_ns, 0};
  auto bytes = to_bytes(ctx);
  auto d = invoke(MemHook::Prefetch, bytes, r.tenant, time_ns, &requested);
  if (requested.empty() && d != static_cast<uint64_t>(MemDecision::BypassDefault)) {
    for (uint64_t i = 0; i < kPagesPerRegion && requested.size() < cfg_.device_prefetch_pages; ++i)
      if (!r.resident.test(i)) requested.push_back(first + i);
  }
  // Asynchronous: occupies the link but nobody waits on it.
  uint64_t finish = 0;
  return migrate(requested, time_ns, {}, finish, std::nullopt);
}

void MemorySim::check_invariants() const {
  uint64_t total = 0, listed = 0;
  for (const auto& r : regions_) {
    auto n = r.resident_pages();
    total += n;
    if (list_.contains(r.id) != (n > 0))
      throw MemError("region " + std::to_string(r.id) + " list membership disagrees with residency");
    if ((r.prefetched_unused & ~r.resident).any()) throw MemError("prefetch marks on non-resident pages");
    if (n > 0) ++listed;
  }
  if (total != resident_pages_) throw MemError("resident page count drifted");
  if (total * kPageSize > cfg_.capacity_bytes) throw MemError("device capacity exceeded");
  if (listed != list_.size()) throw MemError("eviction list holds stale regions");
}

}  // namespace gpux
