#pragma once

// Unified-memory simulator: 2 MB regions of 4 KB pages, a device eviction
// list, a shared PCIe link and four host policy hooks (activate, access,
// evict_prepare, prefetch) that may reorder the list or request pages.

#include <bitset>
#include <cstdint>
#include <list>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gpux/context.hpp"
#include "gpux/host_exec.hpp"

namespace gpux {

constexpr uint64_t kPageSize = 4096;
constexpr uint64_t kPagesPerRegion = 512;
constexpr uint64_t kRegionSize = kPageSize * kPagesPerRegion;

class MemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Kfunc misuse or a handler fault. The handler is aborted and the default
/// behavior applies for that decision.
class PolicyViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MemConfig {
  uint64_t capacity_bytes = 64ull << 20;
  uint64_t t_dev_ns = 200;
  uint64_t migrate_base_ns = 3000;
  uint64_t link_bytes_per_ns = 16;  // 16 GB/s
  uint32_t prefetch_cap = 64;       // pages per request
  uint32_t hit_sample = 64;         // gpu_access fires on every Nth hit
  uint64_t hook_overhead_ns = 0;    // charged per handler invocation
  uint32_t device_prefetch_pages = 32;
};

struct Region {
  uint32_t id = 0;
  uint32_t tenant = 0;
  uint64_t base_addr = 0;
  std::bitset<kPagesPerRegion> resident;
  std::bitset<kPagesPerRegion> prefetched_unused;
  uint64_t access_count = 0;
  uint64_t last_access_ns = 0;
  uint32_t resident_pages() const { return static_cast<uint32_t>(resident.count()); }
};

/// Region ids ordered from the victim end (head) to the insertion end.
class EvictionList {
 public:
  void push_tail(uint32_t r);
  void remove(uint32_t r);
  void move_head(uint32_t r);
  void move_tail(uint32_t r);
  bool contains(uint32_t r) const { return pos_.count(r) != 0; }
  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  uint32_t head() const { return order_.front(); }
  std::vector<uint32_t> order() const { return {order_.begin(), order_.end()}; }
  void restore(const std::vector<uint32_t>& order);

 private:
  std::list<uint32_t> order_;
  std::unordered_map<uint32_t, std::list<uint32_t>::iterator> pos_;
};

enum class MemHook { Activate, Access, EvictPrepare, Prefetch };
std::string_view hook_name(MemHook h);

class MemorySim;

/// What a handler may do besides reading its context: reorder the list,
/// request pages, and read simulator state (native handlers only).
class MemKfuncs {
 public:
  virtual ~MemKfuncs() = default;
  virtual void move_head(uint32_t region) = 0;
  virtual void move_tail(uint32_t region) = 0;
  virtual void prefetch_pages(uint64_t first_page, uint64_t count) = 0;
  virtual const MemorySim& sim() const = 0;
};

struct EvictionNotice {
  uint32_t region = 0;
  uint32_t tenant = 0;
  uint32_t pages = 0;
  uint32_t unused_prefetched = 0;
};

/// A host memory policy. Returns the value for the context's decision field.
class MemPolicy {
 public:
  virtual ~MemPolicy() = default;
  virtual std::string name() const = 0;
  virtual std::vector<MemHook> hooks() const = 0;
  virtual uint64_t invoke(MemHook hook, std::span<uint8_t> ctx, MemKfuncs& k) = 0;
  virtual void on_evicted(const EvictionNotice&) {}
};

/// Adapter running verified bytecode handlers, one per hook.
class BytecodeMemPolicy : public MemPolicy {
 public:
  BytecodeMemPolicy(std::string name, MapStore& store) : name_(std::move(name)), store_(store) {}
  /// Verifies and attaches; the hook comes from the program.
  void add(PolicyProgram prog, const HookBudget* budget = nullptr);

  std::string name() const override { return name_; }
  std::vector<MemHook> hooks() const override;
  uint64_t invoke(MemHook hook, std::span<uint8_t> ctx, MemKfuncs& k) override;
  const LoadedProgram* program(MemHook h) const;

 private:
  std::string name_;
  MapStore& store_;
  std::map<MemHook, LoadedProgram> progs_;
};

enum class AccessKind { Hit, MinorFault, MajorFault };
std::string_view to_string(AccessKind k);

struct AccessOutcome {
  AccessKind kind = AccessKind::Hit;
  uint64_t latency_ns = 0;
  uint64_t migrated_bytes = 0;
};

struct MemEvent {
  uint64_t time_ns = 0;
  std::string kind;  // ACCESS MIGRATE EVICT ACTIVATE HOOK VIOLATION PREFETCH
  int64_t region = -1;
  int64_t page = -1;
  uint32_t tenant = 0;
  std::string outcome;
  uint64_t migrated_bytes = 0;
};

struct TenantMemStats {
  uint64_t accesses = 0;
  uint64_t hits = 0;
  uint64_t minor_faults = 0;
  uint64_t major_faults = 0;
  uint64_t migrated_bytes = 0;
  uint64_t prefetched_pages = 0;
  uint64_t wasted_prefetch_pages = 0;
  uint64_t evictions = 0;
  uint64_t faults() const { return minor_faults + major_faults; }
};

class MemorySim {
 public:
  explicit MemorySim(MemConfig cfg = {});

  /// Backs `bytes` for a tenant with whole regions; returns the base address.
  uint64_t allocate(uint32_t tenant, uint64_t bytes);

  /// Claims the policy's hooks; a hook already claimed is an error.
  void attach(std::shared_ptr<MemPolicy> p);

  /// Brings a non-listed region onto the device with one page (default: its
  /// first), evicting first if needed.
  void activate(uint32_t region, uint32_t tenant, uint64_t time_ns, std::optional<uint64_t> page = {});
  AccessOutcome access(uint64_t addr, uint32_t tenant, uint64_t time_ns);
  /// Frees at least needed_bytes; returns victims in eviction order.
  std::vector<uint32_t> evict(uint64_t needed_bytes, uint64_t time_ns);
  /// Migrates the listed pages (capped, resident ones skipped); returns bytes moved.
  uint64_t prefetch(std::span<const uint64_t> pages, uint32_t tenant, uint64_t time_ns);
  /// A device-side prefetch request for a region (gdev_mem_prefetch).
  uint64_t device_prefetch(uint32_t region, uint64_t time_ns);

  // Kfunc entry points; valid only while a handler runs.
  void kfunc_move_head(uint32_t region);
  void kfunc_move_tail(uint32_t region);

  const MemConfig& config() const { return cfg_; }
  const EvictionList& list() const { return list_; }
  const Region& region(uint32_t id) const;
  std::size_t region_count() const { return regions_.size(); }
  uint64_t resident_bytes() const { return resident_pages_ * kPageSize; }
  uint64_t free_bytes() const { return cfg_.capacity_bytes - resident_bytes(); }
  uint64_t tenant_resident_bytes(uint32_t tenant) const;
  bool page_resident(uint64_t page) const;
  uint64_t hook_invocations() const { return hook_invocations_; }
  uint64_t violations() const { return violations_; }
  uint64_t budget_violations() const { return budget_violations_; }
  const std::map<uint32_t, TenantMemStats>& tenants() const { return stats_; }
  const std::vector<MemEvent>& events() const { return events_; }
  void set_logging(bool on) { logging_ = on; }

  /// Throws MemError if membership or capacity invariants are broken.
  void check_invariants() const;

 private:
  class Scope;
  friend class Scope;

  Region& reg(uint32_t id);
  uint32_t region_of_page(uint64_t page) const;
  uint64_t invoke(MemHook h, std::span<uint8_t> ctx, uint32_t tenant, uint64_t time_ns,
                  std::vector<uint64_t>* requested);
  void make_room(uint64_t pages, uint64_t time_ns, const std::set<uint32_t>& exclude);
  uint64_t migrate(std::vector<uint64_t> pages, uint64_t time_ns, const std::set<uint32_t>& exclude,
                   uint64_t& finish_ns, std::optional<uint64_t> demand_page);
  std::vector<uint32_t> evict_rounds(uint64_t needed_bytes, uint64_t time_ns, const std::set<uint32_t>& exclude);
  void place_page(uint64_t page, uint64_t time_ns, bool prefetched);
  void enlist(uint32_t region, uint64_t time_ns, uint64_t page);
  void evict_region(uint32_t region, uint64_t time_ns);
  void log(MemEvent e);

  MemConfig cfg_;
  std::vector<Region> regions_;
  EvictionList list_;
  uint64_t resident_pages_ = 0;
  std::map<MemHook, std::shared_ptr<MemPolicy>> slots_;
  std::vector<std::shared_ptr<MemPolicy>> policies_;
  uint64_t link_free_ns_ = 0;
  uint64_t hits_since_sample_ = 0;
  uint64_t hook_invocations_ = 0;
  uint64_t pending_overhead_ns_ = 0;
  uint64_t violations_ = 0;
  uint64_t budget_violations_ = 0;
  bool in_handler_ = false;
  bool logging_ = true;
  std::map<uint32_t, TenantMemStats> stats_;
  std::vector<MemEvent> events_;
};

}  // namespace gpux
