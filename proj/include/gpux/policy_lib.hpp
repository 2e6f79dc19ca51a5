#pragma once

// Catalog of ready-made policies. Eviction, block and queue-init handlers are
// bytecode; prefetchers with per-tenant history and the preemption trigger
// are native handler sets.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpux/block_sched.hpp"
#include "gpux/mem_sim.hpp"
#include "gpux/sched_sim.hpp"

namespace gpux {

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Integer parameters. Per-tenant keys look like `quota.3`, per-class keys
/// like `timeslice.LC`.
using PolicyParams = std::map<std::string, int64_t>;

struct PolicySpec {
  std::string name;
  std::string kind;
  std::string tag;  // catalog row label
  Domain domain = Domain::Host;
  PolicyParams params;
  /// Verified bytecode handlers, keyed by their hook.
  std::vector<PolicyProgram> programs;
  /// Host maps to preload before the handlers run: map name -> key -> value.
  std::map<std::string, std::map<uint64_t, int64_t>> map_init;
  /// Native handler factories; each call yields fresh state.
  std::function<std::shared_ptr<MemPolicy>()> native_mem;
  std::function<std::shared_ptr<SchedPolicy>()> native_sched;

  /// Every hook this spec claims, bytecode and native.
  std::vector<std::string> hooks() const;
  const PolicyProgram* program(std::string_view hook) const;
};

PolicySpec build_eviction(const std::string& kind, const PolicyParams& params = {});
PolicySpec build_prefetch(const std::string& kind, const PolicyParams& params = {});
PolicySpec build_sched(const std::string& kind, const PolicyParams& params = {});
PolicySpec build_block(const std::string& kind, const PolicyParams& params = {});
/// Dispatches on kind across all families.
PolicySpec build_policy(const std::string& kind, const PolicyParams& params = {});

/// Parses `key = value` lines (`name`, `kind`, then integer params; `#`
/// comments) and builds the spec.
PolicySpec parse_policy_file(std::string_view text);

struct CatalogEntry {
  std::string kind;
  std::string family;  // eviction, prefetch, sched, block
  std::string tag;
  Domain domain;
};
const std::vector<CatalogEntry>& catalog();

/// Host-side handler objects for a spec, with maps preloaded into `store`.
/// Null when the spec has no hook of that family.
std::shared_ptr<MemPolicy> instantiate_mem(const PolicySpec& spec, MapStore& store);
std::shared_ptr<SchedPolicy> instantiate_sched(const PolicySpec& spec, MapStore& store);
/// Device block handlers; the pointers borrow from `spec`.
BlockPolicySet block_policy_set(const PolicySpec& spec);

/// Stride detector used by the STRIDE prefetcher, exposed for testing.
class StrideDetector {
 public:
  explicit StrideDetector(uint32_t history = 3) : history_(history) {}
  /// Feeds a faulting page; returns the stride once `history` consecutive
  /// equal nonzero deltas were seen, or when the fault lands where the last
  /// prediction ended.
  std::optional<int64_t> observe(uint64_t page);
  /// Records the end of the pages just requested along the stride.
  void predicted(uint64_t next_page) { next_expected_ = next_page; }

 private:
  uint32_t history_;
  std::optional<uint64_t> last_;
  int64_t delta_ = 0;
  uint32_t run_ = 0;
  std::optional<uint64_t> next_expected_;
};

}  // namespace gpux
