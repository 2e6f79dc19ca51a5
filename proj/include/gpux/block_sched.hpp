#pragma once

// Work-stealing thread-block scheduler. Persistent workers drain their own
// deque from the head; an idle worker asks should_try_steal and, if told
// to, takes one unit from the tail of the fullest deque.

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpux/device_exec.hpp"
#include "gpux/xmaps.hpp"

namespace gpux {

class BlockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class UnitState { Queued, Running, Done };

struct WorkUnit {
  uint32_t id = 0;
  uint64_t cost_us = 0;
  uint32_t home_worker = 0;
  bool pinned = false;  // cluster-placed: never leaves its home worker
  UnitState state = UnitState::Queued;
};

struct WorkerBlock {
  uint32_t id = 0;
  std::deque<uint32_t> local;
  uint64_t steals_performed = 0;  // successful
  uint64_t steal_attempts = 0;    // every try, successful or not
  uint64_t busy_us = 0;
  uint64_t stolen_work_us = 0;    // time in steal attempts plus stolen units
  uint64_t clock_us = 0;
  uint64_t units_run = 0;
};

enum class Assignment { RoundRobin, Blocked };
Assignment parse_assignment(std::string_view s);

struct BlockConfig {
  uint64_t steal_cost_us = 2;
  // Each attempt on a deque whose owner is mid-unit delays that unit by this
  // percentage of the steal cost (atomics and cache lines shared with the
  // thief). Must stay below 100 or a contended unit never finishes.
  uint32_t contention_pct = 25;
  uint32_t sm_count = 4;
  ExecMode mode = ExecMode::WarpLeader;
};

struct TimelineRecord {
  uint32_t worker = 0;
  int64_t unit = -1;  // -1 for a failed steal attempt
  uint64_t start_us = 0;
  uint64_t end_us = 0;
  bool stolen = false;
  friend bool operator==(const TimelineRecord&, const TimelineRecord&) = default;
};

struct BlockRunResult {
  uint64_t makespan_us = 0;
  std::vector<uint64_t> busy_us;
  std::vector<uint64_t> steals;
  std::vector<uint64_t> attempts;
  std::vector<uint64_t> units_run;
  std::map<std::string, uint64_t> hook_calls;
  uint64_t hook_cost_ns = 0;
  std::vector<TimelineRecord> timeline;
};

/// Handlers by hook name: enter, exit, probe, retprobe, should_try_steal.
using BlockPolicySet = std::map<std::string, const PolicyProgram*>;

class BlockScheduler {
 public:
  /// Units partitioned to home workers by `a`.
  BlockScheduler(const std::vector<uint64_t>& costs, uint32_t workers, Assignment a = Assignment::RoundRobin,
                 BlockConfig cfg = {});
  /// Units with explicit home workers and pin flags.
  BlockScheduler(std::vector<WorkUnit> units, uint32_t workers, BlockConfig cfg = {});

  /// Takes one stealable unit from the tail of the fullest deque into the
  /// thief's deque and charges the steal cost. None when nothing is stealable.
  std::optional<uint32_t> steal(uint32_t thief);

  /// Runs to completion. Maps come from `store` when given, else private.
  BlockRunResult run(const BlockPolicySet& policy, MapStore* store = nullptr);

  const std::vector<WorkUnit>& units() const { return units_; }
  const std::vector<WorkerBlock>& workers() const { return workers_; }
  const BlockConfig& config() const { return cfg_; }

 private:
  std::optional<uint32_t> pick_victim() const;
  std::optional<uint32_t> take(uint32_t thief, uint64_t& when, uint32_t* victim_out);

  BlockConfig cfg_;
  std::vector<WorkUnit> units_;
  std::vector<WorkerBlock> workers_;
  std::vector<uint64_t> lock_free_;  // per-deque lock release time
};

/// max over workers of the sum of their home units' costs.
uint64_t max_partition_sum(const std::vector<WorkUnit>& units, uint32_t workers);

}  // namespace gpux
