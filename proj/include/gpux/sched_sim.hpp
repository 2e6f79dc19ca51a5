#pragma once

// Hardware-queue scheduling: queues are created through task_init handlers
// that may set attributes or reject, and one compute engine timeslices
// between queues following a priority-ordered runlist.

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpux/context.hpp"
#include "gpux/host_exec.hpp"

namespace gpux {

class SchedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TenantClass : uint8_t { LC = 0, BE = 1 };
std::string_view to_string(TenantClass c);
TenantClass parse_tenant_class(std::string_view s);

enum class QueueState { Active, Rejected, Destroyed };
std::string_view to_string(QueueState s);

struct QueueAttrs {
  uint32_t priority = 50;  // 0..100, lower runs first
  uint64_t timeslice_us = 1000;
  uint32_t interleave_freq = 1;
  TenantClass tenant_class = TenantClass::BE;
};

struct KernelLaunch {
  uint64_t id = 0;
  uint32_t queue = 0;
  uint64_t submit_us = 0;
  std::optional<uint64_t> start_us;
  std::optional<uint64_t> end_us;
  uint64_t work_us = 0;  // remaining
  uint64_t total_us = 0;
  TenantClass tenant_class = TenantClass::BE;
};

struct QueueDescriptor {
  uint32_t id = 0;
  uint32_t tenant = 0;
  QueueAttrs attrs;
  std::deque<uint64_t> pending;  // launch ids, FIFO
  QueueState state = QueueState::Active;
  uint64_t cancelled = 0;
};

struct SchedConfig {
  uint64_t switch_cost_us = 5;
  uint64_t tick_us = 10;
};

struct SchedEvent {
  uint64_t time_us = 0;
  std::string kind;  // CREATE REJECT DESTROY CANCEL START COMPLETE SLICE_END PREEMPT PREEMPT_NOOP VIOLATION
  int64_t queue = -1;
  int64_t launch = -1;
  friend bool operator==(const SchedEvent&, const SchedEvent&) = default;
};

struct CreateResult {
  uint32_t queue_id = 0;
  bool rejected = false;
  uint64_t retry_after_us = 0;  // hint from the handler, 0 if none
};

// LaunchArrival has no bytecode schema; only native handlers take it. Its
// context describes the queue the launch arrived on.
enum class SchedHook { TaskInit, TaskDestroy, LaunchArrival };

class SchedSim;

/// Kfuncs available to sched handlers.
class SchedKfuncs {
 public:
  virtual ~SchedKfuncs() = default;
  virtual void set_attr(uint64_t kind, uint64_t value) = 0;  // QueueAttr kind
  virtual void reject_bind() = 0;
  virtual void preempt(uint32_t queue) = 0;
  virtual const SchedSim& sim() const = 0;
};

class SchedPolicy {
 public:
  virtual ~SchedPolicy() = default;
  virtual std::string name() const = 0;
  virtual std::vector<SchedHook> hooks() const = 0;
  /// Return value: 0 accepts, negative rejects (task_init only).
  virtual int64_t invoke(SchedHook h, std::span<uint8_t> ctx, SchedKfuncs& k) = 0;
};

class BytecodeSchedPolicy : public SchedPolicy {
 public:
  BytecodeSchedPolicy(std::string name, MapStore& store) : name_(std::move(name)), store_(store) {}
  void add(PolicyProgram prog, const HookBudget* budget = nullptr);
  std::string name() const override { return name_; }
  std::vector<SchedHook> hooks() const override;
  int64_t invoke(SchedHook h, std::span<uint8_t> ctx, SchedKfuncs& k) override;

 private:
  std::string name_;
  MapStore& store_;
  std::map<SchedHook, LoadedProgram> progs_;
};

struct LatencySummary {
  uint64_t count = 0;
  double mean_us = 0;
  uint64_t p50_us = 0, p90_us = 0, p99_us = 0;
};

/// Nearest-rank percentiles.
LatencySummary summarize(std::vector<uint64_t> samples);

class SchedSim {
 public:
  explicit SchedSim(SchedConfig cfg = {});

  void attach(std::shared_ptr<SchedPolicy> p);

  CreateResult queue_create(uint32_t tenant, QueueAttrs requested, uint64_t time_us);
  void queue_destroy(uint32_t queue, uint64_t time_us);
  /// Queues a launch arriving at time_us (which may lie in the future).
  uint64_t submit(uint32_t queue, uint64_t work_us, uint64_t time_us);
  /// Runs the engine for dt_us; returns the events produced.
  std::vector<SchedEvent> advance(uint64_t dt_us);
  /// Advances until every submitted launch finished or was cancelled.
  std::vector<SchedEvent> run_to_completion();
  /// Forfeits a queue's current (or next) slice at the next engine tick.
  void kfunc_preempt(uint32_t queue, uint64_t time_us);

  uint64_t now() const { return now_; }
  const QueueDescriptor& queue(uint32_t id) const;
  const std::vector<QueueDescriptor>& queues() const { return queues_; }
  const std::vector<KernelLaunch>& launches() const { return launches_; }
  const std::vector<SchedEvent>& events() const { return events_; }
  std::optional<uint32_t> running() const { return cur_; }
  uint64_t violations() const { return violations_; }
  uint64_t busy_us() const { return busy_us_; }

  /// Launch latencies (start - submit) of started launches, per queue.
  std::vector<uint64_t> latencies(uint32_t queue) const;
  std::vector<uint64_t> latencies(TenantClass c) const;

 private:
  class Scope;
  QueueDescriptor& q(uint32_t id);
  int64_t invoke(SchedHook h, SchedQueueCtx& ctx, QueueDescriptor& target, bool& rejected);
  void log(uint64_t t, const char* kind, int64_t queue, int64_t launch = -1);
  bool available(const QueueDescriptor& d) const;
  bool any_available() const;
  std::optional<uint64_t> next_arrival() const;
  void build_round();
  bool pick();
  void run_until(uint64_t target);
  uint64_t next_tick(uint64_t t) const;
  void announce(uint64_t launch);
  void announce_due();

  SchedConfig cfg_;
  std::vector<QueueDescriptor> queues_;
  std::vector<KernelLaunch> launches_;
  std::vector<SchedEvent> events_;
  std::map<SchedHook, std::shared_ptr<SchedPolicy>> slots_;
  uint64_t now_ = 0;
  std::vector<uint32_t> round_;
  std::size_t round_pos_ = 0;
  std::optional<uint32_t> cur_;
  uint64_t slice_left_ = 0;
  std::optional<uint64_t> preempt_at_;
  std::set<uint32_t> preempt_requests_;
  using Arrival = std::pair<uint64_t, uint64_t>;  // submit time, launch id
  std::priority_queue<Arrival, std::vector<Arrival>, std::greater<>> unannounced_;
  uint64_t switching_until_ = 0;
  uint64_t busy_us_ = 0;
  uint64_t violations_ = 0;
};

}  // namespace gpux
