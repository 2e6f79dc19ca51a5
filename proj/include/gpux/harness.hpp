#pragma once

// Scenario files, the experiment loop that drives the simulators, metrics
// reports and the unified event log.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpux/block_sched.hpp"
#include "gpux/device_exec.hpp"
#include "gpux/mem_sim.hpp"
#include "gpux/policy_lib.hpp"
#include "gpux/sched_sim.hpp"
#include "gpux/trace.hpp"

namespace gpux {

/// Invalid configuration. Carries every problem found, not just the first.
class ScenarioError : public std::runtime_error {
 public:
  explicit ScenarioError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct TenantSpec {
  uint32_t id = 0;
  std::string name;
  TenantClass tenant_class = TenantClass::BE;
  uint32_t priority = 50;

  // Memory workload: a generated pattern or a trace file.
  std::string pattern;  // empty: none
  GenParams gen;
  std::string trace_file;

  // Kernel workload driving device hooks and memory together.
  std::string kernel_file;
  uint32_t warps = 4;
  uint32_t kernels = 1;
  std::vector<HookPoint> hook_points;

  // Launch workload for the queue scheduler.
  uint32_t queues = 0;
  uint64_t launches = 0;
  uint64_t launch_work_us = 100;
  uint64_t launch_gap_us = 1000;
  std::string arrival = "periodic";  // periodic, poisson, backlog
  uint64_t jitter_us = 0;
  uint64_t timeslice_us = 1000;

  bool has_memory() const { return !pattern.empty() || !trace_file.empty() || !kernel_file.empty(); }
};

enum class UnitDistribution { Uniform, Ramp, HeavyTail, Skew };

struct BlockSpec {
  uint32_t workers = 8;
  uint32_t units = 64;
  uint64_t cost_us = 10;
  UnitDistribution distribution = UnitDistribution::Uniform;
  uint32_t ramp_pct = 60;       // RAMP: last worker's home load over the first's, minus 100
  uint32_t heavy_pct = 10;      // HEAVY_TAIL: share of heavy units
  uint32_t heavy_factor = 100;  // HEAVY_TAIL: heavy unit cost multiple
  bool clustered = true;        // HEAVY_TAIL: heavy units are the first ids
  bool pin_heavy = true;        // HEAVY_TAIL: heavy units never leave home
  uint32_t skew_pct = 99;       // SKEW: share of units homed on worker 0
  Assignment assignment = Assignment::RoundRobin;
  BlockConfig config;
};

struct Scenario {
  std::string name = "scenario";
  uint64_t seed = 1;
  uint64_t duration_us = 0;  // queue scheduler horizon; 0 runs to completion
  MemConfig mem;
  SchedConfig sched;
  uint32_t sm_count = 4;
  std::vector<TenantSpec> tenants;
  std::vector<PolicySpec> policies;
  std::optional<BlockSpec> block;
  std::string base_dir;  // relative file paths resolve here

  /// All problems with the configuration; empty when runnable.
  std::vector<std::string> validate() const;
};

/// INI-style text: [scenario], [device], [sched], [block], [tenant.N] and
/// [policy.NAME] sections of key = value lines. Throws ScenarioError.
Scenario parse_scenario(std::string_view text, const std::string& base_dir = ".");
Scenario load_scenario(const std::string& path);

/// Units as the scenario's block section lays them out.
std::vector<WorkUnit> make_units(const BlockSpec& spec, uint64_t seed);

/// Builds a policy from assembly sources, one handler per source.
PolicySpec custom_policy(const std::string& name, const std::vector<std::string>& sources);

struct TenantReport {
  uint32_t id = 0;
  std::string name;
  std::string tenant_class;
  uint32_t priority = 0;
  uint64_t working_set_bytes = 0;
  uint64_t accesses = 0;
  uint64_t hits = 0;
  uint64_t minor_faults = 0;
  uint64_t major_faults = 0;
  uint64_t faults = 0;
  uint64_t migrated_bytes = 0;
  uint64_t prefetched_pages = 0;
  uint64_t wasted_prefetch_pages = 0;
  uint64_t evictions = 0;
  double hit_rate = 0;
  uint64_t completion_ns = 0;
  friend bool operator==(const TenantReport&, const TenantReport&) = default;
};

struct LatencyReport {
  uint64_t count = 0;
  double mean_us = 0;
  uint64_t p50_us = 0, p90_us = 0, p99_us = 0;
  friend bool operator==(const LatencyReport&, const LatencyReport&) = default;
};

struct QueueReport {
  uint32_t id = 0;
  uint32_t tenant = 0;
  std::string tenant_class;
  std::string state;
  uint32_t priority = 0;
  uint64_t timeslice_us = 0;
  uint64_t launches = 0;
  uint64_t completed = 0;
  uint64_t work_done_us = 0;
  LatencyReport latency;
  friend bool operator==(const QueueReport&, const QueueReport&) = default;
};

struct ClassReport {
  std::string tenant_class;
  uint64_t work_done_us = 0;
  double throughput = 0;  // work done per unit of horizon
  LatencyReport latency;
  friend bool operator==(const ClassReport&, const ClassReport&) = default;
};

struct BlockReport {
  std::string policy;
  uint64_t makespan_us = 0;
  uint64_t steals = 0;
  uint64_t attempts = 0;
  std::vector<uint64_t> busy_us;
  std::vector<uint64_t> units_run;
  friend bool operator==(const BlockReport&, const BlockReport&) = default;
};

struct HookReport {
  uint64_t host_invocations = 0;
  uint64_t overhead_ns_per_hook = 0;
  uint64_t host_overhead_ns = 0;
  uint64_t device_invocations = 0;
  uint64_t device_cost_ns = 0;
  uint64_t violations = 0;
  uint64_t budget_violations = 0;
  friend bool operator==(const HookReport&, const HookReport&) = default;
};

struct MapReport {
  uint32_t id = 0;
  std::string name;
  uint64_t epoch = 0;
  std::map<uint64_t, int64_t> entries;
  friend bool operator==(const MapReport&, const MapReport&) = default;
};

inline constexpr int kReportSchemaVersion = 1;

struct MetricsReport {
  int schema_version = kReportSchemaVersion;
  std::string scenario;
  uint64_t seed = 0;
  uint64_t capacity_bytes = 0;
  double oversubscription = 0;    // total working set / capacity
  uint64_t memory_time_ns = 0;    // sum of tenant completion times
  uint64_t memory_makespan_ns = 0;
  uint64_t sched_horizon_us = 0;
  std::vector<TenantReport> tenants;
  std::vector<QueueReport> queues;
  std::vector<ClassReport> classes;
  std::vector<BlockReport> blocks;
  HookReport hooks;
  std::vector<MapReport> maps;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// One line of the unified log. Memory records use the simulator's fields;
/// sched records put queue/launch into a/b; block records put worker/unit.
struct LogRecord {
  uint64_t time_ns = 0;
  std::string source;  // mem, sched, block
  std::string kind;
  int64_t a = -1;
  int64_t b = -1;
  uint32_t tenant = 0;
  std::string outcome;
  uint64_t bytes = 0;
  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

struct RunResult {
  MetricsReport report;
  std::vector<LogRecord> log;
};

/// Validates, then runs the memory, kernel, queue and block parts in that
/// order. Throws ScenarioError before doing any work if the config is bad.
RunResult run_scenario(const Scenario& s);

void write_log(std::ostream& out, const std::vector<LogRecord>& log);
std::vector<LogRecord> read_log(std::istream& in);

enum class ReportFormat { Json, Csv };
std::string emit_report(const MetricsReport& r, ReportFormat f);
void write_report(const std::string& path, const MetricsReport& r, ReportFormat f);
MetricsReport load_report_json(std::string_view text);

/// Sum checks between report counters and the log; empty when consistent.
std::vector<std::string> reconcile(const MetricsReport& r, const std::vector<LogRecord>& log);

// Verifier corpus.

struct CorpusEntry {
  std::string file;
  bool expect_accept = true;
  std::vector<Rule> expect_rules;
  bool passed = false;
  std::string detail;
};

struct CorpusSummary {
  std::vector<CorpusEntry> entries;
  std::size_t accept_count = 0;  // labeled ACCEPT
  std::size_t reject_count = 0;  // labeled REJECT
  std::size_t passed = 0;
  bool ok() const { return !entries.empty() && passed == entries.size(); }
};

/// Every `.gpa` file under dir carries `# expect: ACCEPT` or
/// `# expect: REJECT RULE[,RULE]` on a comment line. Throws if dir is missing.
CorpusSummary corpus_check(const std::string& dir);

// Observability tools.

struct ToolReport {
  std::string tool;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::map<std::string, double> summary;
  std::string to_text() const;
};

/// kernelretsnoop, threadhist or launchlate against a scenario.
ToolReport run_tool(const std::string& tool, const Scenario& s);

}  // namespace gpux
