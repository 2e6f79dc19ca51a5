#pragma once

// Execution of GPU_DEV handlers at simulated hook points.
//
// PER_LANE interprets the handler on every active lane in lockstep and is the
// reference. WARP_LEADER runs once per warp: lane-local values are computed
// per lane, helper arguments that may vary are combined with the handler's
// aggregation op, and the leader (lowest active lane) performs every side
// effect once.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gpux/context.hpp"
#include "gpux/interpreter.hpp"
#include "gpux/ir.hpp"

namespace gpux {

inline constexpr int kWarpSize = 32;
using LaneArray = std::array<uint64_t, kWarpSize>;

enum class ExecMode { PerLane, WarpLeader };
std::string_view to_string(ExecMode m);

struct WarpContext {
  std::string hook;
  uint32_t sm_id = 0;
  uint32_t warp_id = 0;
  uint32_t active_mask = 0xffffffffu;
  std::map<std::string, uint64_t> uniform_values;
  std::map<std::string, LaneArray> lane_values;

  /// Context with sm_id/warp_id filled in and lane_id = lane index.
  static WarpContext make(std::string hook, uint32_t sm_id, uint32_t warp_id,
                          uint32_t active_mask = 0xffffffffu);
  /// Context bytes as seen by one lane. Throws IrError when a value names a
  /// field the schema lacks or gives a uniform field per-lane values.
  std::vector<uint8_t> lane_bytes(int lane) const;
};

/// Reduction over active lanes only. SUM wraps modulo 2^64, BALLOT sets bit i
/// for every active lane i with a nonzero value.
uint64_t aggregate(const LaneArray& values, uint32_t mask, AggOp op);

/// Lowest set lane of the mask; -1 for an empty mask.
int leader_lane(uint32_t mask);

struct DeviceCostModel {
  uint64_t ns_per_instruction = 40;
  uint64_t aggregation_ns = 8;
};

struct HookResult {
  int64_t decision = 0;
  LaneArray lane_decisions{};  // broadcast value for every active lane
  std::vector<Effect> effects;
  uint64_t cost_ns = 0;
  uint64_t instructions = 0;  // summed over interpreted lanes
  int leader = -1;
  // PER_LANE only: each lane's branch outcomes in execution order.
  std::array<std::vector<BranchRecord>, kWarpSize> lane_branches;
};

struct RunHookOptions {
  ExecLimits limits;
  DeviceCostModel cost;
  /// Test-only, as for interpret().
  bool allow_unverified = false;
};

HookResult run_hook(const PolicyProgram& handler, const WarpContext& ctx, Runtime& maps, ExecMode mode,
                    const RunHookOptions& opts = {});

// Abstract kernel op streams and hook insertion.

enum class KernelOpKind { Compute, Load, Fence };
std::string_view to_string(KernelOpKind k);

struct KernelOp {
  KernelOpKind kind = KernelOpKind::Compute;
  // LOAD: lane address = base + rep * stride + lane * lane_stride.
  uint64_t base = 0;
  uint64_t stride = 0;
  uint64_t lane_stride = 0;
  uint64_t cycles = 0;  // COMPUTE
  uint32_t repeat = 1;
  friend bool operator==(const KernelOp&, const KernelOp&) = default;
};

struct KernelSpec {
  std::string name;
  std::vector<KernelOp> ops;
};

/// One op per line: `<COMPUTE|LOAD|FENCE> <pattern> <repeat>`, where pattern
/// is `-` or comma-separated key=value pairs (base, stride, lane_stride,
/// cycles). `#` starts a comment; `kernel <name>` sets the name.
KernelSpec parse_kernel_spec(std::string_view text);
std::string format_kernel_spec(const KernelSpec& spec);

enum class HookPoint { Entry, MemInstruction, Fence };
HookPoint parse_hook_point(std::string_view s);  // throws IrError
/// Device hook invoked at a point: enter, access, fence.
std::string_view hook_name(HookPoint p);

struct InstrumentedStep {
  bool is_hook = false;
  HookPoint point = HookPoint::Entry;  // valid when is_hook
  std::size_t op_index = 0;            // op this step is or precedes
  friend bool operator==(const InstrumentedStep&, const InstrumentedStep&) = default;
};

struct InstrumentedKernel {
  KernelSpec spec;
  std::vector<InstrumentedStep> steps;
  std::size_t hook_count() const;
};

InstrumentedKernel instrument(const KernelSpec& spec, const std::vector<HookPoint>& points);

struct KernelLaunchConfig {
  uint32_t kernel_id = 0;
  uint32_t sm_count = 4;
  uint32_t warps = 4;  // warp w runs on SM w % sm_count
  uint32_t active_mask = 0xffffffffu;
  ExecMode mode = ExecMode::WarpLeader;
};

struct KernelRunStats {
  uint64_t hook_calls = 0;
  uint64_t hook_cost_ns = 0;
  uint64_t loads = 0;
  std::map<std::string, uint64_t> calls_per_hook;
};

/// Runs every warp through the instrumented stream. Each executed LOAD lane
/// address is reported to on_load; handlers are looked up by hook name.
/// The runtime factory supplies the map view for a given SM.
KernelRunStats run_kernel(const InstrumentedKernel& kernel, const KernelLaunchConfig& cfg,
                          const std::map<std::string, const PolicyProgram*>& handlers,
                          const std::function<Runtime&(uint32_t sm)>& runtime_for,
                          const std::function<void(uint32_t warp, uint64_t addr)>& on_load = {});

}  // namespace gpux
