#pragma once

#include <array>
#include <span>
#include <cstdint>
#include <optional>
#include <string_view>

#include "gpux/ir.hpp"

namespace gpux {

enum class HelperId : int32_t {
  MapLookup = 1,
  MapUpdate = 2,
  MapSet = 3,
  WarpReduceAdd = 4,
  WarpReduceMin = 5,
  WarpReduceMax = 6,
  WarpBallot = 7,
  GdevMemPrefetch = 8,
  MoveHead = 9,
  MoveTail = 10,
  SetAttr = 11,
  RejectBind = 12,
  SchedPreempt = 13,
  KtimeGetNs = 14,
  GridSync = 15,
  ThreadfenceSystem = 16,
  TraceEmit = 17,
  PrefetchPages = 18,
};

// Per-argument requirement checked by the uniformity pass on device programs.
enum class ArgRule : uint8_t {
  Any,
  Uniform,     // must be warp-uniform
  MapKey,      // map-update key, must be warp-uniform
  Aggregated,  // may vary per lane; combined by the handler's AggOp
};

enum class ResultTag : uint8_t {
  None,
  Uniform,
  LaneVarying,
  MapDependent,  // uniform iff key is uniform and the map is not SM-local
  Collective,    // warp reduction, always uniform
};

struct HelperInfo {
  HelperId id;
  std::string_view name;
  Domain domain;
  uint8_t num_args;
  std::array<ArgRule, 5> args;
  uint32_t budget_cost;
  bool memory_op;
  bool forbidden_sync;  // GPU-wide barrier / global synchronization
  ResultTag result;
};

const HelperInfo* find_helper(int32_t id);
const HelperInfo* find_helper(std::string_view name);
std::span<const HelperInfo> all_helpers();

inline bool is_collective(HelperId id) {
  return id == HelperId::WarpReduceAdd || id == HelperId::WarpReduceMin ||
         id == HelperId::WarpReduceMax || id == HelperId::WarpBallot;
}

/// Whether a helper of `helper` domain may be called from a program of `prog`.
inline bool domain_allows(Domain prog, Domain helper) {
  return helper == Domain::Both || helper == prog;
}

// Attribute selectors for bpf_gpu_set_attr(kind, value).
enum class QueueAttr : uint64_t { Priority = 0, TimesliceUs = 1, InterleaveFreq = 2 };

}  // namespace gpux
