#pragma once

// Per-hook context layouts. Every field is a little-endian u64 at offset
// 8 * index; the typed structs below mirror the schemas field-for-field so
// native handlers and bytecode handlers observe the same bytes.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gpux/ir.hpp"

namespace gpux {

enum class Uniformity : uint8_t { Uninit = 0, Uniform = 1, LaneVarying = 2 };
enum class Mutability : uint8_t { RO, RW };

inline Uniformity join(Uniformity a, Uniformity b) { return a > b ? a : b; }
std::string_view to_string(Uniformity u);

struct ContextField {
  std::string name;
  uint16_t offset = 0;
  uint8_t width = 8;
  Uniformity uniformity = Uniformity::Uniform;
  Mutability mutability = Mutability::RO;
};

struct ContextSchema {
  std::string hook;
  HookType hook_type = HookType::GpuDev;
  std::vector<ContextField> fields;

  std::size_t size() const;
  const ContextField* find(std::string_view name) const;
  /// Field fully containing [offset, offset + width), or nullptr.
  const ContextField* covering(int64_t offset, unsigned width) const;
  int index_of(std::string_view name) const;
  const ContextField& decision() const;
};

/// Canonical schema for a hook slot of gpu_mem_ops, gdev_mem_ops,
/// gpu_sched_ops or gdev_sched_ops. Throws IrError on an unknown name.
const ContextSchema& context_schema(std::string_view hook);
bool is_known_hook(std::string_view hook);
HookType hook_type_of(std::string_view hook);
std::span<const std::string_view> known_hooks();

// Decision codes written into host memory contexts.
enum class MemDecision : uint64_t { Default = 0, BypassDefault = 1, Reordered = 2 };

struct MemActivateCtx {
  uint64_t region_id, tenant, base_addr, page, time_ns, resident_pages, decision;
};
struct MemAccessCtx {
  uint64_t region_id, page, fault_addr, tenant, is_fault, access_count, time_ns, decision;
};
struct MemEvictCtx {
  // position: candidate index counted from the victim end of the list
  uint64_t region_id, tenant, access_count, last_access_ns, resident_pages, needed_bytes,
      time_ns, position, tenant_resident_bytes, decision;
};
struct MemPrefetchCtx {
  // source: 0 = fault safe point, 1 = device request
  uint64_t region_id, page, fault_addr, tenant, source, time_ns, decision;
};
struct SchedQueueCtx {
  // tenant_class: 0 = LC, 1 = BE
  uint64_t queue_id, tenant, tenant_class, priority, timeslice_us, interleave_freq, pending,
      time_us, decision;
};

// Device contexts; the lane-varying fields are filled per lane.
struct DevMemAccessCtx {
  uint64_t kernel_id, block_id, warp_id, sm_id, access_size, lane_id, lane_addr, decision;
};
struct DevFenceCtx {
  uint64_t kernel_id, block_id, warp_id, sm_id, lane_id, decision;
};
struct DevBlockCtx {
  uint64_t worker_id, sm_id, warp_id, unit_id, unit_cost_us, local_queue_len, steals_performed,
      stolen_work_us, time_us, lane_id, decision;
};

template <typename Ctx>
std::vector<uint8_t> to_bytes(const Ctx& ctx) {
  std::vector<uint8_t> out(sizeof(Ctx));
  std::memcpy(out.data(), &ctx, sizeof(Ctx));
  return out;
}

template <typename Ctx>
Ctx from_bytes(std::span<const uint8_t> bytes) {
  Ctx ctx{};
  std::memcpy(&ctx, bytes.data(), std::min(bytes.size(), sizeof(Ctx)));
  return ctx;
}

}  // namespace gpux
