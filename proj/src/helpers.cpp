#include "gpux/helpers.hpp"

#include <array>

namespace gpux {

namespace {

using A = ArgRule;

constexpr std::array kHelpers = {
    HelperInfo{HelperId::MapLookup, "map_lookup", Domain::Both, 2, {A::Uniform, A::Any}, 1, true,
               false, ResultTag::MapDependent},
    HelperInfo{HelperId::MapUpdate, "map_update", Domain::Both, 3,
               {A::Uniform, A::MapKey, A::Aggregated}, 2, true, false, ResultTag::None},
    HelperInfo{HelperId::MapSet, "map_set", Domain::Host, 3, {A::Uniform, A::MapKey, A::Any}, 2,
               true, false, ResultTag::None},
    HelperInfo{HelperId::WarpReduceAdd, "warp_reduce_add", Domain::Device, 1, {A::Any}, 1, false,
               false, ResultTag::Collective},
    HelperInfo{HelperId::WarpReduceMin, "warp_reduce_min", Domain::Device, 1, {A::Any}, 1, false,
               false, ResultTag::Collective},
    HelperInfo{HelperId::WarpReduceMax, "warp_reduce_max", Domain::Device, 1, {A::Any}, 1, false,
               false, ResultTag::Collective},
    HelperInfo{HelperId::WarpBallot, "warp_ballot", Domain::Device, 1, {A::Any}, 1, false, false,
               ResultTag::Collective},
    HelperInfo{HelperId::GdevMemPrefetch, "gdev_mem_prefetch", Domain::Device, 1, {A::Uniform}, 4,
               false, false, ResultTag::Uniform},
    HelperInfo{HelperId::MoveHead, "bpf_gpu_move_head", Domain::Host, 1, {A::Any}, 4, false,
               false, ResultTag::Uniform},
    HelperInfo{HelperId::MoveTail, "bpf_gpu_move_tail", Domain::Host, 1, {A::Any}, 4, false,
               false, ResultTag::Uniform},
    HelperInfo{HelperId::SetAttr, "bpf_gpu_set_attr", Domain::Host, 2, {A::Any, A::Any}, 4, false,
               false, ResultTag::Uniform},
    HelperInfo{HelperId::RejectBind, "bpf_gpu_reject_bind", Domain::Host, 0, {}, 1, false, false,
               ResultTag::Uniform},
    HelperInfo{HelperId::SchedPreempt, "gdrv_sched_preempt", Domain::Host, 1, {A::Any}, 1, false,
               false, ResultTag::Uniform},
    HelperInfo{HelperId::KtimeGetNs, "ktime_get_ns", Domain::Both, 0, {}, 1, false, false,
               ResultTag::Uniform},
    HelperInfo{HelperId::GridSync, "gdev_grid_sync", Domain::Device, 0, {}, 1, false, true,
               ResultTag::Uniform},
    HelperInfo{HelperId::ThreadfenceSystem, "gdev_threadfence_system", Domain::Device, 0, {}, 1,
               false, true, ResultTag::Uniform},
    HelperInfo{HelperId::TraceEmit, "trace_emit", Domain::Both, 2, {A::Uniform, A::Uniform}, 1,
               false, false, ResultTag::Uniform},
    HelperInfo{HelperId::PrefetchPages, "bpf_gpu_prefetch_pages", Domain::Host, 2,
               {A::Any, A::Any}, 4, false, false, ResultTag::Uniform},
};

}  // namespace

const HelperInfo* find_helper(int32_t id) {
  for (const auto& h : kHelpers)
    if (static_cast<int32_t>(h.id) == id) return &h;
  return nullptr;
}

const HelperInfo* find_helper(std::string_view name) {
  for (const auto& h : kHelpers)
    if (h.name == name) return &h;
  return nullptr;
}

std::span<const HelperInfo> all_helpers() { return kHelpers; }

}  // namespace gpux
