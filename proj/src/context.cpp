#include "gpux/context.hpp"

#include <array>
#include <map>
#include <string>

namespace gpux {

std::string_view to_string(Uniformity u) {
  switch (u) {
    case Uniformity::Uninit: return "UNINIT";
    case Uniformity::Uniform: return "UNIFORM";
    case Uniformity::LaneVarying: return "LANE_VARYING";
  }
  return "?";
}

std::size_t ContextSchema::size() const {
  std::size_t end = 0;
  for (const auto& f : fields) end = std::max<std::size_t>(end, f.offset + f.width);
  return end;
}

const ContextField* ContextSchema::find(std::string_view name) const {
  for (const auto& f : fields)
    if (f.name == name) return &f;
  return nullptr;
}

const ContextField* ContextSchema::covering(int64_t offset, unsigned width) const {
  for (const auto& f : fields)
    if (offset >= f.offset && offset + width <= static_cast<int64_t>(f.offset) + f.width) return &f;
  return nullptr;
}

int ContextSchema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < fields.size(); ++i)
    if (fields[i].name == name) return static_cast<int>(i);
  return -1;
}

const ContextField& ContextSchema::decision() const {
  for (const auto& f : fields)
    if (f.mutability == Mutability::RW) return f;
  throw IrError("schema without decision field: " + hook);
}

namespace {

struct FieldDecl {
  const char* name;
  Uniformity u;
};

constexpr auto U = Uniformity::Uniform;
constexpr auto LV = Uniformity::LaneVarying;

ContextSchema make(std::string hook, HookType type, std::initializer_list<FieldDecl> decls) {
  ContextSchema s;
  s.hook = std::move(hook);
  s.hook_type = type;
  uint16_t off = 0;
  for (const auto& d : decls) {
    ContextField f;
    f.name = d.name;
    f.offset = off;
    f.width = 8;
    f.uniformity = d.u;
    f.mutability = f.name == "decision" ? Mutability::RW : Mutability::RO;
    s.fields.push_back(std::move(f));
    off = static_cast<uint16_t>(off + 8);
  }
  return s;
}

const std::map<std::string, ContextSchema, std::less<>>& registry() {
  static const auto* reg = [] {
    auto* m = new std::map<std::string, ContextSchema, std::less<>>();
    auto add = [&](ContextSchema s) { m->emplace(s.hook, std::move(s)); };
    const auto mem = HookType::GpuMem;
    add(make("gpu_activate", mem,
             {{"region_id", U}, {"tenant", U}, {"base_addr", U}, {"page", U}, {"time_ns", U},
              {"resident_pages", U}, {"decision", U}}));
    add(make("gpu_access", mem,
             {{"region_id", U}, {"page", U}, {"fault_addr", U}, {"tenant", U}, {"is_fault", U},
              {"access_count", U}, {"time_ns", U}, {"decision", U}}));
    add(make("gpu_evict_prepare", mem,
             {{"region_id", U}, {"tenant", U}, {"access_count", U}, {"last_access_ns", U},
              {"resident_pages", U}, {"needed_bytes", U}, {"time_ns", U}, {"position", U},
              {"tenant_resident_bytes", U}, {"decision", U}}));
    add(make("gpu_prefetch", mem,
             {{"region_id", U}, {"page", U}, {"fault_addr", U}, {"tenant", U}, {"source", U},
              {"time_ns", U}, {"decision", U}}));
    const auto sched = HookType::GpuSched;
    for (const char* h : {"task_init", "task_destroy"})
      add(make(h, sched,
               {{"queue_id", U}, {"tenant", U}, {"tenant_class", U}, {"priority", U},
                {"timeslice_us", U}, {"interleave_freq", U}, {"pending", U}, {"time_us", U},
                {"decision", U}}));
    const auto dev = HookType::GpuDev;
    add(make("access", dev,
             {{"kernel_id", U}, {"block_id", U}, {"warp_id", U}, {"sm_id", U},
              {"access_size", U}, {"lane_id", LV}, {"lane_addr", LV}, {"decision", U}}));
    add(make("fence", dev,
             {{"kernel_id", U}, {"block_id", U}, {"warp_id", U}, {"sm_id", U}, {"lane_id", LV},
              {"decision", U}}));
    for (const char* h : {"enter", "exit", "probe", "retprobe", "should_try_steal"})
      add(make(h, dev,
               {{"worker_id", U}, {"sm_id", U}, {"warp_id", U}, {"unit_id", U},
                {"unit_cost_us", U}, {"local_queue_len", U}, {"steals_performed", U},
                {"stolen_work_us", U}, {"time_us", U}, {"lane_id", LV}, {"decision", U}}));
    return m;
  }();
  return *reg;
}

constexpr std::array<std::string_view, 13> kHooks = {
    "gpu_activate", "gpu_access", "gpu_evict_prepare", "gpu_prefetch", "task_init",
    "task_destroy", "access", "fence", "enter", "exit", "probe", "retprobe",
    "should_try_steal"};

static_assert(sizeof(MemActivateCtx) == 7 * 8);
static_assert(sizeof(MemAccessCtx) == 8 * 8);
static_assert(sizeof(MemEvictCtx) == 10 * 8);
static_assert(sizeof(MemPrefetchCtx) == 7 * 8);
static_assert(sizeof(SchedQueueCtx) == 9 * 8);
static_assert(sizeof(DevMemAccessCtx) == 8 * 8);
static_assert(sizeof(DevFenceCtx) == 6 * 8);
static_assert(sizeof(DevBlockCtx) == 11 * 8);

}  // namespace

const ContextSchema& context_schema(std::string_view hook) {
  const auto& reg = registry();
  auto it = reg.find(hook);
  if (it == reg.end()) throw IrError("unknown hook: " + std::string(hook));
  return it->second;
}

bool is_known_hook(std::string_view hook) { return registry().count(hook) != 0; }

HookType hook_type_of(std::string_view hook) { return context_schema(hook).hook_type; }

std::span<const std::string_view> known_hooks() { return kHooks; }

}  // namespace gpux
