#include "gpux/device_exec.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>

#include "gpux/helpers.hpp"

namespace gpux {

std::string_view to_string(ExecMode m) { return m == ExecMode::PerLane ? "PER_LANE" : "WARP_LEADER"; }

WarpContext WarpContext::make(std::string hook, uint32_t sm_id, uint32_t warp_id, uint32_t active_mask) {
  WarpContext c;
  c.hook = std::move(hook);
  c.sm_id = sm_id;
  c.warp_id = warp_id;
  c.active_mask = active_mask;
  const auto& s = context_schema(c.hook);
  if (s.find("sm_id")) c.uniform_values["sm_id"] = sm_id;
  if (s.find("warp_id")) c.uniform_values["warp_id"] = warp_id;
  if (s.find("lane_id")) {
    LaneArray ids{};
    for (int l = 0; l < kWarpSize; ++l) ids[static_cast<std::size_t>(l)] = static_cast<uint64_t>(l);
    c.lane_values["lane_id"] = ids;
  }
  return c;
}

std::vector<uint8_t> WarpContext::lane_bytes(int lane) const {
  const auto& s = context_schema(hook);
  std::vector<uint8_t> bytes(s.size(), 0);
  auto put = [&](const ContextField& f, uint64_t v) { std::memcpy(bytes.data() + f.offset, &v, std::min<std::size_t>(f.width, 8)); };
  for (const auto& [name, v] : uniform_values) {
    const auto* f = s.find(name);
    if (!f) throw IrError("context field '" + name + "' not in schema " + hook);
    put(*f, v);
  }
  for (const auto& [name, vals] : lane_values) {
    const auto* f = s.find(name);
    if (!f) throw IrError("context field '" + name + "' not in schema " + hook);
    if (f->uniformity != Uniformity::LaneVarying)
      throw IrError("per-lane values given for uniform field '" + name + "'");
    put(*f, vals.at(static_cast<std::size_t>(lane)));
  }
  return bytes;
}

uint64_t aggregate(const LaneArray& values, uint32_t mask, AggOp op) {
  uint64_t acc = 0;
  bool first = true;
  for (int l = 0; l < kWarpSize; ++l) {
    if (!(mask >> l & 1u)) continue;
    uint64_t v = values[static_cast<std::size_t>(l)];
    switch (op) {
      case AggOp::Sum: acc += v; break;
      case AggOp::Min: acc = first ? v : std::min(acc, v); break;
      case AggOp::Max: acc = first ? v : std::max(acc, v); break;
      case AggOp::Ballot:
        if (v != 0) acc |= uint64_t{1} << l;
        break;
    }
    first = false;
  }
  return acc;
}

int leader_lane(uint32_t mask) { return mask == 0 ? -1 : std::countr_zero(mask); }

namespace {

AggOp collective_op(HelperId id) {
  switch (id) {
    case HelperId::WarpReduceMin: return AggOp::Min;
    case HelperId::WarpReduceMax: return AggOp::Max;
    case HelperId::WarpBallot: return AggOp::Ballot;
    default: return AggOp::Sum;
  }
}

// Uniform values pass through; lane-varying ones are combined.
uint64_t combine_decision(const LaneArray& r0, uint32_t mask, AggOp op) {
  int lead = leader_lane(mask);
  uint64_t v = r0[static_cast<std::size_t>(lead)];
  for (int l = 0; l < kWarpSize; ++l)
    if ((mask >> l & 1u) && r0[static_cast<std::size_t>(l)] != v) return aggregate(r0, mask, op);
  return v;
}

void check_call(const PolicyProgram& handler, const WarpContext& ctx, bool allow_unverified) {
  if (!handler.verified && !allow_unverified) throw ExecError("handler is not verified");
  if (handler.hook_type != HookType::GpuDev) throw ExecError("not a device handler");
  if (ctx.hook != handler.handler_name)
    throw IrError("context for '" + ctx.hook + "' does not match handler '" + handler.handler_name + "'");
  if (ctx.active_mask == 0) throw ExecError("empty active mask");
}

HookResult run_per_lane(const PolicyProgram& prog, const WarpContext& ctx, Runtime& maps,
                        const RunHookOptions& opts) {
  HookResult res;
  std::vector<int> lanes;
  for (int l = 0; l < kWarpSize; ++l)
    if (ctx.active_mask >> l & 1u) lanes.push_back(l);
  std::vector<std::vector<uint8_t>> ctx_bytes;
  ctx_bytes.reserve(lanes.size());
  std::vector<Machine> machines;
  machines.reserve(lanes.size());
  for (int l : lanes) {
    ctx_bytes.push_back(ctx.lane_bytes(l));
    machines.emplace_back(prog, std::span<uint8_t>(ctx_bytes.back()), maps, opts.limits);
  }

  // Lockstep: every running lane advances one instruction per round. When no
  // lane can advance, lanes parked at the same collective are reduced
  // together and resumed.
  while (true) {
    bool running = false, waiting = false;
    for (auto& m : machines) {
      if (m.status() == Machine::Status::Running) {
        m.step();
        running = true;
      }
    }
    if (running) continue;
    std::map<std::size_t, uint32_t> groups;
    for (std::size_t i = 0; i < machines.size(); ++i)
      if (machines[i].status() == Machine::Status::Collective) {
        groups[machines[i].pc()] |= 1u << lanes[i];
        waiting = true;
      }
    if (!waiting) break;
    for (auto [pc, mask] : groups) {
      LaneArray args{};
      HelperId id{};
      for (std::size_t i = 0; i < machines.size(); ++i)
        if (mask >> lanes[i] & 1u) {
          args[static_cast<std::size_t>(lanes[i])] = machines[i].pending_arg();
          id = machines[i].pending_helper();
        }
      uint64_t r = aggregate(args, mask, collective_op(id));
      for (std::size_t i = 0; i < machines.size(); ++i)
        if (mask >> lanes[i] & 1u) machines[i].resume(r);
    }
  }

  LaneArray r0{};
  for (std::size_t i = 0; i < machines.size(); ++i) {
    auto l = static_cast<std::size_t>(lanes[i]);
    const auto& m = machines[i];
    r0[l] = static_cast<uint64_t>(m.return_value());
    res.effects.insert(res.effects.end(), m.effects().begin(), m.effects().end());
    res.lane_branches[l] = m.branches();
    res.instructions += m.counters().instructions;
  }
  res.leader = leader_lane(ctx.active_mask);
  res.decision = static_cast<int64_t>(combine_decision(r0, ctx.active_mask, prog.aggregation));
  res.cost_ns = res.instructions * opts.cost.ns_per_instruction;
  return res;
}

// One interpretation for the whole warp. Registers and stack hold a value per
// lane so lane-local contributions stay exact; control follows the leader.
class WarpMachine {
 public:
  WarpMachine(const PolicyProgram& prog, const WarpContext& ctx, Runtime& rt, const RunHookOptions& opts)
      : prog_(prog), mask_(ctx.active_mask), leader_(leader_lane(ctx.active_mask)), rt_(rt), opts_(opts) {
    for (int l = 0; l < kWarpSize; ++l)
      if (mask_ >> l & 1u) ctx_[static_cast<std::size_t>(l)] = ctx.lane_bytes(l);
  }

  HookResult run();

 private:
  bool active(int l) const { return (mask_ >> l & 1u) != 0; }
  uint64_t lead(const LaneArray& a) const { return a[static_cast<std::size_t>(leader_)]; }
  LaneArray broadcast(uint64_t v) const {
    LaneArray a;
    a.fill(v);
    return a;
  }
  LaneArray src_of(const Instruction& in) const {
    return in.reg_source() ? regs_.at(in.src) : broadcast(static_cast<uint64_t>(static_cast<int64_t>(in.imm)));
  }
  uint8_t* address(int lane, const Instruction& in);
  void charge_memory() {
    if (++counters_.memory_ops > opts_.limits.max_memory_ops) throw BudgetExceeded("memory-op budget exceeded");
  }
  void call(const Instruction& in);
  LaneArray lookup_per_lane(std::size_t slot, const LaneArray& keys) {
    LaneArray out{};
    std::map<uint64_t, uint64_t> seen;
    for (int l = 0; l < kWarpSize; ++l) {
      if (!active(l)) continue;
      auto k = keys[static_cast<std::size_t>(l)];
      auto it = seen.find(k);
      if (it == seen.end()) it = seen.emplace(k, static_cast<uint64_t>(rt_.map_lookup(slot, k))).first;
      out[static_cast<std::size_t>(l)] = it->second;
    }
    return out;
  }

  const PolicyProgram& prog_;
  uint32_t mask_;
  int leader_;
  Runtime& rt_;
  const RunHookOptions& opts_;
  std::array<std::vector<uint8_t>, kWarpSize> ctx_;
  std::array<LaneArray, kNumRegisters> regs_{};
  std::array<std::array<uint8_t, kStackSize>, kWarpSize> stack_{};
  std::size_t pc_ = 0;
  std::vector<Effect> effects_;
  ExecCounters counters_;
};

uint8_t* WarpMachine::address(int lane, const Instruction& in) {
  const int64_t w = in.width();
  int64_t off = in.offset;
  auto l = static_cast<std::size_t>(lane);
  if (in.space() == Space::Stack) {
    if (off < -kStackSize || off + w > 0) throw ExecError("stack access out of bounds");
    return stack_[l].data() + kStackSize + off;
  }
  if (off < 0 || off + w > static_cast<int64_t>(ctx_[l].size())) throw ExecError("context access out of bounds");
  return ctx_[l].data() + off;
}

void WarpMachine::call(const Instruction& in) {
  const HelperInfo* h = find_helper(in.imm);
  if (!h) throw ExecError("unknown helper id " + std::to_string(in.imm));
  if (!domain_allows(Domain::Device, h->domain)) throw ExecError(std::string(h->name) + " is host-only");
  ++counters_.helper_calls;
  counters_.helper_cost += h->budget_cost;
  if (counters_.helper_cost > opts_.limits.max_helper_cost) throw BudgetExceeded("helper-call budget exceeded");
  if (h->memory_op) charge_memory();

  uint64_t ret = 0;
  std::array<uint64_t, 5> args{};
  if (is_collective(h->id)) {
    args[0] = lead(regs_[1]);
    ret = aggregate(regs_[1], mask_, collective_op(h->id));
  } else {
    for (std::size_t a = 0; a < h->num_args; ++a) {
      const auto& vals = regs_[a + 1];
      args[a] = h->args[a] == ArgRule::Aggregated ? aggregate(vals, mask_, prog_.aggregation) : lead(vals);
    }
    if (h->id == HelperId::MapLookup || h->id == HelperId::MapUpdate || h->id == HelperId::MapSet)
      if (args[0] >= prog_.map_refs.size()) throw ExecError("undeclared map slot");
    if (h->id == HelperId::MapLookup) {
      // Reads have no side effects, so each lane may look up its own key.
      regs_[0] = lookup_per_lane(args[0], regs_[2]);
      ret = lead(regs_[0]);
      effects_.push_back(HelperCall{h->id, args, ret});
      auto r0 = regs_[0];
      for (std::size_t r = 1; r <= 5; ++r) regs_[r] = broadcast(0);
      regs_[0] = r0;
      return;
    }
    switch (h->id) {
      case HelperId::MapUpdate: rt_.map_add(args[0], args[1], static_cast<int64_t>(args[2])); break;
      default: ret = rt_.kfunc(h->id, std::span<const uint64_t, 5>(args)); break;
    }
  }
  effects_.push_back(HelperCall{h->id, args, ret});
  regs_[0] = broadcast(ret);
  for (std::size_t r = 1; r <= 5; ++r) regs_[r] = broadcast(0);
}

HookResult WarpMachine::run() {
  const auto& insts = prog_.instructions;
  while (true) {
    if (pc_ >= insts.size()) throw ExecError("fell off the end of the program");
    if (++counters_.instructions > opts_.limits.max_instructions) throw BudgetExceeded("instruction budget exceeded");
    const Instruction& in = insts[pc_];
    auto check_dst = [&] {
      if (in.dst >= kFrameRegister) throw ExecError("write to read-only register");
    };

    if (is_alu(in.op)) {
      check_dst();
      auto src = src_of(in);
      auto& d = regs_[in.dst];
      for (int l = 0; l < kWarpSize; ++l)
        if (active(l)) d[static_cast<std::size_t>(l)] = alu_apply(in.op, d[static_cast<std::size_t>(l)], src[static_cast<std::size_t>(l)]);
      ++pc_;
      continue;
    }
    if (is_jump(in.op)) {
      bool taken = in.op == Op::Ja || branch_taken(in.op, lead(regs_.at(in.dst)), lead(src_of(in)));
      auto next = static_cast<int64_t>(pc_) + 1 + (taken ? in.offset : 0);
      if (next < 0 || next >= static_cast<int64_t>(insts.size())) throw ExecError("jump out of program");
      pc_ = static_cast<std::size_t>(next);
      continue;
    }
    switch (in.op) {
      case Op::Ld: {
        check_dst();
        charge_memory();
        auto& d = regs_[in.dst];
        for (int l = 0; l < kWarpSize; ++l) {
          if (!active(l)) continue;
          uint64_t v = 0;
          std::memcpy(&v, address(l, in), in.width());
          d[static_cast<std::size_t>(l)] = v;
        }
        break;
      }
      case Op::St: {
        charge_memory();
        auto src = src_of(in);
        if (in.space() == Space::Ctx) {
          // Context stores are warp-uniform; the leader's value is broadcast.
          uint64_t v = lead(src);
          for (int l = 0; l < kWarpSize; ++l)
            if (active(l)) std::memcpy(address(l, in), &v, in.width());
          uint64_t masked = in.width() == 8 ? v : (v & ((uint64_t{1} << (8 * in.width())) - 1));
          effects_.push_back(CtxWrite{static_cast<uint16_t>(in.offset), static_cast<uint8_t>(in.width()), masked});
        } else {
          for (int l = 0; l < kWarpSize; ++l)
            if (active(l)) std::memcpy(address(l, in), &src[static_cast<std::size_t>(l)], in.width());
        }
        break;
      }
      case Op::LdMap: {
        check_dst();
        if (static_cast<std::size_t>(in.imm) >= prog_.map_refs.size()) throw ExecError("undeclared map slot");
        charge_memory();
        regs_[in.dst] = lookup_per_lane(static_cast<std::size_t>(in.imm), regs_.at(in.src));
        break;
      }
      case Op::XAdd: {
        if (static_cast<std::size_t>(in.imm) >= prog_.map_refs.size()) throw ExecError("undeclared map slot");
        charge_memory();
        uint64_t delta = aggregate(regs_.at(in.src), mask_, prog_.aggregation);
        rt_.map_add(static_cast<std::size_t>(in.imm), lead(regs_.at(in.dst)), static_cast<int64_t>(delta));
        break;
      }
      case Op::Call:
        call(in);
        break;
      case Op::Exit: {
        HookResult res;
        res.leader = leader_;
        res.decision = static_cast<int64_t>(combine_decision(regs_[0], mask_, prog_.aggregation));
        res.effects = std::move(effects_);
        res.instructions = counters_.instructions;
        res.cost_ns = counters_.instructions * opts_.cost.ns_per_instruction + opts_.cost.aggregation_ns;
        return res;
      }
      default:
        throw ExecError("bad opcode");
    }
    ++pc_;
  }
}

}  // namespace

HookResult run_hook(const PolicyProgram& handler, const WarpContext& ctx, Runtime& maps, ExecMode mode,
                    const RunHookOptions& opts) {
  check_call(handler, ctx, opts.allow_unverified);
  HookResult res = mode == ExecMode::PerLane ? run_per_lane(handler, ctx, maps, opts)
                                             : WarpMachine(handler, ctx, maps, opts).run();
  for (int l = 0; l < kWarpSize; ++l)
    if (ctx.active_mask >> l & 1u) res.lane_decisions[static_cast<std::size_t>(l)] = static_cast<uint64_t>(res.decision);
  return res;
}

std::string_view to_string(KernelOpKind k) {
  switch (k) {
    case KernelOpKind::Compute: return "COMPUTE";
    case KernelOpKind::Load: return "LOAD";
    case KernelOpKind::Fence: return "FENCE";
  }
  return "?";
}

KernelSpec parse_kernel_spec(std::string_view text) {
  KernelSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  auto fail = [&](const std::string& m) { throw IrError("kernel spec line " + std::to_string(number) + ": " + m); };
  while (std::getline(in, line)) {
    ++number;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string kind, pattern, repeat;
    if (!(ls >> kind)) continue;
    if (kind == "kernel") {
      if (!(ls >> spec.name)) fail("kernel needs a name");
      continue;
    }
    KernelOp op;
    if (kind == "COMPUTE") op.kind = KernelOpKind::Compute;
    else if (kind == "LOAD") op.kind = KernelOpKind::Load;
    else if (kind == "FENCE") op.kind = KernelOpKind::Fence;
    else fail("unknown op kind '" + kind + "'");
    if (!(ls >> pattern)) pattern = "-";
    if (ls >> repeat) {
      try {
        op.repeat = static_cast<uint32_t>(std::stoul(repeat));
      } catch (const std::exception&) {
        fail("bad repeat count '" + repeat + "'");
      }
      if (op.repeat == 0) fail("repeat must be positive");
    }
    if (pattern != "-") {
      std::istringstream ps(pattern);
      std::string kv;
      while (std::getline(ps, kv, ',')) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) fail("pattern entries are key=value");
        auto key = kv.substr(0, eq);
        uint64_t v = 0;
        try {
          v = std::stoull(kv.substr(eq + 1), nullptr, 0);
        } catch (const std::exception&) {
          fail("bad value in '" + kv + "'");
        }
        if (key == "base") op.base = v;
        else if (key == "stride") op.stride = v;
        else if (key == "lane_stride") op.lane_stride = v;
        else if (key == "cycles") op.cycles = v;
        else fail("unknown pattern key '" + key + "'");
      }
    }
    spec.ops.push_back(op);
  }
  return spec;
}

std::string format_kernel_spec(const KernelSpec& spec) {
  std::ostringstream os;
  if (!spec.name.empty()) os << "kernel " << spec.name << "\n";
  for (const auto& op : spec.ops) {
    os << to_string(op.kind) << " ";
    if (op.kind == KernelOpKind::Load)
      os << "base=" << op.base << ",stride=" << op.stride << ",lane_stride=" << op.lane_stride;
    else if (op.kind == KernelOpKind::Compute)
      os << "cycles=" << op.cycles;
    else
      os << "-";
    os << " " << op.repeat << "\n";
  }
  return os.str();
}

HookPoint parse_hook_point(std::string_view s) {
  if (s == "entry") return HookPoint::Entry;
  if (s == "mem_instruction") return HookPoint::MemInstruction;
  if (s == "fence" || s == "phase_boundary") return HookPoint::Fence;
  throw IrError("unknown hook point '" + std::string(s) + "'");
}

std::string_view hook_name(HookPoint p) {
  switch (p) {
    case HookPoint::Entry: return "enter";
    case HookPoint::MemInstruction: return "access";
    case HookPoint::Fence: return "fence";
  }
  return "?";
}

std::size_t InstrumentedKernel::hook_count() const {
  return static_cast<std::size_t>(std::count_if(steps.begin(), steps.end(), [](const auto& s) { return s.is_hook; }));
}

InstrumentedKernel instrument(const KernelSpec& spec, const std::vector<HookPoint>& points) {
  auto want = [&](HookPoint p) { return std::find(points.begin(), points.end(), p) != points.end(); };
  InstrumentedKernel k;
  k.spec = spec;
  for (std::size_t i = 0; i < spec.ops.size(); ++i) {
    const auto& op = spec.ops[i];
    if (i == 0 && want(HookPoint::Entry)) k.steps.push_back({true, HookPoint::Entry, 0});
    if (op.kind == KernelOpKind::Load && want(HookPoint::MemInstruction))
      k.steps.push_back({true, HookPoint::MemInstruction, i});
    if (op.kind == KernelOpKind::Fence && want(HookPoint::Fence)) k.steps.push_back({true, HookPoint::Fence, i});
    k.steps.push_back({false, HookPoint::Entry, i});
  }
  return k;
}

KernelRunStats run_kernel(const InstrumentedKernel& kernel, const KernelLaunchConfig& cfg,
                          const std::map<std::string, const PolicyProgram*>& handlers,
                          const std::function<Runtime&(uint32_t sm)>& runtime_for,
                          const std::function<void(uint32_t warp, uint64_t addr)>& on_load) {
  KernelRunStats stats;
  const auto& ops = kernel.spec.ops;
  for (uint32_t w = 0; w < cfg.warps; ++w) {
    const uint32_t sm = cfg.sm_count == 0 ? 0 : w % cfg.sm_count;
    auto invoke = [&](HookPoint p, const KernelOp* op, uint32_t rep) {
      std::string name(hook_name(p));
      auto it = handlers.find(name);
      if (it == handlers.end() || it->second == nullptr) return;
      auto ctx = WarpContext::make(name, sm, w, cfg.active_mask);
      const auto& schema = context_schema(name);
      if (schema.find("kernel_id")) ctx.uniform_values["kernel_id"] = cfg.kernel_id;
      if (schema.find("block_id")) ctx.uniform_values["block_id"] = w;
      if (schema.find("worker_id")) ctx.uniform_values["worker_id"] = w;
      if (p == HookPoint::MemInstruction && op) {
        ctx.uniform_values["access_size"] = 4;
        LaneArray addrs{};
        for (int l = 0; l < kWarpSize; ++l)
          addrs[static_cast<std::size_t>(l)] = op->base + rep * op->stride + static_cast<uint64_t>(l) * op->lane_stride;
        ctx.lane_values["lane_addr"] = addrs;
      }
      auto r = run_hook(*it->second, ctx, runtime_for(sm), cfg.mode);
      ++stats.hook_calls;
      ++stats.calls_per_hook[name];
      stats.hook_cost_ns += r.cost_ns;
    };
    std::size_t s = 0;
    while (s < kernel.steps.size()) {
      const auto& step = kernel.steps[s];
      if (step.is_hook && step.point == HookPoint::Entry) {
        invoke(HookPoint::Entry, nullptr, 0);
        ++s;
        continue;
      }
      // Hooks attached to an op fire on every repetition of that op.
      std::vector<HookPoint> before;
      while (s < kernel.steps.size() && kernel.steps[s].is_hook) before.push_back(kernel.steps[s++].point);
      if (s >= kernel.steps.size()) break;
      const auto& op = ops[kernel.steps[s].op_index];
      for (uint32_t rep = 0; rep < op.repeat; ++rep) {
        for (auto p : before) invoke(p, &op, rep);
        if (op.kind == KernelOpKind::Load) {
          for (int l = 0; l < kWarpSize; ++l) {
            if (!(cfg.active_mask >> l & 1u)) continue;
            ++stats.loads;
            if (on_load) on_load(w, op.base + rep * op.stride + static_cast<uint64_t>(l) * op.lane_stride);
          }
        }
      }
      ++s;
    }
  }
  return stats;
}

}  // namespace gpux
