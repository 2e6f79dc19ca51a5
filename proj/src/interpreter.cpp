#include "gpux/interpreter.hpp"

#include <bit>
#include <cstring>
#include <string>

namespace gpux {

uint64_t Runtime::kfunc(HelperId, std::span<const uint64_t, 5>) { return 0; }

std::map<uint64_t, int64_t>& LocalMaps::get(std::size_t slot) {
  if (slot >= maps_.size()) maps_.resize(slot + 1);
  return maps_[slot];
}

int64_t LocalMaps::map_lookup(std::size_t slot, uint64_t key) {
  if (slot >= maps_.size()) return 0;
  auto it = maps_[slot].find(key);
  return it == maps_[slot].end() ? 0 : it->second;
}

void LocalMaps::map_add(std::size_t slot, uint64_t key, int64_t delta) {
  auto& v = get(slot)[key];
  v = static_cast<int64_t>(static_cast<uint64_t>(v) + static_cast<uint64_t>(delta));
}

void LocalMaps::map_set(std::size_t slot, uint64_t key, int64_t value) { get(slot)[key] = value; }

uint64_t collective_single_lane(HelperId id, uint64_t arg) {
  if (id == HelperId::WarpBallot) return arg != 0 ? 1 : 0;
  return arg;
}

Machine::Machine(const PolicyProgram& prog, std::span<uint8_t> ctx, Runtime& rt, ExecLimits limits)
    : prog_(prog), ctx_(ctx), rt_(rt), limits_(limits) {}

void Machine::charge_memory() {
  if (++counters_.memory_ops > limits_.max_memory_ops)
    throw BudgetExceeded("memory-op budget exceeded");
}

void Machine::check_map(uint64_t slot) const {
  if (slot >= prog_.map_refs.size()) throw ExecError("undeclared map slot " + std::to_string(slot));
}

uint8_t* Machine::address(const Instruction& in) {
  const int64_t w = in.width();
  if (in.space() == Space::Stack) {
    int64_t off = in.offset;
    if (off < -kStackSize || off + w > 0)
      throw ExecError("stack access out of bounds at pc " + std::to_string(pc_));
    return stack_.data() + kStackSize + off;
  }
  int64_t off = in.offset;
  if (off < 0 || off + w > static_cast<int64_t>(ctx_.size()))
    throw ExecError("context access out of bounds at pc " + std::to_string(pc_));
  return ctx_.data() + off;
}

uint64_t Machine::load(const Instruction& in) {
  const uint8_t* p = address(in);
  uint64_t v = 0;
  std::memcpy(&v, p, in.width());
  return v;
}

void Machine::store(const Instruction& in, uint64_t value) {
  uint8_t* p = address(in);
  std::memcpy(p, &value, in.width());
  if (in.space() == Space::Ctx) {
    uint64_t masked = in.width() == 8 ? value : (value & ((uint64_t{1} << (8 * in.width())) - 1));
    effects_.push_back(CtxWrite{static_cast<uint16_t>(in.offset), static_cast<uint8_t>(in.width()),
                                masked});
  }
}

void Machine::finish_call(HelperId id, const std::array<uint64_t, 5>& args, uint64_t ret) {
  regs_[0] = ret;
  for (int r = 1; r <= 5; ++r) regs_[static_cast<std::size_t>(r)] = 0;
  effects_.push_back(HelperCall{id, args, ret});
  ++pc_;
}

void Machine::call(const Instruction& in) {
  const HelperInfo* h = find_helper(in.imm);
  if (!h) throw ExecError("unknown helper id " + std::to_string(in.imm));
  if (!domain_allows(domain_of(prog_.hook_type), h->domain))
    throw ExecError(std::string(h->name) + " is not callable from this program type");
  ++counters_.helper_calls;
  counters_.helper_cost += h->budget_cost;
  if (counters_.helper_cost > limits_.max_helper_cost)
    throw BudgetExceeded("helper-call budget exceeded");
  if (h->memory_op) charge_memory();

  std::array<uint64_t, 5> args{};
  for (std::size_t i = 0; i < h->num_args; ++i) args[i] = regs_[i + 1];
  if (h->id == HelperId::MapLookup || h->id == HelperId::MapUpdate || h->id == HelperId::MapSet)
    check_map(args[0]);

  if (is_collective(h->id)) {
    pending_ = h->id;
    pending_args_ = args;
    status_ = Status::Collective;
    return;
  }
  uint64_t ret = 0;
  switch (h->id) {
    case HelperId::MapLookup:
      ret = static_cast<uint64_t>(rt_.map_lookup(args[0], args[1]));
      break;
    case HelperId::MapUpdate:
      rt_.map_add(args[0], args[1], static_cast<int64_t>(args[2]));
      break;
    case HelperId::MapSet:
      rt_.map_set(args[0], args[1], static_cast<int64_t>(args[2]));
      break;
    default:
      ret = rt_.kfunc(h->id, std::span<const uint64_t, 5>(args));
      break;
  }
  finish_call(h->id, args, ret);
}

void Machine::resume(uint64_t result) {
  if (status_ != Status::Collective) throw ExecError("resume without pending collective");
  status_ = Status::Running;
  finish_call(pending_, pending_args_, result);
}

Machine::Status Machine::step() {
  if (status_ != Status::Running) return status_;
  const auto& insts = prog_.instructions;
  if (pc_ >= insts.size()) throw ExecError("fell off the end of the program");
  if (++counters_.instructions > limits_.max_instructions)
    throw BudgetExceeded("instruction budget exceeded");

  const Instruction& in = insts[pc_];
  auto src_val = [&] {
    return in.reg_source() ? regs_.at(in.src) : static_cast<uint64_t>(static_cast<int64_t>(in.imm));
  };
  auto check_dst = [&] {
    if (in.dst >= kFrameRegister) throw ExecError("write to read-only register r" + std::to_string(in.dst));
  };

  if (is_alu(in.op)) {
    check_dst();
    regs_[in.dst] = alu_apply(in.op, regs_[in.dst], src_val());
    ++pc_;
  } else if (is_jump(in.op)) {
    bool taken = in.op == Op::Ja || branch_taken(in.op, regs_.at(in.dst), src_val());
    if (in.op != Op::Ja) branches_.push_back({pc_, taken});
    auto next = static_cast<int64_t>(pc_) + 1 + (taken ? in.offset : 0);
    if (next < 0 || next >= static_cast<int64_t>(insts.size()))
      throw ExecError("jump out of program at pc " + std::to_string(pc_));
    pc_ = static_cast<std::size_t>(next);
  } else {
    switch (in.op) {
      case Op::Ld:
        check_dst();
        charge_memory();
        regs_[in.dst] = load(in);
        ++pc_;
        break;
      case Op::St:
        charge_memory();
        store(in, src_val());
        ++pc_;
        break;
      case Op::LdMap:
        check_dst();
        check_map(static_cast<uint64_t>(in.imm));
        charge_memory();
        regs_[in.dst] = static_cast<uint64_t>(rt_.map_lookup(static_cast<std::size_t>(in.imm), regs_.at(in.src)));
        ++pc_;
        break;
      case Op::XAdd:
        check_map(static_cast<uint64_t>(in.imm));
        charge_memory();
        rt_.map_add(static_cast<std::size_t>(in.imm), regs_.at(in.dst), static_cast<int64_t>(regs_.at(in.src)));
        ++pc_;
        break;
      case Op::Call:
        call(in);
        break;
      case Op::Exit:
        status_ = Status::Exited;
        break;
      default:
        throw ExecError("bad opcode at pc " + std::to_string(pc_));
    }
  }
  return status_;
}

ExecResult interpret(const PolicyProgram& prog, std::span<uint8_t> ctx, Runtime& rt,
                     const InterpretOptions& opts) {
  if (!prog.verified && !opts.allow_unverified)
    throw ExecError("program is not verified");
  Machine m(prog, ctx, rt, opts.limits);
  while (true) {
    auto st = m.step();
    if (st == Machine::Status::Exited) break;
    if (st == Machine::Status::Collective)
      m.resume(collective_single_lane(m.pending_helper(), m.pending_arg()));
  }
  return ExecResult{m.return_value(), m.effects(), m.counters()};
}

}  // namespace gpux
