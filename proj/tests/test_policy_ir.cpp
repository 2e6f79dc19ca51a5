#include <gtest/gtest.h>

#include <random>

#include "gpux/assembler.hpp"
#include "gpux/context.hpp"
#include "gpux/helpers.hpp"
#include "gpux/interpreter.hpp"
#include "gpux/ir.hpp"

using namespace gpux;

namespace {

ExecResult run_unverified(const PolicyProgram& p, std::vector<uint8_t>& ctx, Runtime& rt) {
  InterpretOptions o;
  o.allow_unverified = true;
  return interpret(p, ctx, rt, o);
}

}  // namespace

TEST(Assemble, ConstantReturn) {
  auto p = assemble("mov r0, 0\nexit\n");
  ASSERT_EQ(p.instructions.size(), 2u);
  EXPECT_FALSE(p.verified);
  EXPECT_EQ(p.instructions[0].op, Op::Mov);
  EXPECT_EQ(p.instructions[1].op, Op::Exit);

  LocalMaps maps;
  std::vector<uint8_t> ctx;
  auto r = run_unverified(p, ctx, maps);
  EXPECT_EQ(r.return_value, 0);
  EXPECT_TRUE(r.effects.empty());
}

TEST(Assemble, ResolvesJumpOffset) {
  auto p = assemble("mov r0, 7\njeq r1, 0, +1\nmov r0, 3\nexit\n");
  ASSERT_EQ(p.instructions.size(), 4u);
  EXPECT_EQ(p.instructions[1].op, Op::Jeq);
  EXPECT_EQ(p.instructions[1].offset, 1);

  // Same program written with a label encodes identically.
  auto q = assemble("mov r0, 7\njeq r1, 0, done\nmov r0, 3\ndone: exit\n");
  EXPECT_EQ(p.instructions, q.instructions);
}

TEST(Assemble, RegisterOutOfRange) {
  try {
    assemble("mov r99, 0\n");
    FAIL() << "expected error";
  } catch (const AssembleError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("register"), std::string::npos);
  }
}

TEST(Assemble, UnknownMnemonicReportsLine) {
  try {
    assemble("mov r0, 0\nfrobnicate r1\nexit\n");
    FAIL() << "expected error";
  } catch (const AssembleError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Assemble, NamedContextFields) {
  auto p = assemble(".hook gpu_access\nldxdw r1, [ctx.fault_addr]\nmov r0, 0\nexit\n");
  const auto& s = context_schema("gpu_access");
  EXPECT_EQ(p.hook_type, HookType::GpuMem);
  EXPECT_EQ(p.instructions[0].offset, s.find("fault_addr")->offset);
  EXPECT_EQ(p.instructions[0].space(), Space::Ctx);
  EXPECT_EQ(p.instructions[0].width(), 8u);
}

TEST(Interpret, DivisionByZeroYieldsZero) {
  auto p = assemble("mov r0, 17\nmov r1, 0\ndiv r0, r1\nmov r2, 5\nmod r2, 0\nadd r0, r2\nexit\n");
  LocalMaps maps;
  std::vector<uint8_t> ctx;
  EXPECT_EQ(run_unverified(p, ctx, maps).return_value, 0);
}

TEST(Interpret, PrefetchHelperEffect) {
  auto p = assemble(
      ".hook access\n"
      "ldxdw r1, [ctx.block_id]\n"
      "call gdev_mem_prefetch\n"
      "mov r0, 0\n"
      "exit\n");
  // Load a uniform field holding 5 and hand it to the prefetch helper.
  DevMemAccessCtx c{};
  c.block_id = 5;
  auto ctx = to_bytes(c);
  LocalMaps maps;
  auto r = run_unverified(p, ctx, maps);
  EXPECT_EQ(r.return_value, 0);
  ASSERT_EQ(r.effects.size(), 1u);
  const auto& call = std::get<HelperCall>(r.effects[0]);
  EXPECT_EQ(call.id, HelperId::GdevMemPrefetch);
  EXPECT_EQ(call.args[0], 5u);
}

TEST(Interpret, BoundedLoopIncrementsMapThreeTimes) {
  auto p = assemble(
      ".hook gpu_access\n"
      ".map faults host\n"
      "mov r6, 0\n"
      "loop:\n"
      "mov r1, %faults\n"
      "mov r2, 0\n"
      "mov r3, 1\n"
      "call map_update\n"
      "add r6, 1\n"
      "jlt r6, 3, loop\n"
      "mov r0, 0\n"
      "exit\n");
  // Hand-stepped: r6 goes 0 -> 1 -> 2 -> 3, each iteration adds 1 to key 0,
  // the latch falls through once r6 == 3.
  LocalMaps maps(1);
  std::vector<uint8_t> ctx(context_schema("gpu_access").size());
  auto r = run_unverified(p, ctx, maps);
  EXPECT_EQ(maps.slot(0).at(0), 3);
  EXPECT_EQ(r.effects.size(), 3u);
  // 1 + 3 iterations x 6 + 2 tail instructions.
  EXPECT_EQ(r.counters.instructions, 1u + 3u * 6u + 2u);
}

TEST(Interpret, UnverifiedRefusedByDefault) {
  auto p = assemble("mov r0, 0\nexit\n");
  LocalMaps maps;
  std::vector<uint8_t> ctx;
  EXPECT_THROW(interpret(p, ctx, maps), ExecError);
}

TEST(Interpret, OutOfBoundsContextAccess) {
  auto p = assemble("ldxdw r0, [ctx+4096]\nexit\n");
  LocalMaps maps;
  std::vector<uint8_t> ctx(16);
  EXPECT_THROW(run_unverified(p, ctx, maps), ExecError);
}

TEST(Interpret, UnknownHelper) {
  auto p = assemble("call 999\nmov r0, 0\nexit\n");
  LocalMaps maps;
  std::vector<uint8_t> ctx;
  EXPECT_THROW(run_unverified(p, ctx, maps), ExecError);
}

TEST(Interpret, ContextWriteRecorded) {
  auto p = assemble(".hook gpu_evict_prepare\nstdw [ctx.decision], 2\nmov r0, 0\nexit\n");
  std::vector<uint8_t> ctx(context_schema("gpu_evict_prepare").size());
  LocalMaps maps;
  auto r = run_unverified(p, ctx, maps);
  ASSERT_EQ(r.effects.size(), 1u);
  const auto& w = std::get<CtxWrite>(r.effects[0]);
  EXPECT_EQ(w.offset, context_schema("gpu_evict_prepare").decision().offset);
  EXPECT_EQ(w.value, 2u);
  EXPECT_EQ(from_bytes<MemEvictCtx>(ctx).decision, 2u);
}

TEST(ContextSchema, GpuAccessFields) {
  const auto& s = context_schema("gpu_access");
  for (const char* name : {"region_id", "fault_addr"}) {
    const auto* f = s.find(name);
    ASSERT_NE(f, nullptr) << name;
    EXPECT_EQ(f->uniformity, Uniformity::Uniform);
    EXPECT_EQ(f->mutability, Mutability::RO);
  }
  const auto* d = s.find("decision");
  ASSERT_NE(d, nullptr);
  EXPECT_EQ(d->uniformity, Uniformity::Uniform);
  EXPECT_EQ(d->mutability, Mutability::RW);
}

TEST(ContextSchema, DeviceAccessFields) {
  const auto& s = context_schema("access");
  EXPECT_EQ(s.find("lane_addr")->uniformity, Uniformity::LaneVarying);
  EXPECT_EQ(s.find("lane_addr")->mutability, Mutability::RO);
  EXPECT_EQ(s.find("warp_id")->uniformity, Uniformity::Uniform);
  EXPECT_EQ(s.find("warp_id")->mutability, Mutability::RO);
}

TEST(ContextSchema, UnknownHook) { EXPECT_THROW(context_schema("bogus"), IrError); }

TEST(ContextSchema, StructuralInvariants) {
  for (auto hook : known_hooks()) {
    const auto& s = context_schema(hook);
    int rw = 0;
    bool lv = false, uni = false;
    for (std::size_t i = 0; i < s.fields.size(); ++i) {
      const auto& f = s.fields[i];
      if (f.mutability == Mutability::RW) {
        ++rw;
        EXPECT_EQ(f.name, "decision");
      }
      lv |= f.uniformity == Uniformity::LaneVarying;
      uni |= f.uniformity == Uniformity::Uniform;
      for (std::size_t j = i + 1; j < s.fields.size(); ++j) {
        const auto& g = s.fields[j];
        bool disjoint = f.offset + f.width <= g.offset || g.offset + g.width <= f.offset;
        EXPECT_TRUE(disjoint) << hook << " " << f.name << " " << g.name;
      }
    }
    EXPECT_EQ(rw, 1) << hook;
    if (s.hook_type == HookType::GpuDev) {
      EXPECT_TRUE(lv) << hook;
      EXPECT_TRUE(uni) << hook;
    } else {
      EXPECT_FALSE(lv) << hook;
    }
  }
}

TEST(Helpers, HostOnlyKfuncsAreNotDeviceCallable) {
  for (auto name : {"bpf_gpu_move_head", "bpf_gpu_move_tail", "bpf_gpu_set_attr",
                    "bpf_gpu_reject_bind", "gdrv_sched_preempt"}) {
    const auto* h = find_helper(std::string_view(name));
    ASSERT_NE(h, nullptr) << name;
    EXPECT_FALSE(domain_allows(Domain::Device, h->domain)) << name;
    EXPECT_TRUE(domain_allows(Domain::Host, h->domain)) << name;
  }
  const auto* pf = find_helper(std::string_view("gdev_mem_prefetch"));
  ASSERT_NE(pf, nullptr);
  EXPECT_FALSE(domain_allows(Domain::Host, pf->domain));
}

TEST(Helpers, BudgetCosts) {
  auto cost = [](const char* n) { return find_helper(std::string_view(n))->budget_cost; };
  EXPECT_EQ(cost("map_update"), 2u);
  EXPECT_EQ(cost("map_lookup"), 1u);
  EXPECT_EQ(cost("gdev_mem_prefetch"), 4u);
  EXPECT_EQ(cost("bpf_gpu_move_head"), 4u);
  EXPECT_EQ(cost("bpf_gpu_move_tail"), 4u);
  EXPECT_EQ(cost("bpf_gpu_set_attr"), 4u);
  EXPECT_EQ(cost("ktime_get_ns"), 1u);
}

namespace {

Instruction random_instruction(std::mt19937_64& rng, std::size_t index, std::size_t n) {
  std::uniform_int_distribution<int> op_d(0, static_cast<int>(Op::Exit));
  std::uniform_int_distribution<int> reg_d(0, kNumRegisters - 1);
  std::uniform_int_distribution<int> imm_d(-1000, 1000);
  Instruction in;
  in.op = static_cast<Op>(op_d(rng));
  if (is_alu(in.op)) {
    in.dst = static_cast<uint8_t>(reg_d(rng) % 10);
    if (rng() & 1) {
      in.src = static_cast<uint8_t>(reg_d(rng));
      in.mode = Instruction::kRegSource;
    } else {
      in.imm = imm_d(rng);
    }
  } else if (is_jump(in.op)) {
    auto target = static_cast<int64_t>(rng() % n);
    in.offset = static_cast<int16_t>(target - static_cast<int64_t>(index) - 1);
    if (in.op != Op::Ja) {
      in.dst = static_cast<uint8_t>(reg_d(rng));
      if (rng() & 1) {
        in.src = static_cast<uint8_t>(reg_d(rng));
        in.mode = Instruction::kRegSource;
      } else {
        in.imm = imm_d(rng);
      }
    }
  } else if (in.op == Op::Ld || in.op == Op::St) {
    unsigned w = 1u << (rng() % 4);
    bool stack = rng() & 1;
    bool reg_src = in.op == Op::St && (rng() & 1);
    in.mode = Instruction::mem_mode(stack ? Space::Stack : Space::Ctx, w, reg_src);
    in.offset = static_cast<int16_t>(stack ? -static_cast<int>(8 * (1 + rng() % 8)) : static_cast<int>(8 * (rng() % 6)));
    if (in.op == Op::Ld) in.dst = static_cast<uint8_t>(reg_d(rng) % 10);
    if (reg_src) in.src = static_cast<uint8_t>(reg_d(rng));
    if (in.op == Op::St && !reg_src) in.imm = imm_d(rng);
  } else if (in.op == Op::LdMap || in.op == Op::XAdd) {
    in.dst = static_cast<uint8_t>(reg_d(rng) % 10);
    in.src = static_cast<uint8_t>(reg_d(rng));
    in.mode = Instruction::kRegSource;
    in.imm = 0;
  } else if (in.op == Op::Call) {
    in.imm = static_cast<int32_t>(1 + rng() % 18);
  }
  return in;
}

PolicyProgram random_program(std::mt19937_64& rng) {
  PolicyProgram p;
  auto hooks = known_hooks();
  p.handler_name = std::string(hooks[rng() % hooks.size()]);
  p.hook_type = hook_type_of(p.handler_name);
  p.map_refs = {{"m", MapTier::DeviceGlobal}};
  p.aggregation = static_cast<AggOp>(rng() % 4);
  std::size_t n = 1 + rng() % 40;
  for (std::size_t i = 0; i < n; ++i) p.instructions.push_back(random_instruction(rng, i, n));
  return p;
}

}  // namespace

TEST(Property, DisassembleAssembleRoundTrip) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 500; ++t) {
    auto p = random_program(rng);
    auto text = disassemble(p);
    auto q = assemble(text);
    ASSERT_EQ(p.instructions, q.instructions) << text;
    EXPECT_EQ(p.handler_name, q.handler_name);
    EXPECT_EQ(p.map_refs, q.map_refs);
    EXPECT_EQ(p.aggregation, q.aggregation);
  }
}

TEST(Property, BinaryRoundTrip) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 500; ++t) {
    auto p = random_program(rng);
    auto bytes = serialize(p);
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes[0], 'G');
    EXPECT_EQ(bytes[3], 'X');
    auto q = deserialize(bytes);
    EXPECT_EQ(p.instructions, q.instructions);
    EXPECT_EQ(p.hook_type, q.hook_type);
    EXPECT_EQ(p.handler_name, q.handler_name);
    EXPECT_EQ(p.map_refs, q.map_refs);
    EXPECT_FALSE(q.verified);
  }
}

TEST(Property, BinaryRejectsTruncation) {
  auto p = assemble("mov r0, 1\nexit\n");
  auto bytes = serialize(p);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize(bytes), IrError);
  std::vector<uint8_t> junk(16, 0);
  EXPECT_THROW(deserialize(junk), IrError);
}

TEST(Property, InterpretationIsDeterministicAndDomainRespecting) {
  std::mt19937_64 rng(3);
  int ran = 0;
  for (int t = 0; t < 2000; ++t) {
    auto p = random_program(rng);
    std::vector<uint8_t> ctx(context_schema(p.handler_name).size());
    for (auto& b : ctx) b = static_cast<uint8_t>(rng());
    auto run = [&](LocalMaps& maps) -> std::optional<ExecResult> {
      auto c = ctx;
      InterpretOptions o;
      o.allow_unverified = true;
      o.limits.max_instructions = 500;
      try {
        return interpret(p, c, maps, o);
      } catch (const ExecError&) {
        return std::nullopt;
      }
    };
    LocalMaps a(1), b(1);
    auto ra = run(a);
    auto rb = run(b);
    ASSERT_EQ(ra.has_value(), rb.has_value());
    if (!ra) continue;
    ++ran;
    EXPECT_EQ(ra->return_value, rb->return_value);
    EXPECT_EQ(ra->effects, rb->effects);
    EXPECT_TRUE(a == b);
    for (const auto& e : ra->effects)
      if (const auto* call = std::get_if<HelperCall>(&e))
        EXPECT_TRUE(domain_allows(domain_of(p.hook_type), find_helper(static_cast<int32_t>(call->id))->domain));
  }
  EXPECT_GT(ran, 50);
}
