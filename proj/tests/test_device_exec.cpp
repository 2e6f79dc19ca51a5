#include <gtest/gtest.h>

#include "gpux/assembler.hpp"
#include "gpux/device_exec.hpp"
#include "gpux/verifier.hpp"
#include "program_gen.hpp"

using namespace gpux;

namespace {

PolicyProgram verified(const std::string& src) {
  auto p = assemble(src);
  auto r = verify(p);
  EXPECT_TRUE(r.accepted()) << r.to_text();
  return p;
}

const char* kCounter =
    ".hook access\n"
    ".map counts global\n"
    "mov r1, %counts\n"
    "mov r2, 7\n"
    "mov r3, 1\n"
    "call map_update\n"
    "mov r0, 0\n"
    "exit\n";

}  // namespace

TEST(Aggregate, Examples) {
  LaneArray ones;
  ones.fill(1);
  EXPECT_EQ(aggregate(ones, 0xffffffffu, AggOp::Sum), 32u);

  LaneArray addrs{};
  for (int l = 0; l < kWarpSize; ++l) addrs[static_cast<std::size_t>(l)] = 4096u * static_cast<uint64_t>(l + 1);
  EXPECT_EQ(aggregate(addrs, 0xffffffffu, AggOp::Min), 4096u);
  EXPECT_EQ(aggregate(addrs, 0xffffffffu, AggOp::Max), 4096u * 32u);

  LaneArray pred{};
  pred[0] = 1;
  pred[5] = 1;
  EXPECT_EQ(aggregate(pred, 0xffffffffu, AggOp::Ballot), 0x21u);
  // Inactive lanes never contribute.
  EXPECT_EQ(aggregate(pred, 0xffffffdeu, AggOp::Ballot), 0u);
  EXPECT_EQ(aggregate(ones, 0x0000000fu, AggOp::Sum), 4u);
}

TEST(RunHook, CounterBothModesAddThirtyTwo) {
  auto p = verified(kCounter);
  auto ctx = WarpContext::make("access", 1, 3);
  LocalMaps per_lane(1), leader(1);
  auto a = run_hook(p, ctx, per_lane, ExecMode::PerLane);
  auto b = run_hook(p, ctx, leader, ExecMode::WarpLeader);
  EXPECT_EQ(per_lane.slot(0).at(7), 32);
  EXPECT_EQ(leader.slot(0).at(7), 32);
  EXPECT_EQ(a.effects.size(), 32u);
  EXPECT_EQ(b.effects.size(), 1u);
  // 6 instructions: 32 interpretations vs one plus the aggregation constant.
  EXPECT_EQ(a.cost_ns, 32u * 6u * 40u);
  EXPECT_EQ(b.cost_ns, 6u * 40u + 8u);
}

TEST(RunHook, SingleLaneModesAgree) {
  auto p = verified(kCounter);
  auto ctx = WarpContext::make("access", 0, 0, 1u << 9);
  LocalMaps per_lane(1), leader(1);
  auto a = run_hook(p, ctx, per_lane, ExecMode::PerLane);
  auto b = run_hook(p, ctx, leader, ExecMode::WarpLeader);
  EXPECT_EQ(a.effects, b.effects);
  EXPECT_TRUE(per_lane == leader);
  EXPECT_EQ(a.leader, 9);
}

TEST(RunHook, LeaderIsLowestActiveLane) {
  EXPECT_EQ(leader_lane(0b1100), 2);
  EXPECT_EQ(leader_lane(0x80000000u), 31);
  EXPECT_EQ(leader_lane(0), -1);
}

TEST(RunHook, LaneVaryingDecisionAggregated) {
  // Handler returns each lane's id; with MIN aggregation the decision is the
  // leader's id, broadcast to every active lane.
  auto p = verified(".hook access\n.aggregate min\nldxdw r0, [ctx.lane_id]\nexit\n");
  auto ctx = WarpContext::make("access", 0, 0, 0b1100);
  LocalMaps maps;
  for (auto mode : {ExecMode::PerLane, ExecMode::WarpLeader}) {
    auto r = run_hook(p, ctx, maps, mode);
    EXPECT_EQ(r.decision, 2);
    EXPECT_EQ(r.lane_decisions[2], 2u);
    EXPECT_EQ(r.lane_decisions[3], 2u);
    EXPECT_EQ(r.lane_decisions[0], 0u);
  }
}

TEST(RunHook, CollectiveInPerLaneMode) {
  auto p = verified(
      ".hook access\n"
      ".map m global\n"
      "ldxdw r1, [ctx.lane_addr]\n"
      "call warp_reduce_min\n"
      "mov r2, r0\n"
      "mov r1, %m\n"
      "mov r3, 1\n"
      "call map_update\n"
      "mov r0, 0\n"
      "exit\n");
  auto ctx = WarpContext::make("access", 0, 0);
  LaneArray addrs{};
  for (int l = 0; l < kWarpSize; ++l) addrs[static_cast<std::size_t>(l)] = 8192u + 64u * static_cast<uint64_t>(31 - l);
  ctx.lane_values["lane_addr"] = addrs;
  LocalMaps a(1), b(1);
  run_hook(p, ctx, a, ExecMode::PerLane);
  run_hook(p, ctx, b, ExecMode::WarpLeader);
  EXPECT_EQ(a.slot(0).at(8192), 32);
  EXPECT_TRUE(a == b);
}

TEST(RunHook, RejectsUnverifiedAndMismatchedContext) {
  auto p = assemble(kCounter);
  LocalMaps maps(1);
  EXPECT_THROW(run_hook(p, WarpContext::make("access", 0, 0), maps, ExecMode::WarpLeader), ExecError);
  verify(p);
  EXPECT_THROW(run_hook(p, WarpContext::make("fence", 0, 0), maps, ExecMode::WarpLeader), IrError);
  EXPECT_THROW(run_hook(p, WarpContext::make("access", 0, 0, 0), maps, ExecMode::WarpLeader), ExecError);
}

TEST(RunHook, UniformFieldCannotVaryPerLane) {
  auto ctx = WarpContext::make("access", 0, 0);
  ctx.lane_values["warp_id"] = LaneArray{};
  EXPECT_THROW(ctx.lane_bytes(0), IrError);
}

TEST(Property, WarpLeaderMatchesPerLane) {
  testgen::ProgramGen gen(21);
  auto& rng = gen.rng();
  int cases = 0;
  while (cases < 300) {
    auto p = gen.accepted();
    auto mask = testgen::random_mask(rng);
    auto ctx = testgen::random_access_context(rng, mask);
    LocalMaps a(2), b(2);
    auto ra = run_hook(p, ctx, a, ExecMode::PerLane);
    auto rb = run_hook(p, ctx, b, ExecMode::WarpLeader);
    ASSERT_TRUE(a == b) << disassemble(p);
    EXPECT_EQ(ra.decision, rb.decision);
    if (std::popcount(mask) > 1) EXPECT_LT(rb.cost_ns, ra.cost_ns);
    ++cases;
  }
}

TEST(Property, AcceptedProgramsDoNotDiverge) {
  testgen::ProgramGen gen(5);
  auto& rng = gen.rng();
  for (int t = 0; t < 300; ++t) {
    auto p = gen.accepted();
    auto ctx = testgen::random_access_context(rng, 0xffffffffu);
    LocalMaps maps(2);
    auto r = run_hook(p, ctx, maps, ExecMode::PerLane);
    for (int l = 1; l < kWarpSize; ++l)
      ASSERT_EQ(r.lane_branches[static_cast<std::size_t>(l)], r.lane_branches[0]) << disassemble(p);
  }
}

TEST(Property, RejectedDivergentProgramsDoDiverge) {
  // Sanity check on the oracle: a lane-varying branch does split lanes.
  auto p = assemble(".hook access\nldxdw r1, [ctx.lane_id]\nmov r0, 0\njlt r1, 16, +1\nmov r0, 1\nexit\n");
  ASSERT_FALSE(verify(p).accepted());
  RunHookOptions o;
  o.allow_unverified = true;
  LocalMaps maps;
  auto r = run_hook(p, WarpContext::make("access", 0, 0), maps, ExecMode::PerLane, o);
  EXPECT_NE(r.lane_branches[0], r.lane_branches[31]);
}

TEST(KernelSpec, ParseAndFormat) {
  auto spec = parse_kernel_spec(
      "kernel gemm\n"
      "COMPUTE cycles=100 1\n"
      "LOAD base=0x200000,stride=4096,lane_stride=4 8  # streaming\n"
      "FENCE - 1\n");
  EXPECT_EQ(spec.name, "gemm");
  ASSERT_EQ(spec.ops.size(), 3u);
  EXPECT_EQ(spec.ops[1].base, 0x200000u);
  EXPECT_EQ(spec.ops[1].repeat, 8u);
  auto again = parse_kernel_spec(format_kernel_spec(spec));
  EXPECT_EQ(again.ops, spec.ops);
  EXPECT_THROW(parse_kernel_spec("JUMP - 1\n"), IrError);
}

TEST(Instrument, EntryOnly) {
  auto spec = parse_kernel_spec("COMPUTE - 1\nLOAD - 1\nCOMPUTE - 1\n");
  auto k = instrument(spec, {HookPoint::Entry});
  EXPECT_EQ(k.hook_count(), 1u);
  ASSERT_TRUE(k.steps[0].is_hook);
  EXPECT_EQ(k.steps[0].op_index, 0u);
  // Original op order preserved.
  std::vector<std::size_t> order;
  for (const auto& s : k.steps)
    if (!s.is_hook) order.push_back(s.op_index);
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Instrument, MemInstructionAndFence) {
  auto spec = parse_kernel_spec("LOAD - 1\nCOMPUTE - 1\nLOAD - 1\nFENCE - 1\n");
  auto mem = instrument(spec, {HookPoint::MemInstruction});
  EXPECT_EQ(mem.hook_count(), 2u);
  auto fence = instrument(spec, {parse_hook_point("phase_boundary")});
  EXPECT_EQ(fence.hook_count(), 1u);
  EXPECT_THROW(parse_hook_point("loop_header"), IrError);

  auto h = verified(".hook fence\nmov r0, 0\nexit\n");
  std::map<std::string, const PolicyProgram*> handlers{{"fence", &h}};
  LocalMaps maps;
  KernelLaunchConfig cfg;
  cfg.warps = 1;
  auto stats = run_kernel(fence, cfg, handlers, [&](uint32_t) -> Runtime& { return maps; });
  EXPECT_EQ(stats.calls_per_hook["fence"], 1u);
}

TEST(Instrument, AccessHookSeesLaneAddresses) {
  auto spec = parse_kernel_spec("LOAD base=4096,stride=65536,lane_stride=4 3\n");
  auto k = instrument(spec, {HookPoint::MemInstruction});
  auto h = verified(
      ".hook access\n"
      ".map first global\n"
      "ldxdw r1, [ctx.lane_addr]\n"
      "call warp_reduce_min\n"
      "mov r2, r0\n"
      "mov r1, %first\n"
      "mov r3, 1\n"
      "call map_update\n"
      "mov r0, 0\n"
      "exit\n");
  std::map<std::string, const PolicyProgram*> handlers{{"access", &h}};
  LocalMaps maps(1);
  std::vector<uint64_t> loads;
  KernelLaunchConfig cfg;
  cfg.warps = 1;
  auto stats = run_kernel(k, cfg, handlers, [&](uint32_t) -> Runtime& { return maps; },
                          [&](uint32_t, uint64_t a) { loads.push_back(a); });
  EXPECT_EQ(stats.hook_calls, 3u);
  EXPECT_EQ(loads.size(), 3u * 32u);
  // Sum aggregation of the constant 1 across 32 lanes per repetition.
  EXPECT_EQ(maps.slot(0).at(4096), 32);
  EXPECT_EQ(maps.slot(0).at(4096 + 65536), 32);
  EXPECT_EQ(maps.slot(0).at(4096 + 2 * 65536), 32);
}
