#pragma once

// Load-time verifier for policy programs.
//
// Passes run in order: (1) standard safety: well-formed instructions,
// initialized reads, bounded stack/context access, reducible control flow
// with statically bounded loops; (2) warp-uniformity dataflow for device
// programs; (3) forbidden primitives: barriers, global sync, non-uniform
// atomics; (4) worst-case resource budget.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gpux/context.hpp"
#include "gpux/ir.hpp"

namespace gpux {

enum class Rule {
  BadInstruction,
  BadJump,
  NoExit,
  UnknownHelper,
  HelperDomain,
  BadMap,
  SchemaMismatch,
  OobAccess,
  ReadonlyCtx,
  UninitRead,
  UnboundedLoop,
  UniformBranch,
  UniformLoopBound,
  UniformMapKey,
  UniformHelperArg,
  UniformDecision,
  NonAdditiveAggregate,
  ForbiddenSync,
  NonUniformAtomic,
  Budget,
};

std::string_view to_string(Rule r);
bool parse_rule(std::string_view s, Rule& out);

struct Violation {
  std::size_t index = 0;
  Rule rule{};
  std::string message;
  friend bool operator==(const Violation&, const Violation&) = default;
};

enum class Verdict { Accept, Reject };

struct VerifierReport {
  Verdict verdict = Verdict::Accept;
  std::vector<Violation> violations;

  bool accepted() const { return verdict == Verdict::Accept; }
  bool has(Rule r) const;
  /// Line-oriented text: "verdict ACCEPT|REJECT" then one
  /// "violation <index> <RULE> <message>" line per violation.
  std::string to_text() const;
};

struct HookBudget {
  std::string hook;
  uint64_t max_instructions = 0;
  uint64_t max_helper_calls = 0;
  uint64_t max_memory_ops = 0;

  /// Device hooks {128, 8, 16}; host hooks {4096, 64, 256}.
  static HookBudget defaults(std::string_view hook);
};

struct UniformityState {
  // Register tags on entry to each instruction; unreachable ones stay Uninit.
  std::vector<std::array<Uniformity, kNumRegisters>> at_entry;
  Uniformity at(std::size_t index, int reg) const {
    return at_entry.at(index)[static_cast<std::size_t>(reg)];
  }
};

struct WorstCase {
  uint64_t instructions = 0;
  uint64_t helper_calls = 0;
  uint64_t memory_ops = 0;
};

struct BudgetCheck {
  WorstCase worst_case;
  bool ok = false;
};

/// Sets prog.verified on ACCEPT. Rejections are reported, never thrown.
VerifierReport verify(PolicyProgram& prog, const ContextSchema& schema, const HookBudget& budget);

/// Convenience: canonical schema and default budget for prog.handler_name.
VerifierReport verify(PolicyProgram& prog);

UniformityState uniformity_analysis(const PolicyProgram& prog, const ContextSchema& schema);

/// Worst case = sum over reachable instructions of (loop trip product x cost).
/// Programs with loops that cannot be bounded report ok=false and saturated
/// counts.
BudgetCheck check_budget(const PolicyProgram& prog, const HookBudget& budget);

}  // namespace gpux
