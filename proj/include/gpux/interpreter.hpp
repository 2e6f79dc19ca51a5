#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <variant>
#include <vector>

#include "gpux/helpers.hpp"
#include "gpux/ir.hpp"

namespace gpux {

struct HelperCall {
  HelperId id{};
  std::array<uint64_t, 5> args{};
  uint64_t ret = 0;
  friend bool operator==(const HelperCall&, const HelperCall&) = default;
};

struct CtxWrite {
  uint16_t offset = 0;
  uint8_t width = 8;
  uint64_t value = 0;
  friend bool operator==(const CtxWrite&, const CtxWrite&) = default;
};

using Effect = std::variant<HelperCall, CtxWrite>;

/// Services a running handler needs from its host: maps and kfuncs.
class Runtime {
 public:
  virtual ~Runtime() = default;
  virtual int64_t map_lookup(std::size_t slot, uint64_t key) = 0;
  virtual void map_add(std::size_t slot, uint64_t key, int64_t delta) = 0;
  virtual void map_set(std::size_t slot, uint64_t key, int64_t value) = 0;
  /// Non-map helpers other than warp collectives.
  virtual uint64_t kfunc(HelperId id, std::span<const uint64_t, 5> args);
};

/// In-memory maps, one ordered key space per map slot. Kfuncs are no-ops.
class LocalMaps : public Runtime {
 public:
  explicit LocalMaps(std::size_t slots = 0) : maps_(slots) {}
  int64_t map_lookup(std::size_t slot, uint64_t key) override;
  void map_add(std::size_t slot, uint64_t key, int64_t delta) override;
  void map_set(std::size_t slot, uint64_t key, int64_t value) override;

  const std::map<uint64_t, int64_t>& slot(std::size_t i) const { return maps_.at(i); }
  std::vector<std::map<uint64_t, int64_t>>& all() { return maps_; }
  friend bool operator==(const LocalMaps& a, const LocalMaps& b) { return a.maps_ == b.maps_; }

 private:
  std::map<uint64_t, int64_t>& get(std::size_t slot);
  std::vector<std::map<uint64_t, int64_t>> maps_;
};

struct ExecLimits {
  uint64_t max_instructions = std::numeric_limits<uint64_t>::max();
  uint64_t max_helper_cost = std::numeric_limits<uint64_t>::max();
  uint64_t max_memory_ops = std::numeric_limits<uint64_t>::max();
};

struct ExecCounters {
  uint64_t instructions = 0;
  uint64_t helper_calls = 0;
  uint64_t helper_cost = 0;
  uint64_t memory_ops = 0;
};

class ExecError : public IrError {
 public:
  using IrError::IrError;
};

/// Raised when a metered handler exceeds its runtime limits.
class BudgetExceeded : public ExecError {
 public:
  using ExecError::ExecError;
};

struct BranchRecord {
  std::size_t pc = 0;
  bool taken = false;
  friend bool operator==(const BranchRecord&, const BranchRecord&) = default;
};

/// Single-lane machine that can be stepped one instruction at a time.
/// Warp collectives suspend the machine so a driver can combine lanes.
class Machine {
 public:
  enum class Status { Running, Collective, Exited };

  Machine(const PolicyProgram& prog, std::span<uint8_t> ctx, Runtime& rt, ExecLimits limits = {});

  Status step();
  Status status() const { return status_; }

  // Valid while status() == Collective.
  HelperId pending_helper() const { return pending_; }
  uint64_t pending_arg() const { return regs_[1]; }
  void resume(uint64_t result);

  std::size_t pc() const { return pc_; }
  uint64_t reg(int r) const { return regs_[static_cast<std::size_t>(r)]; }
  int64_t return_value() const { return static_cast<int64_t>(regs_[0]); }
  const std::vector<Effect>& effects() const { return effects_; }
  const std::vector<BranchRecord>& branches() const { return branches_; }
  const ExecCounters& counters() const { return counters_; }

 private:
  uint64_t load(const Instruction& in);
  void store(const Instruction& in, uint64_t value);
  uint8_t* address(const Instruction& in);
  void call(const Instruction& in);
  void finish_call(HelperId id, const std::array<uint64_t, 5>& args, uint64_t ret);
  void charge_memory();
  void check_map(uint64_t slot) const;

  const PolicyProgram& prog_;
  std::span<uint8_t> ctx_;
  Runtime& rt_;
  ExecLimits limits_;
  std::array<uint64_t, kNumRegisters> regs_{};
  std::array<uint8_t, kStackSize> stack_{};
  std::size_t pc_ = 0;
  Status status_ = Status::Running;
  HelperId pending_{};
  std::array<uint64_t, 5> pending_args_{};
  std::vector<Effect> effects_;
  std::vector<BranchRecord> branches_;
  ExecCounters counters_;
};

struct InterpretOptions {
  /// Test-only: run a program the verifier has not accepted.
  bool allow_unverified = false;
  ExecLimits limits;
};

struct ExecResult {
  int64_t return_value = 0;
  std::vector<Effect> effects;
  ExecCounters counters;
};

/// Scalar reference semantics. Warp collectives reduce over the single lane.
ExecResult interpret(const PolicyProgram& prog, std::span<uint8_t> ctx, Runtime& rt,
                     const InterpretOptions& opts = {});

/// Single-lane value of a warp collective.
uint64_t collective_single_lane(HelperId id, uint64_t arg);

}  // namespace gpux
