#pragma once

// Running verified host handlers against the shared map store.

#include <span>
#include <stdexcept>
#include <string>

#include "gpux/interpreter.hpp"
#include "gpux/verifier.hpp"
#include "gpux/xmaps.hpp"

namespace gpux {

/// A program refused at load time.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& what, VerifierReport report)
      : std::runtime_error(what), report_(std::move(report)) {}
  const VerifierReport& report() const { return report_; }

 private:
  VerifierReport report_;
};

struct LoadedProgram {
  PolicyProgram prog;
  std::vector<uint32_t> slots;  // map_refs resolved in the store
  HookBudget budget;
};

/// Verifies against the hook's schema and budget, then binds maps.
LoadedProgram load_program(MapStore& store, PolicyProgram prog, const HookBudget* budget = nullptr);

/// Runtime limits matching a verifier budget.
ExecLimits limits_for(const HookBudget& b);

/// Host-side run. Budget overruns surface as BudgetExceeded.
ExecResult run_host(const LoadedProgram& p, std::span<uint8_t> ctx, MapStore& store, KfuncHandler kfunc);

}  // namespace gpux
