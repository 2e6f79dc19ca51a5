#include "gpux/host_exec.hpp"

#include "gpux/context.hpp"

namespace gpux {

LoadedProgram load_program(MapStore& store, PolicyProgram prog, const HookBudget* budget) {
  auto b = budget ? *budget : HookBudget::defaults(prog.handler_name);
  auto report = verify(prog, context_schema(prog.handler_name), b);
  if (!report.accepted()) throw LoadError("handler " + prog.handler_name + " rejected", report);
  LoadedProgram out;
  out.slots = bind_maps(store, prog);
  out.prog = std::move(prog);
  out.budget = b;
  return out;
}

ExecLimits limits_for(const HookBudget& b) {
  ExecLimits l;
  l.max_instructions = b.max_instructions;
  l.max_helper_cost = b.max_helper_calls;
  l.max_memory_ops = b.max_memory_ops;
  return l;
}

ExecResult run_host(const LoadedProgram& p, std::span<uint8_t> ctx, MapStore& store, KfuncHandler kfunc) {
  MapView view(store, p.slots, Origin::from_host(), std::move(kfunc));
  InterpretOptions o;
  o.limits = limits_for(p.budget);
  return interpret(p.prog, ctx, view, o);
}

}  // namespace gpux
