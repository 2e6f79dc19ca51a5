#pragma once

// Textual policy assembly.
//
//   # comment
//   .hook access            handler slot; fixes the hook type and schema
//   .map counts global      map reference (tiers: host, global, sm)
//   .aggregate sum          warp aggregation (sum, min, max, ballot)
//   loop:                   label
//     mov r1, %counts       map slot immediate
//     ldxdw r2, [ctx.lane_addr]   or [ctx+48]
//     stxdw [r10-8], r2
//     jlt r3, 8, loop       offsets may be labels or +N / -N
//     call map_update       helper name or numeric id
//     exit

#include <cstddef>
#include <string>
#include <string_view>

#include "gpux/ir.hpp"

namespace gpux {

class AssembleError : public IrError {
 public:
  AssembleError(std::size_t line, const std::string& msg);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

PolicyProgram assemble(std::string_view source);

/// Inverse of assemble on instruction lists: directives plus one mnemonic per
/// line with numeric jump offsets and context offsets.
std::string disassemble(const PolicyProgram& prog);
std::string disassemble(const Instruction& inst, const PolicyProgram* prog = nullptr);

}  // namespace gpux
