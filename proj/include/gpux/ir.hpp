#pragma once

// Restricted register-machine bytecode for GPU policies.
//
// Eleven 64-bit registers (r0..r10), r10 is the read-only frame base of a
// 512-byte stack. r0 carries helper results and the handler return value,
// r1..r5 carry helper arguments and are clobbered by calls.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gpux {

inline constexpr int kNumRegisters = 11;
inline constexpr int kFrameRegister = 10;
inline constexpr int kStackSize = 512;

enum class HookType : uint16_t { GpuMem = 1, GpuSched = 2, GpuDev = 3 };
enum class Domain : uint8_t { Host, Device, Both };

std::string_view to_string(HookType t);
Domain domain_of(HookType t);

enum class Op : uint8_t {
  // ALU64: dst = dst <op> src|imm
  Add, Sub, Mul, Div, Mod, And, Or, Xor, Lsh, Rsh, Mov,
  // dst = [space + offset]
  Ld,
  // [space + offset] = src|imm
  St,
  // dst = map[imm][src]
  LdMap,
  // map[imm][dst] += src, atomic; dst is the address (key) register
  XAdd,
  // pc += 1 + offset when the condition on (dst, src|imm) holds
  Ja, Jeq, Jne, Jlt, Jge, Jslt, Jsge,
  // call helper imm
  Call,
  Exit,
};

inline constexpr bool is_alu(Op op) { return op <= Op::Mov; }
inline constexpr bool is_cond_jump(Op op) { return op >= Op::Jeq && op <= Op::Jsge; }
inline constexpr bool is_jump(Op op) { return op >= Op::Ja && op <= Op::Jsge; }

enum class Space : uint8_t { Ctx, Stack };

/// One instruction. `mode` packs the operand form:
///   bit 0    source is a register (else the immediate)
///   bits 1-2 log2 of the memory access width (Ld/St)
///   bit 3    memory space is the stack (else the context)
struct Instruction {
  Op op = Op::Exit;
  uint8_t mode = 0;
  uint8_t dst = 0;
  uint8_t src = 0;
  int16_t offset = 0;
  int32_t imm = 0;

  static constexpr uint8_t kRegSource = 0x01;
  static constexpr uint8_t kStackSpace = 0x08;

  bool reg_source() const { return (mode & kRegSource) != 0; }
  unsigned width() const { return 1u << ((mode >> 1) & 3u); }
  Space space() const { return (mode & kStackSpace) ? Space::Stack : Space::Ctx; }

  static uint8_t mem_mode(Space space, unsigned width, bool reg_src);

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

enum class MapTier : uint8_t { Host, DeviceGlobal, SmLocal };
std::string_view to_string(MapTier t);

/// Aggregation applied by warp-leader execution to lane-varying map deltas
/// and to a lane-varying return value.
enum class AggOp : uint8_t { Sum, Min, Max, Ballot };
std::string_view to_string(AggOp op);

struct MapRef {
  std::string name;
  MapTier tier = MapTier::DeviceGlobal;
  friend bool operator==(const MapRef&, const MapRef&) = default;
};

struct PolicyProgram {
  std::vector<Instruction> instructions;
  HookType hook_type = HookType::GpuDev;
  std::string handler_name;
  std::vector<MapRef> map_refs;
  AggOp aggregation = AggOp::Sum;
  // Set only by verify() on ACCEPT.
  bool verified = false;
};

class IrError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary form: 16-byte little-endian header {"GPUX", version u16,
/// hook_type u16, instruction count u32, aggregation u8, 3 reserved bytes},
/// then `count` 10-byte instructions {op, mode, dst, src, offset i16,
/// imm i32}, then the handler name and map table as u16-length-prefixed
/// strings (map entries carry one trailing tier byte).
inline constexpr uint16_t kBinaryVersion = 1;
std::vector<uint8_t> serialize(const PolicyProgram& prog);
PolicyProgram deserialize(std::span<const uint8_t> bytes);

// Shared arithmetic so every execution engine agrees bit-for-bit.
uint64_t alu_apply(Op op, uint64_t a, uint64_t b);
bool branch_taken(Op op, uint64_t a, uint64_t b);

}  // namespace gpux
