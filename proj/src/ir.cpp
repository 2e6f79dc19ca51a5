#include "gpux/ir.hpp"

#include <cstring>
#include <string>

namespace gpux {

std::string_view to_string(HookType t) {
  switch (t) {
    case HookType::GpuMem: return "GPU_MEM";
    case HookType::GpuSched: return "GPU_SCHED";
    case HookType::GpuDev: return "GPU_DEV";
  }
  return "?";
}

Domain domain_of(HookType t) { return t == HookType::GpuDev ? Domain::Device : Domain::Host; }

std::string_view to_string(MapTier t) {
  switch (t) {
    case MapTier::Host: return "host";
    case MapTier::DeviceGlobal: return "global";
    case MapTier::SmLocal: return "sm";
  }
  return "?";
}

std::string_view to_string(AggOp op) {
  switch (op) {
    case AggOp::Sum: return "sum";
    case AggOp::Min: return "min";
    case AggOp::Max: return "max";
    case AggOp::Ballot: return "ballot";
  }
  return "?";
}

uint8_t Instruction::mem_mode(Space space, unsigned width, bool reg_src) {
  uint8_t log2w = 0;
  switch (width) {
    case 1: log2w = 0; break;
    case 2: log2w = 1; break;
    case 4: log2w = 2; break;
    case 8: log2w = 3; break;
    default: throw IrError("invalid access width " + std::to_string(width));
  }
  return static_cast<uint8_t>((reg_src ? kRegSource : 0) | (log2w << 1) |
                              (space == Space::Stack ? kStackSpace : 0));
}

uint64_t alu_apply(Op op, uint64_t a, uint64_t b) {
  switch (op) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a * b;
    case Op::Div: return b == 0 ? 0 : a / b;
    case Op::Mod: return b == 0 ? 0 : a % b;
    case Op::And: return a & b;
    case Op::Or: return a | b;
    case Op::Xor: return a ^ b;
    case Op::Lsh: return a << (b & 63);
    case Op::Rsh: return a >> (b & 63);
    case Op::Mov: return b;
    default: throw IrError("not an ALU op");
  }
}

bool branch_taken(Op op, uint64_t a, uint64_t b) {
  auto sa = static_cast<int64_t>(a);
  auto sb = static_cast<int64_t>(b);
  switch (op) {
    case Op::Ja: return true;
    case Op::Jeq: return a == b;
    case Op::Jne: return a != b;
    case Op::Jlt: return a < b;
    case Op::Jge: return a >= b;
    case Op::Jslt: return sa < sb;
    case Op::Jsge: return sa >= sb;
    default: throw IrError("not a jump op");
  }
}

namespace {

class Writer {
 public:
  void u8(uint8_t v) { out_.push_back(v); }
  void u16(uint16_t v) {
    u8(static_cast<uint8_t>(v));
    u8(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    u16(static_cast<uint16_t>(v));
    u16(static_cast<uint16_t>(v >> 16));
  }
  void str(const std::string& s) {
    if (s.size() > 0xffff) throw IrError("string too long for serialization");
    u16(static_cast<uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<uint8_t> take() { return std::move(out_); }

 private:
  std::vector<uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> in) : in_(in) {}
  uint8_t u8() {
    if (pos_ >= in_.size()) throw IrError("truncated program image");
    return in_[pos_++];
  }
  uint16_t u16() {
    uint16_t lo = u8();
    return static_cast<uint16_t>(lo | (u8() << 8));
  }
  uint32_t u32() {
    uint32_t lo = u16();
    return lo | (static_cast<uint32_t>(u16()) << 16);
  }
  std::string str() {
    std::size_t n = u16();
    if (pos_ + n > in_.size()) throw IrError("truncated program image");
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize(const PolicyProgram& prog) {
  Writer w;
  for (char c : std::string_view("GPUX")) w.u8(static_cast<uint8_t>(c));
  w.u16(kBinaryVersion);
  w.u16(static_cast<uint16_t>(prog.hook_type));
  w.u32(static_cast<uint32_t>(prog.instructions.size()));
  w.u8(static_cast<uint8_t>(prog.aggregation));
  w.u8(0);
  w.u8(0);
  w.u8(0);
  for (const auto& in : prog.instructions) {
    w.u8(static_cast<uint8_t>(in.op));
    w.u8(in.mode);
    w.u8(in.dst);
    w.u8(in.src);
    w.u16(static_cast<uint16_t>(in.offset));
    w.u32(static_cast<uint32_t>(in.imm));
  }
  w.str(prog.handler_name);
  w.u16(static_cast<uint16_t>(prog.map_refs.size()));
  for (const auto& m : prog.map_refs) {
    w.str(m.name);
    w.u8(static_cast<uint8_t>(m.tier));
  }
  return w.take();
}

PolicyProgram deserialize(std::span<const uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, "GPUX", 4) != 0) throw IrError("bad magic");
  if (r.u16() != kBinaryVersion) throw IrError("unsupported program version");
  PolicyProgram prog;
  uint16_t hook = r.u16();
  if (hook < 1 || hook > 3) throw IrError("bad hook type");
  prog.hook_type = static_cast<HookType>(hook);
  uint32_t count = r.u32();
  uint8_t agg = r.u8();
  if (agg > static_cast<uint8_t>(AggOp::Ballot)) throw IrError("bad aggregation");
  prog.aggregation = static_cast<AggOp>(agg);
  r.u8();
  r.u8();
  r.u8();
  prog.instructions.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Instruction in;
    uint8_t op = r.u8();
    if (op > static_cast<uint8_t>(Op::Exit)) throw IrError("bad opcode");
    in.op = static_cast<Op>(op);
    in.mode = r.u8();
    in.dst = r.u8();
    in.src = r.u8();
    in.offset = static_cast<int16_t>(r.u16());
    in.imm = static_cast<int32_t>(r.u32());
    prog.instructions.push_back(in);
  }
  prog.handler_name = r.str();
  uint16_t maps = r.u16();
  for (uint16_t i = 0; i < maps; ++i) {
    MapRef m;
    m.name = r.str();
    uint8_t tier = r.u8();
    if (tier > static_cast<uint8_t>(MapTier::SmLocal)) throw IrError("bad map tier");
    m.tier = static_cast<MapTier>(tier);
    prog.map_refs.push_back(std::move(m));
  }
  if (!r.done()) throw IrError("trailing bytes in program image");
  return prog;
}

}  // namespace gpux
