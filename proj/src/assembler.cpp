#include "gpux/assembler.hpp"

#include <cctype>
#include <charconv>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include "gpux/context.hpp"
#include "gpux/helpers.hpp"

namespace gpux {

AssembleError::AssembleError(std::size_t line, const std::string& msg)
    : IrError("line " + std::to_string(line) + ": " + msg), line_(line) {}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Splits on commas that are not inside brackets.
std::vector<std::string_view> split_operands(std::string_view s) {
  std::vector<std::string_view> out;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '[') ++depth;
    if (s[i] == ']') --depth;
    if (s[i] == ',' && depth == 0) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  auto last = trim(s.substr(start));
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

std::optional<int64_t> parse_int(std::string_view s) {
  s = trim(s);
  bool neg = false;
  if (!s.empty() && (s.front() == '+' || s.front() == '-')) {
    neg = s.front() == '-';
    s.remove_prefix(1);
  }
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  if (s.empty()) return std::nullopt;
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  if (v > static_cast<uint64_t>(std::numeric_limits<int64_t>::max())) return std::nullopt;
  auto sv = static_cast<int64_t>(v);
  return neg ? -sv : sv;
}

struct Line {
  std::size_t number;
  std::string_view text;
};

class Parser {
 public:
  Parser(PolicyProgram& prog, const std::map<std::string, std::size_t, std::less<>>& labels)
      : prog_(prog), labels_(labels) {}

  Instruction parse(const Line& line, std::size_t index);

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw AssembleError(line_, msg); }

  uint8_t reg(std::string_view tok) const;
  bool is_reg(std::string_view tok) const {
    tok = trim(tok);
    return tok.size() >= 2 && tok[0] == 'r' && std::isdigit(static_cast<unsigned char>(tok[1]));
  }
  int32_t imm(std::string_view tok) const;
  int32_t map_slot(std::string_view tok) const;
  int16_t jump_offset(std::string_view tok, std::size_t index) const;
  void mem(std::string_view tok, Instruction& in, unsigned width, bool reg_src) const;
  void expect_operands(const std::vector<std::string_view>& ops, std::size_t n,
                       std::string_view mnemonic) const {
    if (ops.size() != n)
      fail(std::string(mnemonic) + " expects " + std::to_string(n) + " operands");
  }

  PolicyProgram& prog_;
  const std::map<std::string, std::size_t, std::less<>>& labels_;
  std::size_t line_ = 0;
};

uint8_t Parser::reg(std::string_view tok) const {
  tok = trim(tok);
  if (!is_reg(tok)) fail("expected register, got '" + std::string(tok) + "'");
  auto v = parse_int(tok.substr(1));
  if (!v) fail("bad register '" + std::string(tok) + "'");
  if (*v < 0 || *v >= kNumRegisters) fail("register out of range: " + std::string(tok));
  return static_cast<uint8_t>(*v);
}

int32_t Parser::imm(std::string_view tok) const {
  tok = trim(tok);
  if (!tok.empty() && tok.front() == '%') return map_slot(tok.substr(1));
  auto v = parse_int(tok);
  if (!v) fail("bad immediate '" + std::string(tok) + "'");
  if (*v < std::numeric_limits<int32_t>::min() || *v > std::numeric_limits<int32_t>::max())
    fail("immediate out of 32-bit range: " + std::string(tok));
  return static_cast<int32_t>(*v);
}

int32_t Parser::map_slot(std::string_view tok) const {
  tok = trim(tok);
  for (std::size_t i = 0; i < prog_.map_refs.size(); ++i)
    if (prog_.map_refs[i].name == tok) return static_cast<int32_t>(i);
  if (auto v = parse_int(tok)) return static_cast<int32_t>(*v);
  fail("unknown map '" + std::string(tok) + "'");
}

int16_t Parser::jump_offset(std::string_view tok, std::size_t index) const {
  tok = trim(tok);
  int64_t off = 0;
  if (!tok.empty() && (tok.front() == '+' || tok.front() == '-' ||
                       std::isdigit(static_cast<unsigned char>(tok.front())))) {
    auto v = parse_int(tok);
    if (!v) fail("bad jump offset '" + std::string(tok) + "'");
    off = *v;
  } else {
    auto it = labels_.find(tok);
    if (it == labels_.end()) fail("unknown label '" + std::string(tok) + "'");
    off = static_cast<int64_t>(it->second) - static_cast<int64_t>(index) - 1;
  }
  if (off < std::numeric_limits<int16_t>::min() || off > std::numeric_limits<int16_t>::max())
    fail("jump offset out of range");
  return static_cast<int16_t>(off);
}

void Parser::mem(std::string_view tok, Instruction& in, unsigned width, bool reg_src) const {
  tok = trim(tok);
  if (tok.size() < 3 || tok.front() != '[' || tok.back() != ']')
    fail("expected memory operand, got '" + std::string(tok) + "'");
  auto body = trim(tok.substr(1, tok.size() - 2));
  Space space;
  std::string_view rest;
  if (body.substr(0, 3) == "ctx") {
    space = Space::Ctx;
    rest = body.substr(3);
  } else if (body.substr(0, 3) == "r10") {
    space = Space::Stack;
    rest = body.substr(3);
  } else {
    fail("memory base must be ctx or r10");
  }
  rest = trim(rest);
  int64_t off = 0;
  if (rest.empty()) {
    off = 0;
  } else if (rest.front() == '.' && space == Space::Ctx) {
    if (prog_.handler_name.empty()) fail("named context field requires .hook");
    const auto& schema = context_schema(prog_.handler_name);
    const auto* f = schema.find(trim(rest.substr(1)));
    if (!f) fail("unknown context field '" + std::string(rest.substr(1)) + "'");
    off = f->offset;
  } else {
    auto v = parse_int(rest);
    if (!v) fail("bad memory offset '" + std::string(rest) + "'");
    off = *v;
  }
  if (off < std::numeric_limits<int16_t>::min() || off > std::numeric_limits<int16_t>::max())
    fail("memory offset out of range");
  in.offset = static_cast<int16_t>(off);
  in.mode = Instruction::mem_mode(space, width, reg_src);
}

const std::map<std::string_view, Op>& alu_ops() {
  static const std::map<std::string_view, Op> m = {
      {"add", Op::Add}, {"sub", Op::Sub}, {"mul", Op::Mul}, {"div", Op::Div},
      {"mod", Op::Mod}, {"and", Op::And}, {"or", Op::Or},   {"xor", Op::Xor},
      {"lsh", Op::Lsh}, {"rsh", Op::Rsh}, {"mov", Op::Mov}};
  return m;
}

const std::map<std::string_view, Op>& jump_ops() {
  static const std::map<std::string_view, Op> m = {
      {"jeq", Op::Jeq}, {"jne", Op::Jne}, {"jlt", Op::Jlt},
      {"jge", Op::Jge}, {"jslt", Op::Jslt}, {"jsge", Op::Jsge}};
  return m;
}

std::optional<unsigned> width_suffix(std::string_view s) {
  if (s == "b") return 1;
  if (s == "h") return 2;
  if (s == "w") return 4;
  if (s == "dw") return 8;
  return std::nullopt;
}

Instruction Parser::parse(const Line& line, std::size_t index) {
  line_ = line.number;
  auto text = line.text;
  auto sp = text.find_first_of(" \t");
  std::string_view mnemonic = text.substr(0, sp);
  auto ops = split_operands(sp == std::string_view::npos ? std::string_view{} : text.substr(sp));
  Instruction in;

  if (auto it = alu_ops().find(mnemonic); it != alu_ops().end()) {
    expect_operands(ops, 2, mnemonic);
    in.op = it->second;
    in.dst = reg(ops[0]);
    if (is_reg(ops[1])) {
      in.src = reg(ops[1]);
      in.mode = Instruction::kRegSource;
    } else {
      in.imm = imm(ops[1]);
    }
    return in;
  }
  if (auto it = jump_ops().find(mnemonic); it != jump_ops().end()) {
    expect_operands(ops, 3, mnemonic);
    in.op = it->second;
    in.dst = reg(ops[0]);
    if (is_reg(ops[1])) {
      in.src = reg(ops[1]);
      in.mode = Instruction::kRegSource;
    } else {
      in.imm = imm(ops[1]);
    }
    in.offset = jump_offset(ops[2], index);
    return in;
  }
  if (mnemonic == "ja") {
    expect_operands(ops, 1, mnemonic);
    in.op = Op::Ja;
    in.offset = jump_offset(ops[0], index);
    return in;
  }
  if (mnemonic.substr(0, 3) == "ldx") {
    auto w = width_suffix(mnemonic.substr(3));
    if (!w) fail("unknown mnemonic '" + std::string(mnemonic) + "'");
    expect_operands(ops, 2, mnemonic);
    in.op = Op::Ld;
    in.dst = reg(ops[0]);
    mem(ops[1], in, *w, false);
    return in;
  }
  if (mnemonic.substr(0, 3) == "stx") {
    auto w = width_suffix(mnemonic.substr(3));
    if (!w) fail("unknown mnemonic '" + std::string(mnemonic) + "'");
    expect_operands(ops, 2, mnemonic);
    in.op = Op::St;
    mem(ops[0], in, *w, true);
    in.src = reg(ops[1]);
    return in;
  }
  if (mnemonic.size() > 2 && mnemonic.substr(0, 2) == "st") {
    auto w = width_suffix(mnemonic.substr(2));
    if (!w) fail("unknown mnemonic '" + std::string(mnemonic) + "'");
    expect_operands(ops, 2, mnemonic);
    in.op = Op::St;
    mem(ops[0], in, *w, false);
    in.imm = imm(ops[1]);
    return in;
  }
  if (mnemonic == "ldmap") {
    expect_operands(ops, 3, mnemonic);
    in.op = Op::LdMap;
    in.dst = reg(ops[0]);
    in.imm = map_slot(ops[1]);
    in.src = reg(ops[2]);
    in.mode = Instruction::kRegSource;
    return in;
  }
  if (mnemonic == "xadd") {
    expect_operands(ops, 3, mnemonic);
    in.op = Op::XAdd;
    in.imm = map_slot(ops[0]);
    in.dst = reg(ops[1]);
    in.src = reg(ops[2]);
    in.mode = Instruction::kRegSource;
    return in;
  }
  if (mnemonic == "call") {
    expect_operands(ops, 1, mnemonic);
    in.op = Op::Call;
    if (const auto* h = find_helper(trim(ops[0]))) {
      in.imm = static_cast<int32_t>(h->id);
    } else {
      auto v = parse_int(ops[0]);
      if (!v) fail("unknown helper '" + std::string(ops[0]) + "'");
      in.imm = static_cast<int32_t>(*v);
    }
    return in;
  }
  if (mnemonic == "exit") {
    expect_operands(ops, 0, mnemonic);
    in.op = Op::Exit;
    return in;
  }
  fail("unknown mnemonic '" + std::string(mnemonic) + "'");
}

std::optional<MapTier> parse_tier(std::string_view s) {
  if (s == "host") return MapTier::Host;
  if (s == "global") return MapTier::DeviceGlobal;
  if (s == "sm") return MapTier::SmLocal;
  return std::nullopt;
}

std::optional<AggOp> parse_agg(std::string_view s) {
  if (s == "sum") return AggOp::Sum;
  if (s == "min") return AggOp::Min;
  if (s == "max") return AggOp::Max;
  if (s == "ballot") return AggOp::Ballot;
  return std::nullopt;
}

std::optional<HookType> parse_hook_type(std::string_view s) {
  if (s == "GPU_MEM") return HookType::GpuMem;
  if (s == "GPU_SCHED") return HookType::GpuSched;
  if (s == "GPU_DEV") return HookType::GpuDev;
  return std::nullopt;
}

bool is_identifier(std::string_view s) {
  if (s.empty() || std::isdigit(static_cast<unsigned char>(s.front()))) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  return true;
}

}  // namespace

PolicyProgram assemble(std::string_view source) {
  PolicyProgram prog;
  std::vector<Line> body;
  std::map<std::string, std::size_t, std::less<>> labels;

  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos <= source.size()) {
    auto nl = source.find('\n', pos);
    auto raw = source.substr(pos, nl == std::string_view::npos ? source.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
    ++number;
    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    auto text = trim(raw);
    if (text.empty()) continue;

    if (text.front() == '.') {
      auto sp = text.find_first_of(" \t");
      auto name = text.substr(0, sp);
      auto args = sp == std::string_view::npos ? std::string_view{} : trim(text.substr(sp));
      if (name == ".hook") {
        if (!is_known_hook(args)) throw AssembleError(number, "unknown hook '" + std::string(args) + "'");
        prog.handler_name = std::string(args);
        prog.hook_type = hook_type_of(args);
      } else if (name == ".type") {
        auto t = parse_hook_type(args);
        if (!t) throw AssembleError(number, "unknown program type '" + std::string(args) + "'");
        prog.hook_type = *t;
      } else if (name == ".map") {
        auto s2 = args.find_first_of(" \t");
        auto mname = args.substr(0, s2);
        auto tier_s = s2 == std::string_view::npos ? std::string_view("global") : trim(args.substr(s2));
        auto tier = parse_tier(tier_s);
        if (!is_identifier(mname)) throw AssembleError(number, "bad map name");
        if (!tier) throw AssembleError(number, "unknown map tier '" + std::string(tier_s) + "'");
        prog.map_refs.push_back({std::string(mname), *tier});
      } else if (name == ".aggregate") {
        auto a = parse_agg(args);
        if (!a) throw AssembleError(number, "unknown aggregation '" + std::string(args) + "'");
        prog.aggregation = *a;
      } else {
        throw AssembleError(number, "unknown directive '" + std::string(name) + "'");
      }
      continue;
    }

    // Any number of leading labels, optionally followed by an instruction.
    while (true) {
      auto colon = text.find(':');
      if (colon == std::string_view::npos) break;
      auto label = trim(text.substr(0, colon));
      if (!is_identifier(label)) break;
      if (!labels.emplace(std::string(label), body.size()).second)
        throw AssembleError(number, "duplicate label '" + std::string(label) + "'");
      text = trim(text.substr(colon + 1));
    }
    if (!text.empty()) body.push_back({number, text});
  }

  Parser parser(prog, labels);
  prog.instructions.reserve(body.size());
  for (std::size_t i = 0; i < body.size(); ++i) prog.instructions.push_back(parser.parse(body[i], i));
  return prog;
}

namespace {

std::string_view mnemonic_of(Op op) {
  switch (op) {
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Mod: return "mod";
    case Op::And: return "and";
    case Op::Or: return "or";
    case Op::Xor: return "xor";
    case Op::Lsh: return "lsh";
    case Op::Rsh: return "rsh";
    case Op::Mov: return "mov";
    case Op::Ja: return "ja";
    case Op::Jeq: return "jeq";
    case Op::Jne: return "jne";
    case Op::Jlt: return "jlt";
    case Op::Jge: return "jge";
    case Op::Jslt: return "jslt";
    case Op::Jsge: return "jsge";
    case Op::LdMap: return "ldmap";
    case Op::XAdd: return "xadd";
    case Op::Call: return "call";
    case Op::Exit: return "exit";
    default: return "?";
  }
}

std::string_view width_name(unsigned w) {
  switch (w) {
    case 1: return "b";
    case 2: return "h";
    case 4: return "w";
    default: return "dw";
  }
}

std::string mem_operand(const Instruction& in) {
  std::ostringstream os;
  if (in.space() == Space::Stack) {
    os << "[r10" << (in.offset < 0 ? "-" : "+") << std::abs(static_cast<int>(in.offset)) << "]";
  } else {
    os << "[ctx" << (in.offset < 0 ? "-" : "+") << std::abs(static_cast<int>(in.offset)) << "]";
  }
  return os.str();
}

std::string signed_offset(int v) { return (v < 0 ? "-" : "+") + std::to_string(std::abs(v)); }

}  // namespace

std::string disassemble(const Instruction& in, const PolicyProgram* prog) {
  auto map_name = [&](int32_t slot) -> std::string {
    if (prog && slot >= 0 && static_cast<std::size_t>(slot) < prog->map_refs.size())
      return prog->map_refs[static_cast<std::size_t>(slot)].name;
    return std::to_string(slot);
  };
  auto r = [](unsigned n) { return "r" + std::to_string(n); };
  auto src = [&] { return in.reg_source() ? r(in.src) : std::to_string(in.imm); };
  std::ostringstream os;
  if (is_alu(in.op)) {
    os << mnemonic_of(in.op) << " " << r(in.dst) << ", " << src();
  } else if (in.op == Op::Ja) {
    os << "ja " << signed_offset(in.offset);
  } else if (is_cond_jump(in.op)) {
    os << mnemonic_of(in.op) << " " << r(in.dst) << ", " << src() << ", " << signed_offset(in.offset);
  } else if (in.op == Op::Ld) {
    os << "ldx" << width_name(in.width()) << " " << r(in.dst) << ", " << mem_operand(in);
  } else if (in.op == Op::St) {
    if (in.reg_source())
      os << "stx" << width_name(in.width()) << " " << mem_operand(in) << ", " << r(in.src);
    else
      os << "st" << width_name(in.width()) << " " << mem_operand(in) << ", " << in.imm;
  } else if (in.op == Op::LdMap) {
    os << "ldmap " << r(in.dst) << ", " << map_name(in.imm) << ", " << r(in.src);
  } else if (in.op == Op::XAdd) {
    os << "xadd " << map_name(in.imm) << ", " << r(in.dst) << ", " << r(in.src);
  } else if (in.op == Op::Call) {
    if (const auto* h = find_helper(in.imm))
      os << "call " << h->name;
    else
      os << "call " << in.imm;
  } else {
    os << "exit";
  }
  return os.str();
}

std::string disassemble(const PolicyProgram& prog) {
  std::ostringstream os;
  os << ".type " << to_string(prog.hook_type) << "\n";
  if (!prog.handler_name.empty()) os << ".hook " << prog.handler_name << "\n";
  for (const auto& m : prog.map_refs) os << ".map " << m.name << " " << to_string(m.tier) << "\n";
  if (prog.aggregation != AggOp::Sum) os << ".aggregate " << to_string(prog.aggregation) << "\n";
  for (const auto& in : prog.instructions) os << "  " << disassemble(in, &prog) << "\n";
  return os.str();
}

}  // namespace gpux
