#include "gpux/verifier.hpp"

#include <algorithm>
#include <bitset>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "gpux/helpers.hpp"

namespace gpux {

namespace {

constexpr std::array<std::string_view, 20> kRuleNames = {
    "BAD_INSTRUCTION", "BAD_JUMP",           "NO_EXIT",
    "UNKNOWN_HELPER",  "HELPER_DOMAIN",      "BAD_MAP",
    "SCHEMA_MISMATCH", "OOB_ACCESS",         "READONLY_CTX",
    "UNINIT_READ",     "UNBOUNDED_LOOP",     "UNIFORM_BRANCH",
    "UNIFORM_LOOP_BOUND", "UNIFORM_MAP_KEY", "UNIFORM_HELPER_ARG",
    "UNIFORM_DECISION", "NON_ADDITIVE_AGGREGATE", "FORBIDDEN_SYNC",
    "NON_UNIFORM_ATOMIC", "BUDGET"};

constexpr uint64_t kSaturated = std::numeric_limits<uint64_t>::max();

uint64_t sat_mul(uint64_t a, uint64_t b) {
  if (a != 0 && b > kSaturated / a) return kSaturated;
  return a * b;
}

uint64_t sat_add(uint64_t a, uint64_t b) { return a > kSaturated - b ? kSaturated : a + b; }

}  // namespace

std::string_view to_string(Rule r) { return kRuleNames.at(static_cast<std::size_t>(r)); }

bool parse_rule(std::string_view s, Rule& out) {
  for (std::size_t i = 0; i < kRuleNames.size(); ++i) {
    if (kRuleNames[i] == s) {
      out = static_cast<Rule>(i);
      return true;
    }
  }
  return false;
}

bool VerifierReport::has(Rule r) const {
  return std::any_of(violations.begin(), violations.end(),
                     [r](const Violation& v) { return v.rule == r; });
}

std::string VerifierReport::to_text() const {
  std::ostringstream os;
  os << "verdict " << (accepted() ? "ACCEPT" : "REJECT") << "\n";
  for (const auto& v : violations)
    os << "violation " << v.index << " " << to_string(v.rule) << " " << v.message << "\n";
  return os.str();
}

HookBudget HookBudget::defaults(std::string_view hook) {
  HookBudget b;
  b.hook = std::string(hook);
  if (is_known_hook(hook) && hook_type_of(hook) == HookType::GpuDev) {
    b.max_instructions = 128;
    b.max_helper_calls = 8;
    b.max_memory_ops = 16;
  } else {
    b.max_instructions = 4096;
    b.max_helper_calls = 64;
    b.max_memory_ops = 256;
  }
  return b;
}

namespace {

// Abstract state on entry to an instruction.
struct AbsState {
  bool reached = false;
  std::array<Uniformity, kNumRegisters> tag{};
  std::bitset<kNumRegisters> init;
  std::array<std::optional<uint64_t>, kNumRegisters> konst{};
  std::array<Uniformity, kStackSize> stack_tag{};
  std::bitset<kStackSize> stack_init;

  friend bool operator==(const AbsState&, const AbsState&) = default;
};

AbsState join_states(const AbsState& a, const AbsState& b) {
  if (!a.reached) return b;
  if (!b.reached) return a;
  AbsState r;
  r.reached = true;
  for (std::size_t i = 0; i < kNumRegisters; ++i) {
    r.tag[i] = join(a.tag[i], b.tag[i]);
    r.konst[i] = (a.konst[i] && b.konst[i] && *a.konst[i] == *b.konst[i]) ? a.konst[i] : std::nullopt;
  }
  r.init = a.init & b.init;
  for (std::size_t i = 0; i < kStackSize; ++i) r.stack_tag[i] = join(a.stack_tag[i], b.stack_tag[i]);
  r.stack_init = a.stack_init & b.stack_init;
  return r;
}

struct Loop {
  std::size_t header = 0;
  std::size_t latch = 0;
  std::size_t control = 0;  // the loop-controlling conditional jump
  std::set<std::size_t> body;
  uint64_t multiplier = 0;  // executions of each body instruction per loop entry
  bool bounded = false;
};

class Analysis {
 public:
  Analysis(const PolicyProgram& prog, const ContextSchema* schema)
      : prog_(prog), insts_(prog.instructions), schema_(schema),
        device_(prog.hook_type == HookType::GpuDev) {}

  // Returns false when structural violations make deeper analysis unsafe.
  bool structural();
  void build_cfg();
  void dataflow();
  void check_accesses();
  void find_loops();
  void uniformity_rules();
  void forbidden_rules();
  WorstCase worst_case() const;
  bool loops_bounded() const { return loops_ok_; }

  std::vector<Violation>& violations() { return violations_; }
  const std::vector<AbsState>& states() const { return in_; }

 private:
  void add(std::size_t i, Rule r, std::string msg) {
    for (const auto& v : violations_)
      if (v.index == i && v.rule == r) return;
    violations_.push_back({i, r, std::move(msg)});
  }
  AbsState transfer(std::size_t i, const AbsState& s) const;
  Uniformity map_result_tag(std::size_t slot_known, bool slot_valid, Uniformity key) const;
  std::optional<std::size_t> map_slot_of(const AbsState& s) const;
  void read_reg(std::size_t i, const AbsState& s, int r);
  std::vector<std::size_t> reads_of(const Instruction& in) const;
  Uniformity tag_of_src(const Instruction& in, const AbsState& s) const {
    return in.reg_source() ? s.tag[in.src] : Uniformity::Uniform;
  }
  void compute_dominators();
  bool dominates(std::size_t a, std::size_t b) const;
  void analyze_loop(Loop& loop);

  const PolicyProgram& prog_;
  const std::vector<Instruction>& insts_;
  const ContextSchema* schema_;
  bool device_;
  std::vector<std::vector<std::size_t>> succ_, pred_;
  std::vector<bool> reachable_;
  std::vector<std::size_t> rpo_;
  std::vector<std::size_t> idom_;
  std::vector<AbsState> in_;
  std::vector<Loop> loops_;
  std::vector<uint64_t> multiplier_;
  std::set<std::size_t> loop_controls_;
  bool loops_ok_ = true;
  std::vector<Violation> violations_;
};

bool Analysis::structural() {
  const std::size_t n = insts_.size();
  bool ok = true;
  auto bad = [&](std::size_t i, Rule r, std::string m) {
    add(i, r, std::move(m));
    ok = false;
  };
  if (n == 0) {
    bad(0, Rule::NoExit, "empty program");
    return false;
  }
  if (schema_) {
    if (prog_.handler_name != schema_->hook)
      bad(0, Rule::SchemaMismatch, "program handler '" + prog_.handler_name + "' does not match schema '" + schema_->hook + "'");
    else if (prog_.hook_type != schema_->hook_type)
      bad(0, Rule::SchemaMismatch, "program type does not match hook");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& in = insts_[i];
    if (in.op > Op::Exit) {
      bad(i, Rule::BadInstruction, "unknown opcode");
      continue;
    }
    if (in.dst >= kNumRegisters || in.src >= kNumRegisters) {
      bad(i, Rule::BadInstruction, "register index out of range");
      continue;
    }
    bool writes_dst = is_alu(in.op) || in.op == Op::Ld || in.op == Op::LdMap;
    if (writes_dst && in.dst == kFrameRegister) bad(i, Rule::BadInstruction, "r10 is read-only");
    if (is_jump(in.op)) {
      auto t = static_cast<int64_t>(i) + 1 + in.offset;
      if (t < 0 || t >= static_cast<int64_t>(n)) bad(i, Rule::BadJump, "jump target outside program");
    }
    if (in.op == Op::Call) {
      const auto* h = find_helper(in.imm);
      if (!h)
        bad(i, Rule::UnknownHelper, "unknown helper id " + std::to_string(in.imm));
      else if (!domain_allows(domain_of(prog_.hook_type), h->domain))
        bad(i, Rule::HelperDomain, std::string(h->name) + " is not callable from " + std::string(to_string(prog_.hook_type)) + " programs");
    }
    if ((in.op == Op::LdMap || in.op == Op::XAdd) &&
        (in.imm < 0 || static_cast<std::size_t>(in.imm) >= prog_.map_refs.size()))
      bad(i, Rule::BadMap, "map slot " + std::to_string(in.imm) + " is not declared");
  }
  const auto& last = insts_.back();
  if (last.op != Op::Exit && last.op != Op::Ja) bad(n - 1, Rule::NoExit, "control falls off the end of the program");
  return ok;
}

void Analysis::build_cfg() {
  const std::size_t n = insts_.size();
  succ_.assign(n, {});
  pred_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& in = insts_[i];
    if (in.op == Op::Exit) continue;
    if (in.op == Op::Ja) {
      succ_[i].push_back(static_cast<std::size_t>(static_cast<int64_t>(i) + 1 + in.offset));
    } else if (is_cond_jump(in.op)) {
      succ_[i].push_back(i + 1);
      auto t = static_cast<std::size_t>(static_cast<int64_t>(i) + 1 + in.offset);
      if (t != i + 1) succ_[i].push_back(t);
    } else {
      succ_[i].push_back(i + 1);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (auto s : succ_[i]) pred_[s].push_back(i);

  // Iterative DFS for reachability and reverse post-order.
  reachable_.assign(n, false);
  std::vector<std::size_t> post;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  reachable_[0] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < succ_[node].size()) {
      auto s = succ_[node][next++];
      if (!reachable_[s]) {
        reachable_[s] = true;
        stack.push_back({s, 0});
      }
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  rpo_.assign(post.rbegin(), post.rend());
  compute_dominators();
}

void Analysis::compute_dominators() {
  // Cooper, Harvey, Kennedy iterative dominators over the reachable subgraph.
  const std::size_t n = insts_.size();
  constexpr std::size_t kUndef = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> order(n, kUndef);
  for (std::size_t k = 0; k < rpo_.size(); ++k) order[rpo_[k]] = k;
  idom_.assign(n, kUndef);
  idom_[0] = 0;
  auto intersect = [&](std::size_t a, std::size_t b) {
    while (a != b) {
      while (order[a] > order[b]) a = idom_[a];
      while (order[b] > order[a]) b = idom_[b];
    }
    return a;
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t k = 1; k < rpo_.size(); ++k) {
      auto b = rpo_[k];
      std::size_t nd = kUndef;
      for (auto p : pred_[b]) {
        if (!reachable_[p] || idom_[p] == kUndef) continue;
        nd = nd == kUndef ? p : intersect(p, nd);
      }
      if (nd != kUndef && idom_[b] != nd) {
        idom_[b] = nd;
        changed = true;
      }
    }
  }
}

bool Analysis::dominates(std::size_t a, std::size_t b) const {
  while (true) {
    if (a == b) return true;
    if (b == 0 || idom_[b] == b) return false;
    b = idom_[b];
  }
}

std::optional<std::size_t> Analysis::map_slot_of(const AbsState& s) const {
  if (!s.konst[1]) return std::nullopt;
  return static_cast<std::size_t>(*s.konst[1]);
}

Uniformity Analysis::map_result_tag(std::size_t slot, bool slot_valid, Uniformity key) const {
  if (!device_) return Uniformity::Uniform;
  if (!slot_valid || key != Uniformity::Uniform) return Uniformity::LaneVarying;
  return prog_.map_refs[slot].tier == MapTier::SmLocal ? Uniformity::LaneVarying : Uniformity::Uniform;
}

AbsState Analysis::transfer(std::size_t i, const AbsState& s) const {
  AbsState o = s;
  const auto& in = insts_[i];
  auto set_reg = [&](int r, Uniformity t, std::optional<uint64_t> k) {
    auto ri = static_cast<std::size_t>(r);
    o.tag[ri] = t;
    o.init.set(ri);
    o.konst[ri] = k;
  };
  if (is_alu(in.op)) {
    Uniformity src_tag = tag_of_src(in, s);
    std::optional<uint64_t> src_k = in.reg_source() ? s.konst[in.src]
                                                    : std::optional<uint64_t>(static_cast<uint64_t>(static_cast<int64_t>(in.imm)));
    if (in.op == Op::Mov) {
      set_reg(in.dst, src_tag, src_k);
    } else {
      std::optional<uint64_t> k;
      if (s.konst[in.dst] && src_k) k = alu_apply(in.op, *s.konst[in.dst], *src_k);
      set_reg(in.dst, join(s.tag[in.dst], src_tag), k);
    }
    return o;
  }
  switch (in.op) {
    case Op::Ld: {
      Uniformity t = Uniformity::Uniform;
      if (in.space() == Space::Ctx) {
        const ContextField* f = schema_ ? schema_->covering(in.offset, in.width()) : nullptr;
        t = f ? f->uniformity : Uniformity::Uniform;
        if (!device_) t = Uniformity::Uniform;
      } else {
        int64_t off = in.offset;
        if (off >= -kStackSize && off + static_cast<int64_t>(in.width()) <= 0) {
          t = Uniformity::Uninit;
          for (unsigned b = 0; b < in.width(); ++b) {
            auto idx = static_cast<std::size_t>(kStackSize + off + b);
            t = join(t, s.stack_tag[idx]);
          }
          if (t == Uniformity::Uninit) t = Uniformity::Uniform;
        }
      }
      set_reg(in.dst, t, std::nullopt);
      break;
    }
    case Op::St: {
      if (in.space() == Space::Stack) {
        int64_t off = in.offset;
        if (off >= -kStackSize && off + static_cast<int64_t>(in.width()) <= 0) {
          Uniformity t = tag_of_src(in, s);
          for (unsigned b = 0; b < in.width(); ++b) {
            auto idx = static_cast<std::size_t>(kStackSize + off + b);
            o.stack_tag[idx] = t;
            o.stack_init.set(idx);
          }
        }
      }
      break;
    }
    case Op::LdMap: {
      auto slot = static_cast<std::size_t>(in.imm);
      bool valid = slot < prog_.map_refs.size();
      set_reg(in.dst, map_result_tag(slot, valid, s.tag[in.src]), std::nullopt);
      break;
    }
    case Op::Call: {
      const auto* h = find_helper(in.imm);
      Uniformity t = Uniformity::Uniform;
      if (h) {
        switch (h->result) {
          case ResultTag::LaneVarying: t = device_ ? Uniformity::LaneVarying : Uniformity::Uniform; break;
          case ResultTag::MapDependent: {
            auto slot = map_slot_of(s);
            bool valid = slot && *slot < prog_.map_refs.size();
            t = map_result_tag(valid ? *slot : 0, valid, s.tag[2]);
            break;
          }
          default: t = Uniformity::Uniform; break;
        }
      }
      for (int r = 1; r <= 5; ++r) {
        auto ri = static_cast<std::size_t>(r);
        o.tag[ri] = Uniformity::Uninit;
        o.init.reset(ri);
        o.konst[ri] = std::nullopt;
      }
      set_reg(0, t, std::nullopt);
      break;
    }
    default:
      break;
  }
  return o;
}

void Analysis::dataflow() {
  const std::size_t n = insts_.size();
  in_.assign(n, AbsState{});
  AbsState entry;
  entry.reached = true;
  entry.tag[kFrameRegister] = Uniformity::Uniform;
  entry.init.set(kFrameRegister);
  entry.konst[kFrameRegister] = 0;
  in_[0] = entry;

  // Round-robin in reverse post-order until nothing changes.
  bool changed = true;
  while (changed) {
    changed = false;
    for (auto i : rpo_) {
      if (!in_[i].reached) continue;
      AbsState out = transfer(i, in_[i]);
      for (auto s : succ_[i]) {
        AbsState merged = join_states(in_[s], out);
        if (!(merged == in_[s])) {
          in_[s] = std::move(merged);
          changed = true;
        }
      }
    }
  }
}

std::vector<std::size_t> Analysis::reads_of(const Instruction& in) const {
  std::vector<std::size_t> r;
  if (is_alu(in.op)) {
    if (in.op != Op::Mov) r.push_back(in.dst);
    if (in.reg_source()) r.push_back(in.src);
  } else if (is_cond_jump(in.op)) {
    r.push_back(in.dst);
    if (in.reg_source()) r.push_back(in.src);
  } else if (in.op == Op::St) {
    if (in.reg_source()) r.push_back(in.src);
  } else if (in.op == Op::LdMap) {
    r.push_back(in.src);
  } else if (in.op == Op::XAdd) {
    r.push_back(in.dst);
    r.push_back(in.src);
  } else if (in.op == Op::Call) {
    if (const auto* h = find_helper(in.imm))
      for (std::size_t a = 1; a <= h->num_args; ++a) r.push_back(a);
  } else if (in.op == Op::Exit) {
    r.push_back(0);
  }
  return r;
}

void Analysis::check_accesses() {
  for (std::size_t i = 0; i < insts_.size(); ++i) {
    if (!in_[i].reached) continue;
    const auto& s = in_[i];
    const auto& in = insts_[i];
    for (auto r : reads_of(in))
      if (!s.init.test(r)) add(i, Rule::UninitRead, "read of uninitialized register r" + std::to_string(r));

    if (in.op == Op::Ld || in.op == Op::St) {
      int64_t off = in.offset;
      int64_t w = in.width();
      if (in.space() == Space::Stack) {
        if (off < -kStackSize || off + w > 0) {
          add(i, Rule::OobAccess, "stack access [r10" + std::to_string(off) + "] outside frame");
        } else if (in.op == Op::Ld) {
          for (int64_t b = 0; b < w; ++b)
            if (!s.stack_init.test(static_cast<std::size_t>(kStackSize + off + b))) {
              add(i, Rule::UninitRead, "read of uninitialized stack slot");
              break;
            }
        }
      } else {
        const ContextField* f = schema_ ? schema_->covering(off, static_cast<unsigned>(w)) : nullptr;
        if (schema_ && !f)
          add(i, Rule::OobAccess, "context access at offset " + std::to_string(off) + " is outside every field");
        else if (f && in.op == Op::St && f->mutability != Mutability::RW)
          add(i, Rule::ReadonlyCtx, "store to read-only context field " + f->name);
      }
    }
    if (in.op == Op::Call) {
      const auto* h = find_helper(in.imm);
      if (h && h->num_args > 0 && h->args[0] == ArgRule::Uniform &&
          (h->id == HelperId::MapLookup || h->id == HelperId::MapUpdate || h->id == HelperId::MapSet)) {
        auto slot = map_slot_of(s);
        if (!slot)
          add(i, Rule::BadMap, "map argument must be a constant map slot");
        else if (*slot >= prog_.map_refs.size())
          add(i, Rule::BadMap, "map slot " + std::to_string(*slot) + " is not declared");
      }
    }
  }
}

void Analysis::find_loops() {
  const std::size_t n = insts_.size();
  // Retreating edges via DFS colours; each must be a natural back edge.
  std::vector<int> colour(n, 0);
  std::vector<std::pair<std::size_t, std::size_t>> back_edges;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  colour[0] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < succ_[node].size()) {
      auto s = succ_[node][next++];
      if (colour[s] == 0) {
        colour[s] = 1;
        stack.push_back({s, 0});
      } else if (colour[s] == 1) {
        back_edges.push_back({node, s});
      }
    } else {
      colour[node] = 2;
      stack.pop_back();
    }
  }

  std::map<std::size_t, std::vector<std::size_t>> latches;
  for (auto [u, h] : back_edges) {
    if (!dominates(h, u)) {
      add(u, Rule::UnboundedLoop, "irreducible control flow");
      loops_ok_ = false;
      continue;
    }
    latches[h].push_back(u);
  }
  for (auto& [h, us] : latches) {
    if (us.size() != 1) {
      add(h, Rule::UnboundedLoop, "loop header with multiple back edges");
      loops_ok_ = false;
      continue;
    }
    Loop loop;
    loop.header = h;
    loop.latch = us.front();
    loop.body.insert(h);
    std::vector<std::size_t> work{loop.latch};
    while (!work.empty()) {
      auto x = work.back();
      work.pop_back();
      if (!loop.body.insert(x).second) continue;
      for (auto p : pred_[x])
        if (reachable_[p]) work.push_back(p);
    }
    analyze_loop(loop);
    loops_.push_back(std::move(loop));
  }

  multiplier_.assign(n, 1);
  for (const auto& loop : loops_) {
    if (!loop.bounded) continue;
    for (auto i : loop.body) multiplier_[i] = sat_mul(multiplier_[i], loop.multiplier);
  }
}

void Analysis::analyze_loop(Loop& loop) {
  const auto& latch = insts_[loop.latch];
  const auto& header = insts_[loop.header];
  auto fail = [&](std::size_t at, Rule r, std::string msg) {
    add(at, r, std::move(msg));
    loops_ok_ = false;
  };

  // Form A: "jlt c, bound, header" at the latch (continue while c < bound).
  // Form B: "jge c, bound, out" at the header, "ja header" at the latch.
  bool form_a = (latch.op == Op::Jlt || latch.op == Op::Jslt) &&
                static_cast<std::size_t>(static_cast<int64_t>(loop.latch) + 1 + latch.offset) == loop.header;
  bool form_b = false;
  if (!form_a && latch.op == Op::Ja && (header.op == Op::Jge || header.op == Op::Jsge)) {
    auto exit_t = static_cast<std::size_t>(static_cast<int64_t>(loop.header) + 1 + header.offset);
    form_b = loop.body.count(exit_t) == 0 && loop.body.count(loop.header + 1) != 0;
  }
  if (!form_a && !form_b) {
    fail(loop.latch, Rule::UnboundedLoop, "loop is not controlled by a counter compared against a bound");
    return;
  }
  loop.control = form_a ? loop.latch : loop.header;
  loop_controls_.insert(loop.control);
  const auto& ctl = insts_[loop.control];
  const bool is_signed = ctl.op == Op::Jslt || ctl.op == Op::Jsge;
  const int counter = ctl.dst;

  // Exactly one write to the counter inside the loop: add counter, +imm.
  int writes = 0;
  int64_t step = 0;
  bool bound_written = false;
  for (auto i : loop.body) {
    const auto& in = insts_[i];
    auto writes_reg = [&](int r) {
      if ((is_alu(in.op) || in.op == Op::Ld || in.op == Op::LdMap) && in.dst == r) return true;
      if (in.op == Op::Call && r >= 0 && r <= 5) return true;
      return false;
    };
    if (writes_reg(counter)) {
      ++writes;
      if (in.op == Op::Add && !in.reg_source() && in.imm > 0) step = in.imm;
    }
    if (ctl.reg_source() && writes_reg(ctl.src)) bound_written = true;
  }
  if (writes != 1 || step <= 0) {
    fail(loop.control, Rule::UnboundedLoop, "loop counter r" + std::to_string(counter) + " is not advanced by a single constant step");
    return;
  }

  // Constants flowing into the header from outside the loop.
  AbsState entry;
  for (auto p : pred_[loop.header])
    if (reachable_[p] && loop.body.count(p) == 0) entry = join_states(entry, transfer(p, in_[p]));
  if (!entry.reached || !entry.konst[static_cast<std::size_t>(counter)]) {
    fail(loop.control, Rule::UnboundedLoop, "loop counter has no constant initial value");
    return;
  }
  uint64_t init = *entry.konst[static_cast<std::size_t>(counter)];

  std::optional<uint64_t> bound;
  if (!ctl.reg_source()) {
    bound = static_cast<uint64_t>(static_cast<int64_t>(ctl.imm));
  } else if (!bound_written && entry.konst[ctl.src]) {
    bound = *entry.konst[ctl.src];
  }
  if (!bound) {
    // Deferred: the uniformity pass decides between a lane-varying bound and
    // an unknown one.
    Uniformity t = in_[loop.control].tag[ctl.src];
    if (device_ && t == Uniformity::LaneVarying)
      fail(loop.control, Rule::UniformLoopBound, "loop bound r" + std::to_string(ctl.src) + " is lane-varying");
    else
      fail(loop.control, Rule::UnboundedLoop, "loop bound r" + std::to_string(ctl.src) + " is not statically known");
    return;
  }

  uint64_t trips = 0;
  bool below = is_signed ? static_cast<int64_t>(init) < static_cast<int64_t>(*bound) : init < *bound;
  if (below) {
    // Distance fits in u64 for both signed and unsigned comparisons.
    uint64_t dist = *bound - init;
    trips = dist / static_cast<uint64_t>(step) + (dist % static_cast<uint64_t>(step) ? 1 : 0);
  }
  loop.multiplier = form_a ? std::max<uint64_t>(trips, 1) : sat_add(trips, 1);
  loop.bounded = true;
}

void Analysis::uniformity_rules() {
  if (!device_) return;
  for (std::size_t i = 0; i < insts_.size(); ++i) {
    if (!in_[i].reached) continue;
    const auto& s = in_[i];
    const auto& in = insts_[i];
    const auto lv = Uniformity::LaneVarying;
    if (is_cond_jump(in.op)) {
      bool varying = s.tag[in.dst] == lv || (in.reg_source() && s.tag[in.src] == lv);
      if (varying) {
        if (loop_controls_.count(i))
          add(i, Rule::UniformLoopBound, "loop control depends on a lane-varying value");
        else
          add(i, Rule::UniformBranch, "branch predicate depends on a lane-varying value");
      }
    } else if (in.op == Op::Call) {
      const auto* h = find_helper(in.imm);
      if (!h) continue;
      for (std::size_t a = 0; a < h->num_args; ++a) {
        Uniformity t = s.tag[a + 1];
        if (t != lv) continue;
        switch (h->args[a]) {
          case ArgRule::Uniform:
            add(i, Rule::UniformHelperArg, std::string(h->name) + " argument " + std::to_string(a + 1) + " is lane-varying");
            break;
          case ArgRule::MapKey:
            add(i, Rule::UniformMapKey, "map-update key is lane-varying");
            break;
          case ArgRule::Aggregated:
            if (prog_.aggregation != AggOp::Sum)
              add(i, Rule::NonAdditiveAggregate, "lane-varying map delta requires sum aggregation");
            break;
          case ArgRule::Any:
            break;
        }
      }
    } else if (in.op == Op::XAdd) {
      if (s.tag[in.src] == lv && prog_.aggregation != AggOp::Sum)
        add(i, Rule::NonAdditiveAggregate, "lane-varying atomic operand requires sum aggregation");
    } else if (in.op == Op::St && in.space() == Space::Ctx) {
      if (tag_of_src(in, s) == lv) add(i, Rule::UniformDecision, "lane-varying value stored to the context");
    }
  }
}

void Analysis::forbidden_rules() {
  for (std::size_t i = 0; i < insts_.size(); ++i) {
    if (!in_[i].reached) continue;
    const auto& in = insts_[i];
    if (in.op == Op::Call) {
      const auto* h = find_helper(in.imm);
      if (h && h->forbidden_sync && device_)
        add(i, Rule::ForbiddenSync, std::string(h->name) + " is a GPU-wide synchronization primitive");
    } else if (in.op == Op::XAdd && device_ && in_[i].tag[in.dst] == Uniformity::LaneVarying) {
      add(i, Rule::NonUniformAtomic, "atomic address r" + std::to_string(in.dst) + " is lane-varying");
    }
  }
}

WorstCase Analysis::worst_case() const {
  WorstCase w;
  if (!loops_ok_) return {kSaturated, kSaturated, kSaturated};
  for (std::size_t i = 0; i < insts_.size(); ++i) {
    if (!reachable_[i]) continue;
    const auto m = multiplier_[i];
    const auto& in = insts_[i];
    w.instructions = sat_add(w.instructions, m);
    if (in.op == Op::Call) {
      if (const auto* h = find_helper(in.imm)) {
        w.helper_calls = sat_add(w.helper_calls, sat_mul(m, h->budget_cost));
        if (h->memory_op) w.memory_ops = sat_add(w.memory_ops, m);
      }
    } else if (in.op == Op::Ld || in.op == Op::St || in.op == Op::LdMap || in.op == Op::XAdd) {
      w.memory_ops = sat_add(w.memory_ops, m);
    }
  }
  return w;
}

bool within(const WorstCase& w, const HookBudget& b) {
  return w.instructions <= b.max_instructions && w.helper_calls <= b.max_helper_calls &&
         w.memory_ops <= b.max_memory_ops;
}

}  // namespace

VerifierReport verify(PolicyProgram& prog, const ContextSchema& schema, const HookBudget& budget) {
  VerifierReport report;
  Analysis a(prog, &schema);
  if (a.structural()) {
    a.build_cfg();
    a.dataflow();
    a.check_accesses();
    a.find_loops();
    a.uniformity_rules();
    a.forbidden_rules();
    if (a.loops_bounded()) {
      auto w = a.worst_case();
      if (!within(w, budget)) {
        std::ostringstream os;
        os << "worst case {instructions " << w.instructions << ", helper_calls " << w.helper_calls
           << ", memory_ops " << w.memory_ops << "} exceeds budget {" << budget.max_instructions << ", "
           << budget.max_helper_calls << ", " << budget.max_memory_ops << "}";
        a.violations().push_back({0, Rule::Budget, os.str()});
      }
    }
  }
  report.violations = std::move(a.violations());
  report.verdict = report.violations.empty() ? Verdict::Accept : Verdict::Reject;
  prog.verified = report.accepted();
  return report;
}

VerifierReport verify(PolicyProgram& prog) {
  if (!is_known_hook(prog.handler_name)) {
    VerifierReport r;
    r.verdict = Verdict::Reject;
    r.violations.push_back({0, Rule::SchemaMismatch, "program has no known hook"});
    prog.verified = false;
    return r;
  }
  return verify(prog, context_schema(prog.handler_name), HookBudget::defaults(prog.handler_name));
}

UniformityState uniformity_analysis(const PolicyProgram& prog, const ContextSchema& schema) {
  UniformityState st;
  Analysis a(prog, &schema);
  st.at_entry.assign(prog.instructions.size(), {});
  if (!a.structural()) return st;
  a.build_cfg();
  a.dataflow();
  const auto& states = a.states();
  for (std::size_t i = 0; i < states.size(); ++i)
    if (states[i].reached) st.at_entry[i] = states[i].tag;
  return st;
}

BudgetCheck check_budget(const PolicyProgram& prog, const HookBudget& budget) {
  const ContextSchema* schema = is_known_hook(prog.handler_name) ? &context_schema(prog.handler_name) : nullptr;
  Analysis a(prog, schema);
  BudgetCheck r;
  if (!a.structural()) {
    r.worst_case = {kSaturated, kSaturated, kSaturated};
    return r;
  }
  a.build_cfg();
  a.dataflow();
  a.find_loops();
  r.worst_case = a.worst_case();
  r.ok = a.loops_bounded() && within(r.worst_case, budget);
  return r;
}

}  // namespace gpux
