#include "gpux/trace.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace gpux {

namespace {

constexpr uint64_t kPage = 4096;

}  // namespace

std::string_view to_string(TraceOp op) {
  switch (op) {
    case TraceOp::Access: return "ACCESS";
    case TraceOp::KernelLaunch: return "KERNEL_LAUNCH";
    case TraceOp::QueueCreate: return "QUEUE_CREATE";
    case TraceOp::QueueDestroy: return "QUEUE_DESTROY";
  }
  return "?";
}

std::string_view to_string(Pattern p) {
  switch (p) {
    case Pattern::SeqScan: return "SEQ_SCAN";
    case Pattern::Random: return "RANDOM";
    case Pattern::PeriodicSeq: return "PERIODIC_SEQ";
    case Pattern::SparseRandom: return "SPARSE_RANDOM";
    case Pattern::PeriodicBlock: return "PERIODIC_BLOCK";
    case Pattern::Stride: return "STRIDE";
    case Pattern::Zipf: return "ZIPF";
  }
  return "?";
}

Pattern parse_pattern(std::string_view s) {
  auto name = s.substr(0, s.find('('));
  for (auto p : {Pattern::SeqScan, Pattern::Random, Pattern::PeriodicSeq, Pattern::SparseRandom,
                 Pattern::PeriodicBlock, Pattern::Stride, Pattern::Zipf})
    if (to_string(p) == name) return p;
  throw TraceError("unknown pattern " + std::string(s));
}

void apply_pattern_arg(std::string_view spec, GenParams& params) {
  auto open = spec.find('(');
  if (open == std::string_view::npos) return;
  auto close = spec.find(')', open);
  if (close == std::string_view::npos || close != spec.size() - 1) throw TraceError("bad pattern " + std::string(spec));
  std::string arg(spec.substr(open + 1, close - open - 1));
  auto p = parse_pattern(spec);
  try {
    std::size_t used = 0;
    if (p == Pattern::Stride) {
      // Accepts a byte count with an optional KB/MB suffix.
      uint64_t v = std::stoull(arg, &used);
      auto unit = arg.substr(used);
      if (unit == "KB" || unit == "K") v <<= 10;
      else if (unit == "MB" || unit == "M") v <<= 20;
      else if (!unit.empty()) throw TraceError("bad stride unit " + unit);
      params.stride_bytes = v;
    } else if (p == Pattern::Zipf) {
      params.theta = std::stod(arg, &used);
      if (used != arg.size()) throw TraceError("bad zipf exponent " + arg);
    } else {
      throw TraceError(std::string(to_string(p)) + " takes no argument");
    }
  } catch (const std::logic_error&) {
    throw TraceError("bad pattern argument " + arg);
  }
}

double unit_double(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

ZipfSampler::ZipfSampler(uint64_t n, double theta) : theta_(theta) {
  if (n == 0) throw TraceError("zipf needs at least one rank");
  if (!(theta >= 0)) throw TraceError("zipf exponent must be non-negative");
  cdf_.resize(n);
  double acc = 0;
  for (uint64_t r = 0; r < n; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), theta);
    cdf_[r] = acc;
  }
  norm_ = acc;
}

uint64_t ZipfSampler::operator()(std::mt19937_64& rng) const {
  double u = unit_double(rng) * norm_;
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<uint64_t>(static_cast<uint64_t>(it - cdf_.begin()), cdf_.size() - 1);
}

double ZipfSampler::mass(uint64_t r) const { return 1.0 / std::pow(static_cast<double>(r + 1), theta_) / norm_; }

Trace gen_trace(Pattern pattern, const GenParams& p, uint64_t seed) {
  if (p.working_set_bytes < kPage || p.working_set_bytes % kPage != 0)
    throw TraceError("working set must be a positive multiple of 4096 bytes");
  if (p.events == 0) throw TraceError("trace needs at least one event");
  uint64_t pages = p.working_set_bytes / kPage;
  std::mt19937_64 rng(seed);
  Trace t;
  t.working_set_bytes = p.working_set_bytes;
  t.events.reserve(p.events);
  auto push = [&](uint64_t i, uint64_t page) {
    t.events.push_back({i * p.gap_ns, p.tenant, TraceOp::Access, page * kPage, 0});
  };
  switch (pattern) {
    case Pattern::SeqScan:
      for (uint64_t i = 0; i < p.events; ++i) push(i, i % pages);
      break;
    case Pattern::Random:
      for (uint64_t i = 0; i < p.events; ++i) push(i, rng() % pages);
      break;
    case Pattern::PeriodicSeq: {
      if (p.period_pages == 0 || p.period_pages > pages || p.repeat == 0) throw TraceError("invalid period");
      // Each window of period_pages is swept `repeat` times, then the next.
      for (uint64_t i = 0; i < p.events; ++i) {
        uint64_t window = i / (p.period_pages * p.repeat);
        push(i, (window * p.period_pages + i % p.period_pages) % pages);
      }
      break;
    }
    case Pattern::SparseRandom: {
      if (!(p.hot_fraction > 0 && p.hot_fraction <= 1) || p.phase_events == 0)
        throw TraceError("invalid sparse-random params");
      auto hot = std::max<uint64_t>(1, static_cast<uint64_t>(std::llround(p.hot_fraction * static_cast<double>(pages))));
      std::vector<uint64_t> all(pages);
      std::iota(all.begin(), all.end(), 0);
      for (uint64_t i = 0; i < p.events; ++i) {
        if (i % p.phase_events == 0) {
          // Partial Fisher-Yates: the first `hot` entries become the active set.
          for (uint64_t k = 0; k < hot; ++k) std::swap(all[k], all[k + rng() % (pages - k)]);
        }
        push(i, all[rng() % hot]);
      }
      break;
    }
    case Pattern::PeriodicBlock: {
      if (p.block_pages == 0 || p.block_pages > pages) throw TraceError("invalid block size");
      uint64_t blocks = pages / p.block_pages;
      std::vector<uint64_t> order(blocks);
      std::iota(order.begin(), order.end(), 0);
      for (uint64_t k = blocks; k > 1; --k) std::swap(order[k - 1], order[rng() % k]);
      for (uint64_t i = 0; i < p.events; ++i)
        push(i, order[(i / p.block_pages) % blocks] * p.block_pages + i % p.block_pages);
      break;
    }
    case Pattern::Stride: {
      if (p.stride_bytes == 0 || p.stride_bytes % kPage != 0 || p.stride_bytes / kPage >= pages)
        throw TraceError("stride must be a page multiple smaller than the working set");
      uint64_t s = p.stride_bytes / kPage;
      // Each pass walks the working set at the stride, one page further on
      // than the previous pass.
      uint64_t per_pass = (pages + s - 1) / s;
      for (uint64_t i = 0; i < p.events; ++i) {
        uint64_t pass = i / per_pass, k = i % per_pass;
        uint64_t page = k * s + pass % s;
        if (page >= pages) page %= pages;
        push(i, page);
      }
      break;
    }
    case Pattern::Zipf: {
      ZipfSampler z(pages, p.theta);
      std::vector<uint64_t> map(pages);
      std::iota(map.begin(), map.end(), 0);
      if (p.scatter)
        for (uint64_t k = pages; k > 1; --k) std::swap(map[k - 1], map[rng() % k]);
      for (uint64_t i = 0; i < p.events; ++i) push(i, map[z(rng)]);
      break;
    }
  }
  return t;
}

void write_trace(std::ostream& out, const Trace& t) {
  out << "# working_set_bytes " << t.working_set_bytes << "\n";
  for (const auto& e : t.events) {
    out << e.time_ns << '\t' << e.tenant << '\t' << to_string(e.op) << '\t' << e.a0;
    if (e.op == TraceOp::KernelLaunch || e.op == TraceOp::QueueCreate) out << '\t' << e.a1;
    out << '\n';
  }
}

Trace read_trace(std::istream& in) {
  Trace t;
  std::string line;
  std::size_t n = 0;
  uint64_t last = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream h(line.substr(1));
      std::string key;
      uint64_t v = 0;
      if (h >> key >> v && key == "working_set_bytes") t.working_set_bytes = v;
      continue;
    }
    std::istringstream f(line);
    TraceEvent e;
    std::string op;
    if (!(f >> e.time_ns >> e.tenant >> op >> e.a0)) throw TraceError("trace line " + std::to_string(n) + ": malformed");
    if (op == "ACCESS") e.op = TraceOp::Access;
    else if (op == "KERNEL_LAUNCH") e.op = TraceOp::KernelLaunch;
    else if (op == "QUEUE_CREATE") e.op = TraceOp::QueueCreate;
    else if (op == "QUEUE_DESTROY") e.op = TraceOp::QueueDestroy;
    else throw TraceError("trace line " + std::to_string(n) + ": unknown op " + op);
    if ((e.op == TraceOp::KernelLaunch || e.op == TraceOp::QueueCreate) && !(f >> e.a1))
      throw TraceError("trace line " + std::to_string(n) + ": missing argument");
    if (e.time_ns < last) throw TraceError("trace line " + std::to_string(n) + ": time goes backwards");
    last = e.time_ns;
    t.events.push_back(e);
  }
  return t;
}

}  // namespace gpux
