#pragma once

// Workload traces: seeded access-pattern generators and the tab-separated
// trace file format.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpux {

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TraceOp { Access, KernelLaunch, QueueCreate, QueueDestroy };
std::string_view to_string(TraceOp op);

/// One trace line. ACCESS: a0 = byte offset into the tenant's allocation.
/// KERNEL_LAUNCH: a0 = queue, a1 = work_us. QUEUE_CREATE: a0 = class (0 LC,
/// 1 BE), a1 = priority. QUEUE_DESTROY: a0 = queue.
struct TraceEvent {
  uint64_t time_ns = 0;
  uint32_t tenant = 0;
  TraceOp op = TraceOp::Access;
  uint64_t a0 = 0;
  uint64_t a1 = 0;
  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct Trace {
  std::vector<TraceEvent> events;
  uint64_t working_set_bytes = 0;
};

enum class Pattern { SeqScan, Random, PeriodicSeq, SparseRandom, PeriodicBlock, Stride, Zipf };
std::string_view to_string(Pattern p);
Pattern parse_pattern(std::string_view s);  // also accepts STRIDE(65536) and ZIPF(0.99)

struct GenParams {
  uint64_t working_set_bytes = 8ull << 20;
  uint64_t events = 2048;
  uint64_t gap_ns = 0;          // time between consecutive events
  uint32_t tenant = 0;
  uint64_t stride_bytes = 65536;  // STRIDE
  double theta = 0.99;            // ZIPF
  bool scatter = false;           // ZIPF: spread ranks over pages by a seeded permutation
  uint64_t period_pages = 256;    // PERIODIC_SEQ window
  uint32_t repeat = 2;            // PERIODIC_SEQ sweeps per window
  uint64_t block_pages = 64;      // PERIODIC_BLOCK
  double hot_fraction = 0.1;      // SPARSE_RANDOM active share of pages
  uint64_t phase_events = 4096;   // SPARSE_RANDOM events before the active set changes
};

/// Deterministic for a given (pattern, params, seed).
Trace gen_trace(Pattern pattern, const GenParams& params, uint64_t seed);

/// Sets pattern-specific fields from an argument like STRIDE(65536).
void apply_pattern_arg(std::string_view spec, GenParams& params);

/// Uniform double in [0, 1) from 53 random bits; identical on every platform.
double unit_double(std::mt19937_64& rng);

/// Inverse-CDF sampler for ranks 0..n-1 with P(r) proportional to 1/(r+1)^theta.
class ZipfSampler {
 public:
  ZipfSampler(uint64_t n, double theta);
  uint64_t operator()(std::mt19937_64& rng) const;
  /// Analytic probability of rank r.
  double mass(uint64_t r) const;

 private:
  std::vector<double> cdf_;
  double norm_ = 0;
  double theta_;
};

void write_trace(std::ostream& out, const Trace& t);
Trace read_trace(std::istream& in);

}  // namespace gpux
