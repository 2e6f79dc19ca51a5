#pragma once

// Hierarchical cross-layer maps.
//
// One logical key-value store per map. Host updates land in the canonical
// store immediately; device updates are staged as additive deltas in a shard
// (device-global or SM-local) and folded into canonical at snapshot_merge().
// Device lookups see canonical plus the pending deltas issued from their own
// SM; host lookups see canonical only.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpux/interpreter.hpp"

namespace gpux {

enum class MapKind { Array, Hash, PerWarpAccum };
enum class TierPolicy { Static, AccessDriven };
std::string_view to_string(MapKind k);

struct ShardTier {
  enum Kind { HostDram, DeviceGlobal, SmLocal } kind = DeviceGlobal;
  uint32_t sm = 0;  // SmLocal only
  friend bool operator==(const ShardTier&, const ShardTier&) = default;
};

struct Origin {
  bool host = true;
  uint32_t sm = 0;
  uint32_t warp = 0;
  static Origin from_host() { return {}; }
  static Origin from_warp(uint32_t sm, uint32_t warp) { return {false, sm, warp}; }
};

struct MapShard {
  uint32_t map_id = 0;
  ShardTier tier;
  // Pending deltas keyed by (origin SM, key) so each SM can read its own.
  std::map<std::pair<uint32_t, uint64_t>, int64_t> delta;
  uint64_t last_flush_epoch = 0;
  bool empty() const { return delta.empty(); }
};

struct MapConfig {
  uint32_t id = 0;
  std::string name;
  MapKind kind = MapKind::Hash;
  uint32_t key_width = 8;
  uint32_t value_width = 8;
  uint64_t entries = 0;  // ARRAY size
  TierPolicy tier_policy = TierPolicy::Static;
  std::map<uint64_t, int64_t> initial;
};

class MapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LookupResult {
  int64_t value = 0;
  uint64_t epoch = 0;
  uint64_t cost_ns = 0;
};

/// Read latency by tier. The host/device gap models a PCIe round trip.
struct TierCosts {
  uint64_t sm_local_ns = 20;
  uint64_t device_global_ns = 400;
  uint64_t host_from_device_ns = 120000;
  uint64_t host_ns = 50;
  uint64_t merge_ns = 5000;
};

class CrossMap {
 public:
  CrossMap(MapConfig cfg, uint32_t sm_count, uint64_t epoch);

  uint32_t id() const { return cfg_.id; }
  const std::string& name() const { return cfg_.name; }
  MapKind kind() const { return cfg_.kind; }
  uint64_t epoch() const { return epoch_; }
  const std::map<uint64_t, int64_t>& canonical() const { return canonical_; }
  const std::vector<MapShard>& shards() const { return shards_; }
  bool promoted(uint64_t key) const { return promoted_.count(key) != 0; }

 private:
  friend class MapStore;
  void check_key(uint64_t key) const;
  MapShard& shard_for(uint64_t key, const Origin& o);
  int64_t pending_from(uint32_t sm, uint64_t key) const;

  MapConfig cfg_;
  uint32_t sm_count_;
  uint64_t epoch_;
  std::map<uint64_t, int64_t> canonical_;
  std::vector<MapShard> shards_;  // [0] device-global, then SM-local 0..n-1
  std::map<uint64_t, uint64_t> kernel_updates_;
  std::map<uint64_t, bool> promoted_;
};

struct MapDumpRecord {
  uint32_t map_id = 0;
  uint64_t epoch = 0;
  uint64_t key = 0;
  int64_t value = 0;
  friend bool operator==(const MapDumpRecord&, const MapDumpRecord&) = default;
};

class MapStore {
 public:
  explicit MapStore(uint32_t sm_count = 4, uint64_t promote_threshold = 32, TierCosts costs = {})
      : sm_count_(sm_count), promote_threshold_(promote_threshold), costs_(costs) {}

  CrossMap& create(MapConfig cfg);  // duplicate id or name -> MapError
  /// Existing map by name, or a new HASH map with the next free id.
  CrossMap& ensure(const std::string& name, MapKind kind = MapKind::Hash);

  CrossMap& get(uint32_t id);
  const CrossMap& get(uint32_t id) const;
  const CrossMap* find(const std::string& name) const;

  void update(uint32_t id, uint64_t key, int64_t delta, const Origin& origin);
  /// Last-writer-wins store; host origin only.
  void set(uint32_t id, uint64_t key, int64_t value);
  LookupResult lookup(uint32_t id, uint64_t key, const Origin& domain) const;

  /// Folds every shard into canonical and advances every map's epoch.
  uint64_t snapshot_merge();
  uint64_t epoch() const { return epoch_; }
  uint64_t merges() const { return merges_; }
  uint64_t pending_deltas() const;

  std::vector<MapDumpRecord> dump() const;
  std::vector<uint32_t> ids() const;
  uint32_t sm_count() const { return sm_count_; }
  const TierCosts& costs() const { return costs_; }

 private:
  uint32_t sm_count_;
  uint64_t promote_threshold_;
  TierCosts costs_;
  uint64_t epoch_ = 0;
  uint64_t merges_ = 0;
  std::map<uint32_t, CrossMap> maps_;
};

using KfuncHandler = std::function<uint64_t(HelperId, std::span<const uint64_t, 5>)>;

/// Runtime view binding a program's map slots to store maps. Device views
/// update through SM shards; host views write canonical directly.
class MapView : public Runtime {
 public:
  MapView(MapStore& store, std::vector<uint32_t> slots, Origin origin, KfuncHandler kfunc = {})
      : store_(store), slots_(std::move(slots)), origin_(origin), kfunc_(std::move(kfunc)) {}

  int64_t map_lookup(std::size_t slot, uint64_t key) override;
  void map_add(std::size_t slot, uint64_t key, int64_t delta) override;
  void map_set(std::size_t slot, uint64_t key, int64_t value) override;
  uint64_t kfunc(HelperId id, std::span<const uint64_t, 5> args) override;

  uint64_t read_cost_ns() const { return read_cost_ns_; }

 private:
  uint32_t id(std::size_t slot) const;
  MapStore& store_;
  std::vector<uint32_t> slots_;
  Origin origin_;
  KfuncHandler kfunc_;
  uint64_t read_cost_ns_ = 0;
};

/// Resolves map_refs by name, creating HASH maps (SM-local tier refs become
/// PER_WARP_ACCUM) that do not exist yet.
std::vector<uint32_t> bind_maps(MapStore& store, const PolicyProgram& prog);

}  // namespace gpux
