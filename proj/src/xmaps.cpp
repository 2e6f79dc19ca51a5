#include "gpux/xmaps.hpp"

#include <algorithm>

namespace gpux {

std::string_view to_string(MapKind k) {
  switch (k) {
    case MapKind::Array: return "ARRAY";
    case MapKind::Hash: return "HASH";
    case MapKind::PerWarpAccum: return "PER_WARP_ACCUM";
  }
  return "?";
}

CrossMap::CrossMap(MapConfig cfg, uint32_t sm_count, uint64_t epoch)
    : cfg_(std::move(cfg)), sm_count_(sm_count), epoch_(epoch) {
  if (cfg_.key_width == 0 || cfg_.value_width == 0) throw MapError("map widths must be positive");
  if (cfg_.kind == MapKind::Array && cfg_.entries == 0) throw MapError("array map needs entries > 0");
  canonical_ = cfg_.initial;
  if (cfg_.kind == MapKind::Array) {
    for (const auto& [k, v] : canonical_) check_key(k);
    for (uint64_t k = 0; k < cfg_.entries; ++k) canonical_.emplace(k, 0);
  }
  MapShard global;
  global.map_id = cfg_.id;
  global.tier = {ShardTier::DeviceGlobal, 0};
  global.last_flush_epoch = epoch;
  shards_.push_back(global);
  if (cfg_.kind == MapKind::PerWarpAccum || cfg_.tier_policy == TierPolicy::AccessDriven) {
    for (uint32_t s = 0; s < sm_count_; ++s) {
      MapShard local = global;
      local.tier = {ShardTier::SmLocal, s};
      shards_.push_back(local);
    }
  }
}

void CrossMap::check_key(uint64_t key) const {
  if (cfg_.kind == MapKind::Array && key >= cfg_.entries)
    throw MapError("key " + std::to_string(key) + " out of range for array map " + cfg_.name);
}

MapShard& CrossMap::shard_for(uint64_t key, const Origin& o) {
  bool local = cfg_.kind == MapKind::PerWarpAccum || promoted(key);
  if (local && shards_.size() > 1) return shards_.at(1 + o.sm % sm_count_);
  return shards_[0];
}

int64_t CrossMap::pending_from(uint32_t sm, uint64_t key) const {
  int64_t sum = 0;
  for (const auto& s : shards_) {
    auto it = s.delta.find({sm, key});
    if (it != s.delta.end()) sum += it->second;
  }
  return sum;
}

CrossMap& MapStore::create(MapConfig cfg) {
  if (maps_.count(cfg.id)) throw MapError("duplicate map id " + std::to_string(cfg.id));
  if (cfg.name.empty()) cfg.name = "map" + std::to_string(cfg.id);
  if (find(cfg.name)) throw MapError("duplicate map name " + cfg.name);
  auto id = cfg.id;
  return maps_.emplace(id, CrossMap(std::move(cfg), sm_count_, epoch_)).first->second;
}

CrossMap& MapStore::ensure(const std::string& name, MapKind kind) {
  for (auto& [id, m] : maps_)
    if (m.name() == name) return m;
  MapConfig cfg;
  cfg.id = maps_.empty() ? 0 : maps_.rbegin()->first + 1;
  cfg.name = name;
  cfg.kind = kind;
  return create(std::move(cfg));
}

CrossMap& MapStore::get(uint32_t id) {
  auto it = maps_.find(id);
  if (it == maps_.end()) throw MapError("unknown map " + std::to_string(id));
  return it->second;
}

const CrossMap& MapStore::get(uint32_t id) const {
  auto it = maps_.find(id);
  if (it == maps_.end()) throw MapError("unknown map " + std::to_string(id));
  return it->second;
}

const CrossMap* MapStore::find(const std::string& name) const {
  for (const auto& [id, m] : maps_)
    if (m.name() == name) return &m;
  return nullptr;
}

void MapStore::update(uint32_t id, uint64_t key, int64_t delta, const Origin& origin) {
  auto& m = get(id);
  m.check_key(key);
  if (origin.host) {
    m.canonical_[key] += delta;
    return;
  }
  if (m.cfg_.tier_policy == TierPolicy::AccessDriven && !m.promoted(key) &&
      ++m.kernel_updates_[key] > promote_threshold_)
    m.promoted_[key] = true;
  m.shard_for(key, origin).delta[{origin.sm % sm_count_, key}] += delta;
}

void MapStore::set(uint32_t id, uint64_t key, int64_t value) {
  auto& m = get(id);
  m.check_key(key);
  m.canonical_[key] = value;
}

LookupResult MapStore::lookup(uint32_t id, uint64_t key, const Origin& domain) const {
  const auto& m = get(id);
  LookupResult r;
  r.epoch = m.epoch_;
  auto it = m.canonical_.find(key);
  int64_t base = it == m.canonical_.end() ? 0 : it->second;
  if (domain.host) {
    r.value = base;
    r.cost_ns = costs_.host_ns;
    return r;
  }
  r.value = base + m.pending_from(domain.sm % sm_count_, key);
  if (m.kind() == MapKind::PerWarpAccum || m.promoted(key))
    r.cost_ns = costs_.sm_local_ns;
  else
    r.cost_ns = costs_.device_global_ns;
  return r;
}

uint64_t MapStore::snapshot_merge() {
  ++epoch_;
  ++merges_;
  for (auto& [id, m] : maps_) {
    for (auto& s : m.shards_) {
      for (const auto& [sk, d] : s.delta) m.canonical_[sk.second] += d;
      s.delta.clear();
      s.last_flush_epoch = epoch_;
    }
    m.kernel_updates_.clear();
    m.epoch_ = epoch_;
  }
  return epoch_;
}

uint64_t MapStore::pending_deltas() const {
  uint64_t n = 0;
  for (const auto& [id, m] : maps_)
    for (const auto& s : m.shards_) n += s.delta.size();
  return n;
}

std::vector<MapDumpRecord> MapStore::dump() const {
  std::vector<MapDumpRecord> out;
  for (const auto& [id, m] : maps_)
    for (const auto& [k, v] : m.canonical_) out.push_back({id, m.epoch_, k, v});
  return out;
}

std::vector<uint32_t> MapStore::ids() const {
  std::vector<uint32_t> out;
  for (const auto& [id, m] : maps_) out.push_back(id);
  return out;
}

uint32_t MapView::id(std::size_t slot) const {
  if (slot >= slots_.size()) throw ExecError("unbound map slot " + std::to_string(slot));
  return slots_[slot];
}

int64_t MapView::map_lookup(std::size_t slot, uint64_t key) {
  auto r = store_.lookup(id(slot), key, origin_);
  read_cost_ns_ += r.cost_ns;
  return r.value;
}

void MapView::map_add(std::size_t slot, uint64_t key, int64_t delta) {
  try {
    store_.update(id(slot), key, delta, origin_);
  } catch (const MapError& e) {
    throw ExecError(e.what());
  }
}

void MapView::map_set(std::size_t slot, uint64_t key, int64_t value) {
  if (!origin_.host) throw ExecError("device programs may only add to maps");
  try {
    store_.set(id(slot), key, value);
  } catch (const MapError& e) {
    throw ExecError(e.what());
  }
}

uint64_t MapView::kfunc(HelperId hid, std::span<const uint64_t, 5> args) {
  return kfunc_ ? kfunc_(hid, args) : 0;
}

std::vector<uint32_t> bind_maps(MapStore& store, const PolicyProgram& prog) {
  std::vector<uint32_t> ids;
  for (const auto& ref : prog.map_refs) {
    auto kind = ref.tier == MapTier::SmLocal ? MapKind::PerWarpAccum : MapKind::Hash;
    ids.push_back(store.ensure(ref.name, kind).id());
  }
  return ids;
}

}  // namespace gpux
