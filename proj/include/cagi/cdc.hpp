#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cagi/channel.hpp"
#include "cagi/errors.hpp"
#include "cagi/generator.hpp"
#include "cagi/numerics.hpp"
#include "cagi/objective.hpp"

namespace cagi {

// ---------------------------------------------------------------------------
// Threshold tables

inline constexpr std::array<std::string_view, 28> kSlotNames = {
    "Coarse Profile 1", "Coarse Profile 2", "Background 1",  "Background 2",  "Face Shape",     "Face Texture",
    "Eye Shape",        "Eye Texture",      "Eyebrow Shape", "Eyebrow Texture", "Mouth Shape",  "Mouth Texture",
    "Nose Shape",       "Nose Texture",     "Ear Shape",     "Ear Texture",   "Hair Shape",     "Hair Texture",
    "Neck Shape",       "Neck Texture",     "Cloth Shape",   "Cloth Texture", "Glass",          "Unknown 1",
    "Hat",              "Unknown 2",        "Earring",       "Unknown 3"};

inline constexpr std::array<double, 28> kGammaA = {0.90, 0.95, 0.80, 0.80, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95,
                                                   0.95, 0.95, 0.90, 0.90, 0.85, 0.85, 0.90, 0.90, 0.90, 0.90,
                                                   0.80, 0.80, 0.80, 0.10, 0.50, 0.10, 0.80, 0.10};

inline constexpr std::array<double, 28> kGammaB = {0.85, 0.85, 0.80, 0.80, 0.92, 0.92, 0.92, 0.92, 0.92, 0.92,
                                                   0.92, 0.92, 0.85, 0.80, 0.80, 0.80, 0.85, 0.85, 0.85, 0.85,
                                                   0.75, 0.75, 0.75, 0.10, 0.50, 0.10, 0.75, 0.10};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/**
 * Parses `slot=value` lines. Blank lines and text after '#' are ignored.
 * Every slot in [0, max_slot] must appear exactly once.
 */
inline std::vector<double> parse_thresholds(std::istream& in, const std::string& source) {
  std::vector<std::optional<double>> table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const auto body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const auto where = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError("thresholds " + where + ": expected slot=value");
    const auto key = detail::trim(std::string_view(body).substr(0, eq));
    const auto val = detail::trim(std::string_view(body).substr(eq + 1));
    std::size_t slot = 0;
    double gamma = 0.0;
    try {
      std::size_t used = 0;
      const long long parsed = std::stoll(key, &used);
      if (used != key.size() || parsed < 0) throw std::invalid_argument("slot");
      slot = static_cast<std::size_t>(parsed);
      gamma = std::stod(val, &used);
      if (used != val.size()) throw std::invalid_argument("value");
    } catch (const std::logic_error&) {
      throw ConfigError("thresholds " + where + ": malformed entry '" + body + "'");
    }
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("thresholds " + where + ": value outside [0, 1]");
    if (slot > 4096) throw ConfigError("thresholds " + where + ": slot index too large");
    if (slot >= table.size()) table.resize(slot + 1);
    if (table[slot]) throw ConfigError("thresholds " + where + ": duplicate slot " + std::to_string(slot));
    table[slot] = gamma;
  }
  if (table.empty()) throw ConfigError("thresholds " + source + ": no entries");
  std::vector<double> out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (!table[i]) throw ConfigError("thresholds " + source + ": missing slot " + std::to_string(i));
    out.push_back(*table[i]);
  }
  return out;
}

/// "gamma_A", "gamma_B", or a path to a threshold file.
inline std::vector<double> load_thresholds(const std::string& name) {
  if (name == "gamma_A") return {kGammaA.begin(), kGammaA.end()};
  if (name == "gamma_B") return {kGammaB.begin(), kGammaB.end()};
  std::ifstream in(name);
  if (!in) throw ConfigError("thresholds: '" + name + "' is neither a built-in table nor a readable file");
  return parse_thresholds(in, name);
}

// ---------------------------------------------------------------------------
// Cache

struct CacheConfig {
  std::size_t num_slots = 8;
  std::size_t latent_dim = 16;
  std::size_t capacity = 30;  // N_C entries per slot
  std::vector<double> thresholds;
  double alpha = 0.5;
  double snr_min_db = 0.0;
  double snr_max_db = 5.0;

  void validate() const {
    if (num_slots == 0 || latent_dim == 0) throw ConfigError("cache: N_S and N_L must be positive");
    if (latent_dim % 2 != 0) throw ConfigError("cache: N_L must be even so any slot subset maps to complex symbols");
    if (capacity == 0) throw ConfigError("cache: N_C must be at least 1");
    if (thresholds.size() != num_slots) {
      throw ConfigError("cache: " + std::to_string(thresholds.size()) + " thresholds for " +
                        std::to_string(num_slots) + " slots");
    }
    for (const double g : thresholds) {
      if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("cache: thresholds must lie in [0, 1]");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("cache: alpha must lie in [0, 1]");
    if (!(snr_max_db > snr_min_db)) throw ConfigError("cache: snr range must be non-empty");
  }
};

struct CacheEntry {
  std::vector<double> vector;
  double snr_tag = 0.0;
  std::uint64_t last_access = 0;
};

struct CacheMatch {
  std::size_t position = 0;
  double similarity = 0.0;
};

inline constexpr std::size_t kNoPosition = std::numeric_limits<std::size_t>::max();

/// Outcome of matching a full latent against the cache.
struct ReductionResult {
  std::vector<bool> hit_mask;      // best similarity >= gamma_i
  std::vector<bool> upgrade_mask;  // hit that is also resent because snr_cur >= stored tag
  std::vector<std::size_t> positions;     // matched position per slot, kNoPosition on a miss
  std::vector<double> similarities;       // best similarity per slot, 0 for an empty slot
  std::vector<std::size_t> kept_slots;    // misses and upgrades, ascending
  std::vector<double> reduced_vectors;    // kept slot vectors, flattened in kept_slots order
  std::vector<std::uint64_t> indices_sent;  // i * N_C + j* for every hit, ascending slot

  std::size_t n_s() const noexcept { return kept_slots.size(); }
  std::size_t hits() const { return static_cast<std::size_t>(std::count(hit_mask.begin(), hit_mask.end(), true)); }
  std::size_t upgrades() const {
    return static_cast<std::size_t>(std::count(upgrade_mask.begin(), upgrade_mask.end(), true));
  }
  /// Hits served from the cache alone.
  bool frozen(std::size_t slot) const { return hit_mask[slot] && !upgrade_mask[slot]; }
};

enum class StoreKind { inserted, upgraded, refreshed_skip };

struct StoreOutcome {
  StoreKind kind = StoreKind::inserted;
  std::size_t position = 0;
};

struct RestoreResult {
  LatentCode latent;
  std::size_t fallbacks = 0;       // slots filled by a random same-slot entry
  std::size_t empty_fallbacks = 0;  // slots filled with zeros because the slot was empty
  std::vector<bool> fallback_mask;
};

/**
 * Per-slot codebook of previously transmitted semantic vectors.
 *
 * The logical clock advances once per mutating call (commit, insert,
 * upgrade_at, store, tick). Transmitter and receiver each own one instance
 * and replay the same call sequence so their structure stays identical.
 */
class SemanticCache {
 public:
  explicit SemanticCache(CacheConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    slots_.resize(cfg_.num_slots);
  }

  const CacheConfig& config() const noexcept { return cfg_; }
  std::size_t num_slots() const noexcept { return cfg_.num_slots; }
  std::size_t latent_dim() const noexcept { return cfg_.latent_dim; }
  std::size_t capacity() const noexcept { return cfg_.capacity; }
  std::uint64_t clock() const noexcept { return clock_; }
  double threshold(std::size_t slot) const { return cfg_.thresholds.at(slot); }

  std::span<const CacheEntry> entries(std::size_t slot) const {
    check_slot(slot);
    return slots_[slot];
  }
  std::size_t size(std::size_t slot) const { return entries(slot).size(); }
  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.size();
    return n;
  }

  std::uint64_t flat_index(std::size_t slot, std::size_t position) const {
    return static_cast<std::uint64_t>(slot) * cfg_.capacity + position;
  }
  std::uint32_t index_bits() const { return cagi::index_bits(cfg_.capacity, cfg_.num_slots); }

  /// Best cosine match in `slot`; ties keep the lowest position. A zero-norm query never matches.
  std::optional<CacheMatch> match(std::size_t slot, std::span<const double> query) const {
    check_slot(slot);
    check_vector(query);
    std::optional<CacheMatch> best;
    if (std::sqrt(squared_norm(query)) < 1e-12) return best;
    const auto& entries = slots_[slot];
    for (std::size_t j = 0; j < entries.size(); ++j) {
      const double sim = cosine_similarity(query, entries[j].vector);
      if (!best || sim > best->similarity) best = CacheMatch{j, sim};
    }
    return best;
  }

  /**
   * Dry-run replacement C(.): classifies every slot without touching the
   * cache. With `upgrade_snr_db`, hits whose stored tag does not exceed it
   * are marked for an SNR-aware upgrade and kept for analog transmission.
   */
  ReductionResult reduce(const LatentCode& latent, std::optional<double> upgrade_snr_db = std::nullopt) const {
    check_latent(latent);
    const std::size_t ns = cfg_.num_slots;
    ReductionResult r;
    r.hit_mask.assign(ns, false);
    r.upgrade_mask.assign(ns, false);
    r.positions.assign(ns, kNoPosition);
    r.similarities.assign(ns, 0.0);
    for (std::size_t i = 0; i < ns; ++i) {
      const auto m = match(i, latent.slot(i));
      if (m) r.similarities[i] = m->similarity;
      if (m && m->similarity >= cfg_.thresholds[i]) {
        r.hit_mask[i] = true;
        r.positions[i] = m->position;
        r.indices_sent.push_back(flat_index(i, m->position));
        if (upgrade_snr_db && *upgrade_snr_db >= slots_[i][m->position].snr_tag) r.upgrade_mask[i] = true;
      }
      if (!r.hit_mask[i] || r.upgrade_mask[i]) {
        r.kept_slots.push_back(i);
        const auto v = latent.slot(i);
        r.reduced_vectors.insert(r.reduced_vectors.end(), v.begin(), v.end());
      }
    }
    return r;
  }

  /// One clock tick; every entry matched by `reduction` is stamped with it.
  void commit(const ReductionResult& reduction) {
    if (reduction.positions.size() != cfg_.num_slots) throw ContractViolation("cache commit: reduction shape mismatch");
    ++clock_;
    for (std::size_t i = 0; i < cfg_.num_slots; ++i) {
      const std::size_t j = reduction.positions[i];
      if (j == kNoPosition) continue;
      if (j >= slots_[i].size()) throw ContractViolation("cache commit: position out of range");
      slots_[i][j].last_access = clock_;
    }
  }

  /// Stamps the given (slot, position) pairs; used by the receiver, which only knows decoded indices.
  void touch(std::span<const std::pair<std::size_t, std::size_t>> accessed) {
    ++clock_;
    for (const auto& [slot, pos] : accessed) {
      check_slot(slot);
      if (pos < slots_[slot].size()) slots_[slot][pos].last_access = clock_;
    }
  }

  void tick() { ++clock_; }

  /// Adds an entry, evicting first when the slot is full. Returns its position.
  std::size_t insert(std::size_t slot, std::span<const double> vec, double snr_db) {
    check_slot(slot);
    check_vector(vec);
    check_snr(snr_db);
    ++clock_;
    auto& entries = slots_[slot];
    CacheEntry e{std::vector<double>(vec.begin(), vec.end()), snr_db, clock_};
    if (entries.size() >= cfg_.capacity) {
      const std::size_t pos = evict_lowest_priority(slot);
      entries.insert(entries.begin() + static_cast<std::ptrdiff_t>(pos), std::move(e));
      return pos;
    }
    entries.push_back(std::move(e));
    return entries.size() - 1;
  }

  /// Replaces the entry at `position` with a fresher copy; tags never decrease.
  void upgrade_at(std::size_t slot, std::size_t position, std::span<const double> vec, double snr_db) {
    check_slot(slot);
    check_vector(vec);
    check_snr(snr_db);
    auto& entries = slots_[slot];
    if (position >= entries.size()) throw ContractViolation("cache upgrade: position out of range");
    if (snr_db < entries[position].snr_tag) throw ContractViolation("cache upgrade: SNR below stored tag");
    ++clock_;
    entries[position] = CacheEntry{std::vector<double>(vec.begin(), vec.end()), snr_db, clock_};
  }

  /// Stores a vector under the SNR-aware update rule.
  StoreOutcome store(std::size_t slot, std::span<const double> vec, double snr_db) {
    check_snr(snr_db);
    const auto m = match(slot, vec);
    if (m && m->similarity >= cfg_.thresholds[slot]) {
      if (snr_db >= slots_[slot][m->position].snr_tag) {
        upgrade_at(slot, m->position, vec, snr_db);
        return {StoreKind::upgraded, m->position};
      }
      ++clock_;
      slots_[slot][m->position].last_access = clock_;
      return {StoreKind::refreshed_skip, m->position};
    }
    return {StoreKind::inserted, insert(slot, vec, snr_db)};
  }

  /// alpha * snr_norm + (1 - alpha) * last_access / clock
  double priority(const CacheEntry& e) const {
    const double snr_norm = std::clamp((e.snr_tag - cfg_.snr_min_db) / (cfg_.snr_max_db - cfg_.snr_min_db), 0.0, 1.0);
    const double t_norm = clock_ == 0 ? 0.0 : static_cast<double>(e.last_access) / static_cast<double>(clock_);
    return cfg_.alpha * snr_norm + (1.0 - cfg_.alpha) * t_norm;
  }

  /// Removes the minimum-priority entry (lowest position on ties) and returns where it was.
  std::size_t evict_lowest_priority(std::size_t slot) {
    check_slot(slot);
    auto& entries = slots_[slot];
    if (entries.empty()) throw ContractViolation("evict: slot " + std::to_string(slot) + " is empty");
    std::size_t worst = 0;
    double worst_score = priority(entries[0]);
    for (std::size_t j = 1; j < entries.size(); ++j) {
      const double s = priority(entries[j]);
      if (s < worst_score) {
        worst = j;
        worst_score = s;
      }
    }
    entries.erase(entries.begin() + static_cast<std::ptrdiff_t>(worst));
    return worst;
  }

  /**
   * Receiver-side C^-1: kept slots come from `received_vectors` (flattened in
   * kept-slot order), frozen hit slots from decoded indices. An index that is
   * corrupted, names another slot, or points past the slot's occupancy is
   * replaced by a uniformly random entry of the same slot.
   */
  RestoreResult restore(const ReductionResult& reduction, std::span<const double> received_vectors,
                        std::span<const DecodedIndex> indices, RngStream& rng) const {
    const std::size_t ns = cfg_.num_slots;
    const std::size_t nl = cfg_.latent_dim;
    if (reduction.hit_mask.size() != ns) throw ContractViolation("cache restore: reduction shape mismatch");
    if (received_vectors.size() != reduction.kept_slots.size() * nl) {
      throw ContractViolation("cache restore: received vector length does not match kept slots");
    }
    if (indices.size() != reduction.hits()) throw ContractViolation("cache restore: index count != hit count");
    RestoreResult out;
    out.fallback_mask.assign(ns, false);
    std::vector<double> values(ns * nl, 0.0);
    for (std::size_t k = 0; k < reduction.kept_slots.size(); ++k) {
      std::copy_n(received_vectors.begin() + static_cast<std::ptrdiff_t>(k * nl), nl,
                  values.begin() + static_cast<std::ptrdiff_t>(reduction.kept_slots[k] * nl));
    }
    std::size_t next_index = 0;
    for (std::size_t i = 0; i < ns; ++i) {
      if (!reduction.hit_mask[i]) continue;
      const DecodedIndex& idx = indices[next_index++];
      if (reduction.upgrade_mask[i]) continue;
      const auto& entries = slots_[i];
      const auto pos = resolve(i, idx);
      std::span<double> dst(values.data() + i * nl, nl);
      if (pos) {
        std::copy(entries[*pos].vector.begin(), entries[*pos].vector.end(), dst.begin());
      } else if (!entries.empty()) {
        const auto j = rng.uniform_int(static_cast<std::uint32_t>(entries.size()));
        std::copy(entries[j].vector.begin(), entries[j].vector.end(), dst.begin());
        ++out.fallbacks;
        out.fallback_mask[i] = true;
      } else {
        ++out.empty_fallbacks;
        out.fallback_mask[i] = true;
      }
    }
    out.latent = LatentCode(ns, nl, std::move(values));
    return out;
  }

  /// Position named by a decoded index if it is usable for `slot`.
  std::optional<std::size_t> resolve(std::size_t slot, const DecodedIndex& idx) const {
    if (idx.corrupted) return std::nullopt;
    if (idx.value / cfg_.capacity != slot) return std::nullopt;
    const std::size_t pos = static_cast<std::size_t>(idx.value % cfg_.capacity);
    if (pos >= slots_[slot].size()) return std::nullopt;
    return pos;
  }

  friend bool structurally_equal(const SemanticCache& a, const SemanticCache& b) {
    if (a.clock_ != b.clock_ || a.slots_.size() != b.slots_.size()) return false;
    for (std::size_t i = 0; i < a.slots_.size(); ++i) {
      if (a.slots_[i].size() != b.slots_[i].size()) return false;
      for (std::size_t j = 0; j < a.slots_[i].size(); ++j) {
        const auto& x = a.slots_[i][j];
        const auto& y = b.slots_[i][j];
        if (x.snr_tag != y.snr_tag || x.last_access != y.last_access) return false;
      }
    }
    return true;
  }

 private:
  void check_slot(std::size_t slot) const {
    if (slot >= cfg_.num_slots) throw ContractViolation("cache: slot " + std::to_string(slot) + " out of range");
  }
  void check_vector(std::span<const double> v) const {
    if (v.size() != cfg_.latent_dim) throw ContractViolation("cache: vector length != N_L");
  }
  static void check_snr(double snr_db) {
    if (!std::isfinite(snr_db)) throw ContractViolation("cache: SNR tag must be finite");
  }
  void check_latent(const LatentCode& latent) const {
    if (latent.num_slots() != cfg_.num_slots || latent.latent_dim() != cfg_.latent_dim) {
      throw ContractViolation("cache: latent dimensions do not match the cache");
    }
  }

  CacheConfig cfg_;
  std::vector<std::vector<CacheEntry>> slots_;
  std::uint64_t clock_ = 0;
};

}  // namespace cagi
