// tracklet.hpp - feature tracklet corpus generation
//
// A feature tracklet is an array of T+1 (feature, meta) components with
// strictly decreasing frame indices; component 0 plays the query-detection
// role and components 1..T the agent history. Five set formulations are
// supported, graded by difficulty:
//   1 consecutive        same person, consecutive frames
//   2 delayed query      query separated from the history by a gap < F
//   3 gapped             up to S transitions with gaps of at most F
//   4 intruded           up to N history slots replaced by other people
//   5 gapped + intruded  both corruptions combined
// Sets are balanced: half positives (query matches the history identity
// mode), half negatives, shuffled.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "msdoas/common.hpp"
#include "msdoas/embedding.hpp"

namespace msdoas {

struct FeatureTracklet {
  std::vector<Observation> components;  // size T+1, frames strictly decreasing
  int label = 0;                        // 1 = query matches history mode

  int memory() const { return static_cast<int>(components.size()) - 1; }
};

enum class TrackletKind {
  consecutive = 1,
  delayed_query = 2,
  gapped = 3,
  intruded = 4,
  gapped_intruded = 5,
};

inline TrackletKind tracklet_kind_from_int(int k) {
  if (k < 1 || k > 5)
    throw UsageError("tracklet kind must be in 1..5, got " + std::to_string(k));
  return static_cast<TrackletKind>(k);
}

struct FactoryConfig {
  TrackletKind kind = TrackletKind::consecutive;
  int set_size = 0;        // M: number of tracklets to emit
  int memory = 5;          // T: history length
  int max_gap = 2;         // F: largest frame step (kinds 2, 3, 5)
  int max_gapped_steps = 1;  // S: how many transitions may exceed 1 (kinds 3, 5)
  int max_intruders = 1;   // N: history slots that may be replaced (kinds 4, 5)
  std::uint64_t seed = 0;

  bool uses_gaps() const {
    return kind == TrackletKind::gapped || kind == TrackletKind::gapped_intruded;
  }
  bool uses_intruders() const {
    return kind == TrackletKind::intruded ||
           kind == TrackletKind::gapped_intruded;
  }

  void validate() const {
    if (set_size <= 0) throw UsageError("factory: M must be >= 1");
    if (memory < 1) throw UsageError("factory: T must be >= 1");
    if ((kind == TrackletKind::delayed_query || uses_gaps()) && max_gap < 2)
      throw UsageError("factory: F must be >= 2 for kinds 2, 3 and 5");
    if (uses_gaps() && (max_gapped_steps < 1 || max_gapped_steps > memory))
      throw UsageError("factory: S must satisfy 1 <= S <= T");
    if (uses_intruders() && (max_intruders < 1 || max_intruders > memory))
      throw UsageError("factory: N must satisfy 1 <= N <= T");
  }
};

// Binary substitution mask over the T+1 components. Bit 0 (the query slot)
// is never set: intruders corrupt the history, not the query.
struct MaskVector {
  std::vector<std::uint8_t> bits;

  int popcount() const {
    int c = 0;
    for (std::uint8_t b : bits) c += b ? 1 : 0;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Labelling
// ---------------------------------------------------------------------------

// Most frequent identity; ties resolved to the smallest id so labelling is
// deterministic.
inline int mode_identity(const std::vector<int>& ids) {
  if (ids.empty()) throw DataError("mode_identity: empty identity list");
  std::map<int, int> counts;
  for (int id : ids) ++counts[id];
  int best_id = ids.front();
  int best_count = 0;
  for (const auto& [id, count] : counts) {
    if (count > best_count) {  // map iterates ascending ids, so first max wins
      best_count = count;
      best_id = id;
    }
  }
  return best_id;
}

// 1 iff the query identity equals the mode of the history identities.
inline int label_tracklet(const FeatureTracklet& t) {
  if (t.components.size() < 2)
    throw DataError("label_tracklet: tracklet needs a query and a history");
  std::vector<int> history_ids;
  history_ids.reserve(t.components.size() - 1);
  for (std::size_t i = 1; i < t.components.size(); ++i)
    history_ids.push_back(t.components[i].meta.identity);
  return t.components[0].meta.identity == mode_identity(history_ids) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Membership predicate
// ---------------------------------------------------------------------------

namespace detail {

inline bool frames_strictly_decreasing(const FeatureTracklet& t) {
  for (std::size_t i = 0; i + 1 < t.components.size(); ++i)
    if (t.components[i].meta.frame <= t.components[i + 1].meta.frame)
      return false;
  return true;
}

inline int transition_gap(const FeatureTracklet& t, std::size_t n) {
  return t.components[n].meta.frame - t.components[n + 1].meta.frame;
}

// history transitions are indices 1..T-1; `from` selects whether the query
// transition (index 0) is included
inline bool gaps_all_one(const FeatureTracklet& t, std::size_t from) {
  for (std::size_t n = from; n + 1 < t.components.size(); ++n)
    if (transition_gap(t, n) != 1) return false;
  return true;
}

inline bool gaps_bounded(const FeatureTracklet& t, std::size_t from, int max_gap,
                         int max_gapped) {
  int gapped = 0;
  for (std::size_t n = from; n + 1 < t.components.size(); ++n) {
    const int gap = transition_gap(t, n);
    if (gap < 1 || gap > max_gap) return false;
    if (gap > 1) ++gapped;
  }
  return gapped <= max_gapped;
}

// Positions 1..T whose identity differs from `base`; counts substituted
// history slots for the intruded kinds.
inline int history_mismatch_count(const FeatureTracklet& t, int base) {
  int c = 0;
  for (std::size_t i = 1; i < t.components.size(); ++i)
    if (t.components[i].meta.identity != base) ++c;
  return c;
}

inline bool history_single_identity(const FeatureTracklet& t) {
  for (std::size_t i = 2; i < t.components.size(); ++i)
    if (t.components[i].meta.identity != t.components[1].meta.identity)
      return false;
  return true;
}

}  // namespace detail

// True iff the tracklet is a member of the configured set (positive subset
// for label 1, negative subset for label 0). Pure predicate.
//
// Gap strictness follows the set definitions as stated: the delayed-query
// kind bounds the query gap strictly (gap < F) while the gapped kinds bound
// every gap inclusively (gap <= F).
inline bool validate_membership(const FeatureTracklet& t,
                                const FactoryConfig& cfg) {
  using namespace detail;
  if (static_cast<int>(t.components.size()) != cfg.memory + 1) return false;
  if (!frames_strictly_decreasing(t)) return false;
  if (t.label != label_tracklet(t)) return false;

  const int query_id = t.components[0].meta.identity;
  const bool positive = t.label == 1;

  switch (cfg.kind) {
    case TrackletKind::consecutive:
      if (!history_single_identity(t)) return false;
      return positive ? gaps_all_one(t, 0) : gaps_all_one(t, 1);

    case TrackletKind::delayed_query:
      if (!history_single_identity(t)) return false;
      if (!gaps_all_one(t, 1)) return false;
      // negatives coincide with the consecutive kind's negatives: the query
      // gap is unconstrained beyond ordering
      return positive ? transition_gap(t, 0) < cfg.max_gap : true;

    case TrackletKind::gapped:
      if (!history_single_identity(t)) return false;
      return gaps_bounded(t, positive ? 0 : 1, cfg.max_gap,
                          cfg.max_gapped_steps);

    case TrackletKind::intruded: {
      const int base = positive
                           ? query_id
                           : mode_identity([&] {
                               std::vector<int> ids;
                               for (std::size_t i = 1; i < t.components.size();
                                    ++i)
                                 ids.push_back(t.components[i].meta.identity);
                               return ids;
                             }());
      if (detail::history_mismatch_count(t, base) > cfg.max_intruders)
        return false;
      return positive ? gaps_all_one(t, 0) : gaps_all_one(t, 1);
    }

    case TrackletKind::gapped_intruded: {
      const int base = positive
                           ? query_id
                           : mode_identity([&] {
                               std::vector<int> ids;
                               for (std::size_t i = 1; i < t.components.size();
                                    ++i)
                                 ids.push_back(t.components[i].meta.identity);
                               return ids;
                             }());
      if (detail::history_mismatch_count(t, base) > cfg.max_intruders)
        return false;
      return gaps_bounded(t, positive ? 0 : 1, cfg.max_gap,
                          cfg.max_gapped_steps);
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Intruder substitution
// ---------------------------------------------------------------------------

// Replaces the components at set mask bits with the donor entries at the
// same index. Substituted slots keep the skeleton's frame index: an identity
// switch changes who occupies a time slot, not when.
inline FeatureTracklet apply_intruders(const FeatureTracklet& t,
                                       const MaskVector& mask,
                                       const std::vector<Observation>& donors) {
  if (mask.bits.size() != t.components.size())
    throw DataError("apply_intruders: mask/tracklet length mismatch");
  if (donors.size() != t.components.size())
    throw DataError("apply_intruders: mask/donor length mismatch");
  if (!mask.bits.empty() && mask.bits[0])
    throw DataError("apply_intruders: query slot (bit 0) must not be masked");

  FeatureTracklet out = t;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (!mask.bits[i]) continue;
    out.components[i].feature = donors[i].feature;
    out.components[i].meta.identity = donors[i].meta.identity;
    out.components[i].meta.sequence = donors[i].meta.sequence;
    // frame index stays the skeleton's
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

// Pool indexed for window sampling: per (sequence, identity), maximal runs of
// consecutive frames; plus a frame -> rows map for query/donor lookup.
class PoolIndex {
 public:
  struct Run {
    int start_frame = 0;
    std::vector<int> rows;  // pool row index per frame, consecutive
  };
  struct Person {
    std::string sequence;
    int identity = 0;
    std::vector<Run> runs;
  };

  explicit PoolIndex(const std::vector<Observation>& pool) : pool_(&pool) {
    std::map<std::pair<std::string, int>, std::vector<std::pair<int, int>>>
        grouped;  // (seq, id) -> (frame, row)
    for (int row = 0; row < static_cast<int>(pool.size()); ++row) {
      const ObservationMeta& m = pool[row].meta;
      grouped[{m.sequence, m.identity}].push_back({m.frame, row});
      by_frame_[m.frame].push_back(row);
    }
    for (auto& [key, entries] : grouped) {
      std::sort(entries.begin(), entries.end());
      Person person;
      person.sequence = key.first;
      person.identity = key.second;
      Run run;
      int prev_frame = -2;
      for (const auto& [frame, row] : entries) {
        if (frame == prev_frame) continue;  // duplicate observation, keep first
        if (frame != prev_frame + 1 && !run.rows.empty()) {
          person.runs.push_back(std::move(run));
          run = Run{};
        }
        if (run.rows.empty()) run.start_frame = frame;
        run.rows.push_back(row);
        prev_frame = frame;
      }
      if (!run.rows.empty()) person.runs.push_back(std::move(run));
      people_.push_back(std::move(person));
    }
  }

  const std::vector<Person>& people() const { return people_; }
  const std::vector<Observation>& pool() const { return *pool_; }

  int identity_count() const {
    std::vector<int> ids;
    for (const auto& p : people_) ids.push_back(p.identity);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return static_cast<int>(ids.size());
  }

  int longest_run() const {
    std::size_t best = 0;
    for (const auto& p : people_)
      for (const auto& r : p.runs) best = std::max(best, r.rows.size());
    return static_cast<int>(best);
  }

  // uniformly pick a pool row at the given frame whose identity differs from
  // `exclude`; -1 when none exists
  int pick_at_frame(Rng& rng, int frame, int exclude) const {
    const auto it = by_frame_.find(frame);
    if (it == by_frame_.end()) return -1;
    std::vector<int> candidates;
    for (int row : it->second)
      if ((*pool_)[row].meta.identity != exclude) candidates.push_back(row);
    if (candidates.empty()) return -1;
    return candidates[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
  }

  // uniformly pick any pool row whose identity differs from `exclude`
  int pick_anywhere(Rng& rng, int exclude) const {
    for (int attempt = 0; attempt < 256; ++attempt) {
      const int row = static_cast<int>(
          rng.uniform_int(0, static_cast<std::int64_t>(pool_->size()) - 1));
      if ((*pool_)[row].meta.identity != exclude) return row;
    }
    return -1;
  }

 private:
  const std::vector<Observation>* pool_;
  std::vector<Person> people_;
  std::unordered_map<int, std::vector<int>> by_frame_;
};

struct GapPlan {
  std::vector<int> gaps;  // gaps[n] = f(x_n) - f(x_{n+1}), size T
  int span() const {
    int s = 0;
    for (int g : gaps) s += g;
    return s;
  }
};

// Draws per-transition gaps for the configured kind. The number of gapped
// transitions is uniform over the allowed range, gapped sizes uniform in
// [2, F].
inline GapPlan sample_gaps(Rng& rng, const FactoryConfig& cfg) {
  GapPlan plan;
  plan.gaps.assign(cfg.memory, 1);
  switch (cfg.kind) {
    case TrackletKind::consecutive:
    case TrackletKind::intruded:
      break;
    case TrackletKind::delayed_query:
      // query gap strictly below F
      plan.gaps[0] = static_cast<int>(rng.uniform_int(1, cfg.max_gap - 1));
      break;
    case TrackletKind::gapped:
    case TrackletKind::gapped_intruded: {
      const int gapped =
          static_cast<int>(rng.uniform_int(0, cfg.max_gapped_steps));
      std::vector<int> positions(cfg.memory);
      for (int i = 0; i < cfg.memory; ++i) positions[i] = i;
      for (int i = 0; i < gapped; ++i) {  // partial Fisher-Yates
        const int j = static_cast<int>(
            rng.uniform_int(i, static_cast<std::int64_t>(positions.size()) - 1));
        std::swap(positions[i], positions[j]);
        plan.gaps[positions[i]] =
            static_cast<int>(rng.uniform_int(2, cfg.max_gap));
      }
      break;
    }
  }
  return plan;
}

// Picks a person and a frame window realising the gap plan over slots
// `first_slot..T`. Returns the component rows most-recent-first, or empty on
// failure.
inline std::vector<int> sample_window(Rng& rng, const PoolIndex& index,
                                      const GapPlan& plan, int first_slot,
                                      int component_count,
                                      const PoolIndex::Person** person_out) {
  const auto& people = index.people();
  if (people.empty()) return {};
  const int person_idx = static_cast<int>(
      rng.uniform_int(0, static_cast<std::int64_t>(people.size()) - 1));
  const PoolIndex::Person& person = people[person_idx];
  if (person.runs.empty()) return {};
  const int run_idx = static_cast<int>(
      rng.uniform_int(0, static_cast<std::int64_t>(person.runs.size()) - 1));
  const PoolIndex::Run& run = person.runs[run_idx];

  int span = 0;  // frames between the newest and oldest sampled component
  for (std::size_t n = first_slot; n < plan.gaps.size(); ++n)
    span += plan.gaps[n];
  const int need = span + 1;
  if (static_cast<int>(run.rows.size()) < need) return {};

  const int max_offset = static_cast<int>(run.rows.size()) - need;
  const int oldest = static_cast<int>(rng.uniform_int(0, max_offset));

  std::vector<int> rows(component_count, -1);
  int pos = oldest;  // offset of the current component within the run
  for (int slot = component_count - 1; slot >= first_slot; --slot) {
    rows[slot] = run.rows[pos];
    if (slot > first_slot) pos += plan.gaps[slot - 1];
  }
  *person_out = &person;
  return rows;
}

}  // namespace detail

// Builds a balanced, shuffled set of cfg.set_size tracklets from the pooled
// observations. Throws DataError when the pool cannot satisfy the
// configuration (too few identities, no long-enough consecutive runs, or
// rejection sampling exhausting its attempt budget).
inline std::vector<FeatureTracklet> generate_set(
    const FactoryConfig& cfg, const std::vector<Observation>& pool) {
  cfg.validate();
  if (pool.empty()) throw DataError("generate_set: empty observation pool");

  const detail::PoolIndex index(pool);
  if (index.longest_run() < cfg.memory + 1)
    throw DataError(
        "generate_set: no identity has " + std::to_string(cfg.memory + 1) +
        " consecutive-frame observations");
  if (index.identity_count() < 2)
    throw DataError(
        "generate_set: negatives and intruders need at least 2 identities");

  Rng rng(mix_seed(cfg.seed, 0xfac702157a3c11e5ull));
  constexpr int kMaxAttempts = 1000;

  const auto make_one = [&](bool positive) -> FeatureTracklet {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const detail::GapPlan plan = detail::sample_gaps(rng, cfg);
      // positives place the query inside the window; negatives sample the
      // history only and pick the query from a different identity
      const int first_slot = positive ? 0 : 1;
      const detail::PoolIndex::Person* person = nullptr;
      const std::vector<int> rows = detail::sample_window(
          rng, index, plan, first_slot, cfg.memory + 1, &person);
      if (rows.empty()) continue;

      FeatureTracklet t;
      t.components.resize(cfg.memory + 1);
      for (int slot = first_slot; slot <= cfg.memory; ++slot)
        t.components[slot] = pool[rows[slot]];

      if (!positive) {
        const int query_frame = t.components[1].meta.frame + plan.gaps[0];
        const int row =
            index.pick_at_frame(rng, query_frame, person->identity);
        if (row < 0) continue;
        t.components[0] = pool[row];
      }

      if (cfg.uses_intruders()) {
        const int count =
            static_cast<int>(rng.uniform_int(0, cfg.max_intruders));
        MaskVector mask;
        mask.bits.assign(cfg.memory + 1, 0);
        std::vector<int> slots(cfg.memory);
        for (int i = 0; i < cfg.memory; ++i) slots[i] = i + 1;
        for (int i = 0; i < count; ++i) {
          const int j = static_cast<int>(rng.uniform_int(
              i, static_cast<std::int64_t>(slots.size()) - 1));
          std::swap(slots[i], slots[j]);
          mask.bits[slots[i]] = 1;
        }
        // positives exclude the query identity; negatives exclude the history
        // identity (the donor may coincide with the query, which is the hard
        // case)
        const int excluded =
            positive ? t.components[0].meta.identity : person->identity;
        std::vector<Observation> donors(cfg.memory + 1);
        bool ok = true;
        for (int slot = 1; slot <= cfg.memory && ok; ++slot) {
          if (!mask.bits[slot]) continue;
          const int row = index.pick_anywhere(rng, excluded);
          if (row < 0) ok = false;
          else donors[slot] = pool[row];
        }
        if (!ok) continue;
        t = apply_intruders(t, mask, donors);
      }

      t.label = label_tracklet(t);
      if (t.label != (positive ? 1 : 0)) continue;  // intruders flipped the mode
      return t;
    }
    throw DataError(
        "generate_set: unsatisfiable configuration, gave up after " +
        std::to_string(kMaxAttempts) + " attempts per tracklet");
  };

  const int positives = (cfg.set_size + 1) / 2;
  std::vector<FeatureTracklet> set;
  set.reserve(cfg.set_size);
  for (int i = 0; i < positives; ++i) set.push_back(make_one(true));
  for (int i = positives; i < cfg.set_size; ++i) set.push_back(make_one(false));

  for (std::size_t i = set.size(); i > 1; --i) {  // random mixture
    const std::size_t j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(set[i - 1], set[j]);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Tracklet file format
// ---------------------------------------------------------------------------
// Header `T=<int>,n=<dim>`, then one record per line:
//   y|id0:frame0:v0,v1,...|id1:frame1:v...|...
// Sequence tags are not part of the format.

inline void store_tracklets(const std::vector<FeatureTracklet>& set,
                            const std::string& path) {
  int memory = 0;
  std::int64_t n = 0;
  if (!set.empty()) {
    memory = set.front().memory();
    n = set.front().components.front().feature.size();
  }
  std::string out;
  out += "T=" + std::to_string(memory) + ",n=" + std::to_string(n) + "\n";
  for (const FeatureTracklet& t : set) {
    if (t.memory() != memory)
      throw DataError("store_tracklets: mixed memory lengths");
    out += std::to_string(t.label);
    for (const Observation& c : t.components) {
      if (c.feature.size() != n)
        throw DataError("store_tracklets: mixed feature dimensions");
      out += '|';
      out += std::to_string(c.meta.identity);
      out += ':' + std::to_string(c.meta.frame);
      out += ':';
      for (std::int64_t j = 0; j < n; ++j) {
        if (j) out += ',';
        out += format_g9(c.feature[j]);
      }
    }
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
  if (!f) throw DataError("write failed: " + path);
}

inline std::vector<FeatureTracklet> load_tracklets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open tracklet file: " + path);

  std::string line;
  if (!std::getline(in, line))
    throw DataError(path + ": empty file, expected 'T=<int>,n=<dim>' header");
  const auto header_fields = split(trim(line), ',');
  if (header_fields.size() != 2 || !header_fields[0].starts_with("T=") ||
      !header_fields[1].starts_with("n="))
    throw DataError(path + ":1: expected 'T=<int>,n=<dim>' header");
  const int memory =
      static_cast<int>(parse_int(header_fields[0].substr(2), path + ":1: T"));
  const std::int64_t n = parse_int(header_fields[1].substr(2), path + ":1: n");
  if (memory < 0 || n < 0)
    throw DataError(path + ":1: T and n must be non-negative");

  std::vector<FeatureTracklet> set;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string ctx = path + ":" + std::to_string(line_no);
    const auto fields = split(line, '|');
    if (static_cast<int>(fields.size()) != memory + 2)
      throw DataError(ctx + ": expected " + std::to_string(memory + 2) +
                      " '|'-separated fields, got " +
                      std::to_string(fields.size()));
    FeatureTracklet t;
    const std::int64_t y = parse_int(fields[0], ctx + ": label");
    if (y != 0 && y != 1) throw DataError(ctx + ": label must be 0 or 1");
    t.label = static_cast<int>(y);
    t.components.resize(memory + 1);
    for (int slot = 0; slot <= memory; ++slot) {
      const auto parts = split(fields[slot + 1], ':');
      if (parts.size() != 3)
        throw DataError(ctx + ": component " + std::to_string(slot) +
                        " must be id:frame:values");
      Observation& c = t.components[slot];
      c.meta.identity =
          static_cast<int>(parse_int(parts[0], ctx + ": component id"));
      c.meta.frame =
          static_cast<int>(parse_int(parts[1], ctx + ": component frame"));
      if (c.meta.identity < 0 || c.meta.frame < 0)
        throw DataError(ctx + ": id and frame must be non-negative");
      const auto values = split(parts[2], ',');
      if (static_cast<std::int64_t>(values.size()) != n &&
          !(n == 0 && values.size() == 1 && trim(values[0]).empty()))
        throw DataError(ctx + ": expected " + std::to_string(n) +
                        " feature values, got " +
                        std::to_string(values.size()));
      c.feature.resize(n);
      for (std::int64_t j = 0; j < n; ++j) {
        const double v = parse_real(values[j], ctx + ": value");
        if (!std::isfinite(v)) throw DataError(ctx + ": non-finite value");
        c.feature[j] = v;
      }
    }
    if (!detail::frames_strictly_decreasing(t))
      throw DataError(ctx + ": component frames must strictly decrease");
    set.push_back(std::move(t));
  }
  return set;
}

}  // namespace msdoas
