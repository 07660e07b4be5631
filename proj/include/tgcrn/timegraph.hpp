#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "tgcrn/numerics/autodiff.hpp"

namespace tgcrn {

using numerics::Parameter;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

/// Within-day discretized timestamp.
struct TimeIndex {
  std::size_t slot = 0;

  constexpr TimeIndex() = default;
  constexpr explicit TimeIndex(std::size_t s) : slot(s) {}
  friend constexpr bool operator==(TimeIndex, TimeIndex) = default;
};

/// The discretized service day: slots start at `day_start_minutes` and are
/// `interval_minutes` wide. Slot ranges are half-open.
struct ServiceDay {
  int day_start_minutes = 0;
  int interval_minutes = 15;
  std::size_t slots_per_day = 96;
};

/// Maps minutes since midnight to a slot. Throws OutOfRangeError when the
/// timestamp falls outside the service span.
TimeIndex discretize_time(int minutes_since_midnight, const ServiceDay& day);

enum class PredecessorRule { kWrap, kClamp };

/// Slot preceding `slot`; slot 0 wraps to the last slot of the day or clamps to 0.
TimeIndex predecessor(TimeIndex slot, std::size_t slots_per_day, PredecessorRule rule);

/// Node table (N×d_N) and daily time table (|T|×d_T).
struct EmbeddingTables {
  Parameter node_table;
  Parameter time_table;

  /// Uniform on [-1/sqrt(width), 1/sqrt(width)] per table.
  static EmbeddingTables init(std::size_t nodes, std::size_t node_dim, std::size_t slots,
                              std::size_t time_dim, std::uint64_t seed);

  std::size_t num_nodes() const { return node_table.value.shape()[0]; }
  std::size_t num_slots() const { return time_table.value.shape()[0]; }
};

// ---------------------------------------------------------------------------
// Time-distance sampling

/// B rows of T consecutive time indices (one row per batch sample).
using SlotMatrix = std::vector<std::vector<TimeIndex>>;

struct SamplingRanges {
  std::size_t adjacent = 1;  // gamma for the adjacent band
  std::size_t mid = 0;       // gamma for the mid-distance band; 0 means the whole row
};

struct SamplePosition {
  std::size_t row = 0;
  std::size_t column = 0;
  friend bool operator==(const SamplePosition&, const SamplePosition&) = default;
};

struct TimeDistanceSamples {
  std::vector<TimeIndex> anchors, adjacents, mids, distants;
  // Where each sample came from in the slot matrix.
  std::vector<SamplePosition> anchor_at, adjacent_at, mid_at, distant_at;

  std::size_t size() const { return anchors.size(); }
};

/// Number of retries when looking for a distant sample beyond 2·mid range.
inline constexpr int kDistantRetries = 16;

/// Picks an adjacent column for `anchor` in `row`: within `range` columns and
/// 1..range slots away. Empty when no candidate exists.
std::optional<std::size_t> pick_adjacent(std::span<const TimeIndex> row, std::size_t anchor,
                                         std::size_t range, std::mt19937_64& rng);

/// Draws anchor/adjacent/mid/distant samples, one of each per row.
/// Deterministic in `seed`. Throws ContractError for fewer than two rows and
/// ConfigError when a row has no anchor with a valid mid-distance candidate.
TimeDistanceSamples sample_time_distances(const SlotMatrix& batch_slots, SamplingRanges ranges,
                                          std::uint64_t seed);

/// Mean over samples of the pairwise L1 gaps between the three
/// distance-to-slot-gap ratios (adjacent, mid, distant) measured from the anchor.
Var time_discrepancy_loss(const Var& time_table, const TimeDistanceSamples& samples);

// ---------------------------------------------------------------------------
// Graph construction

/// E_v E_vᵀ.
Var static_affinity(const Var& node_table);

/// Inner product of the time rows at `slot` and its predecessor, as a 1×1 matrix.
Var trend_factor(const Var& time_table, TimeIndex slot, PredecessorRule rule);
/// Batched trend factors, one row per slot (B×1).
Var trend_factors(const Var& time_table, std::span<const TimeIndex> slots, PredecessorRule rule);

/// tanh(X Xᵀ) for each N-row block of the stacked node states.
Var periodic_discriminant(const Var& node_state, std::size_t num_nodes);

/// Adjacency for one or more samples. `raw` and `propagation` are stacked
/// (B·N)×N, one N×N block per sample.
struct TimeAwareGraph {
  Var raw;
  Var propagation;
  std::vector<TimeIndex> slots;
};

/// raw = (1 + α·sigmoid(A_ρ)) ⊙ (A_ν + η), propagation = row_softmax(raw).
/// `trend` is B×1 (one scalar per sample). When `discriminant` is unbound the
/// multiplier is dropped.
TimeAwareGraph time_aware_adjacency(const Var& affinity, const Var& trend,
                                    const Var& discriminant, double saturation,
                                    std::vector<TimeIndex> slots = {});

}  // namespace tgcrn
