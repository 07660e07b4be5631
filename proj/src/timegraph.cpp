#include "tgcrn/timegraph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tgcrn/errors.hpp"

namespace tgcrn {

namespace nx = numerics;

namespace {

std::size_t slot_gap(TimeIndex a, TimeIndex b) {
  return a.slot > b.slot ? a.slot - b.slot : b.slot - a.slot;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t count) {
  std::uniform_int_distribution<std::size_t> pick(0, count - 1);
  return pick(rng);
}

std::vector<std::size_t> mid_candidates(std::span<const TimeIndex> row, std::size_t anchor,
                                        const SamplingRanges& ranges) {
  const std::size_t mid_range = ranges.mid == 0 ? row.size() : ranges.mid;
  const std::size_t lo = anchor >= mid_range ? anchor - mid_range : 0;
  const std::size_t hi = std::min(row.size() - 1, anchor + mid_range);
  std::vector<std::size_t> out;
  for (std::size_t c = lo; c <= hi; ++c) {
    if (slot_gap(row[c], row[anchor]) > ranges.adjacent) out.push_back(c);
  }
  return out;
}

bool has_adjacent(std::span<const TimeIndex> row, std::size_t anchor, std::size_t range) {
  const std::size_t lo = anchor >= range ? anchor - range : 0;
  const std::size_t hi = std::min(row.size() - 1, anchor + range);
  for (std::size_t c = lo; c <= hi; ++c) {
    const std::size_t gap = slot_gap(row[c], row[anchor]);
    if (c != anchor && gap >= 1 && gap <= range) return true;
  }
  return false;
}

}  // namespace

TimeIndex discretize_time(int minutes_since_midnight, const ServiceDay& day) {
  if (day.interval_minutes <= 0) throw ConfigError("slot interval must be positive");
  const int offset = minutes_since_midnight - day.day_start_minutes;
  const long span = static_cast<long>(day.slots_per_day) * day.interval_minutes;
  if (minutes_since_midnight < 0 || minutes_since_midnight >= 1440 || offset < 0 ||
      offset >= span) {
    throw OutOfRangeError("timestamp minute " + std::to_string(minutes_since_midnight) +
                          " is outside the service span starting at minute " +
                          std::to_string(day.day_start_minutes) + " with " +
                          std::to_string(day.slots_per_day) + " slots of " +
                          std::to_string(day.interval_minutes) + " min");
  }
  return TimeIndex(static_cast<std::size_t>(offset / day.interval_minutes));
}

TimeIndex predecessor(TimeIndex slot, std::size_t slots_per_day, PredecessorRule rule) {
  if (slot.slot >= slots_per_day) {
    throw OutOfRangeError("slot " + std::to_string(slot.slot) + " >= slots per day " +
                          std::to_string(slots_per_day));
  }
  if (slot.slot > 0) return TimeIndex(slot.slot - 1);
  return rule == PredecessorRule::kWrap ? TimeIndex(slots_per_day - 1) : TimeIndex(0);
}

EmbeddingTables EmbeddingTables::init(std::size_t nodes, std::size_t node_dim, std::size_t slots,
                                      std::size_t time_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Tensor& t, std::size_t width) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng);
  };
  EmbeddingTables tables{{"node_embedding", Tensor({nodes, node_dim})},
                         {"time_embedding", Tensor({slots, time_dim})}};
  fill(tables.node_table.value, node_dim);
  fill(tables.time_table.value, time_dim);
  return tables;
}

std::optional<std::size_t> pick_adjacent(std::span<const TimeIndex> row, std::size_t anchor,
                                         std::size_t range, std::mt19937_64& rng) {
  std::vector<std::size_t> candidates;
  const std::size_t lo = anchor >= range ? anchor - range : 0;
  const std::size_t hi = std::min(row.size() - 1, anchor + range);
  for (std::size_t c = lo; c <= hi; ++c) {
    const std::size_t gap = slot_gap(row[c], row[anchor]);
    if (c != anchor && gap >= 1 && gap <= range) candidates.push_back(c);
  }
  if (candidates.empty()) return std::nullopt;
  return candidates[uniform_index(rng, candidates.size())];
}

TimeDistanceSamples sample_time_distances(const SlotMatrix& batch_slots, SamplingRanges ranges,
                                          std::uint64_t seed) {
  const std::size_t rows = batch_slots.size();
  if (rows < 2) {
    throw ContractError("time-distance sampling needs at least 2 batch rows, got " +
                        std::to_string(rows));
  }
  const std::size_t cols = batch_slots[0].size();
  if (cols < 2) throw ContractError("time-distance sampling needs at least 2 time steps per row");
  for (const auto& row : batch_slots) {
    if (row.size() != cols) throw DimensionError("slot matrix rows have unequal length");
  }
  if (ranges.adjacent < 1) throw ConfigError("adjacent range must be at least 1");
  const std::size_t mid_range = ranges.mid == 0 ? cols : ranges.mid;

  std::mt19937_64 rng(seed);
  TimeDistanceSamples out;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::span<const TimeIndex> row(batch_slots[i]);

    // Anchors whose adjacent and mid-distance candidate sets are both non-empty.
    // For rows that do not cross midnight this is every column once T is large
    // enough for the mid band to exist.
    std::vector<std::size_t> anchors;
    for (std::size_t c = 0; c < cols; ++c) {
      if (has_adjacent(row, c, ranges.adjacent) && !mid_candidates(row, c, ranges).empty()) {
        anchors.push_back(c);
      }
    }
    if (anchors.empty()) {
      throw ConfigError("no mid-distance candidates: " + std::to_string(cols) +
                        " time steps cannot exceed adjacent range " +
                        std::to_string(ranges.adjacent));
    }
    const std::size_t anchor = anchors[uniform_index(rng, anchors.size())];
    const std::size_t adjacent = *pick_adjacent(row, anchor, ranges.adjacent, rng);
    const auto mids = mid_candidates(row, anchor, ranges);
    const std::size_t mid = mids[uniform_index(rng, mids.size())];

    // Distant sample from another row, resampled until it is far enough away.
    std::size_t best_row = 0, best_col = 0, best_gap = 0;
    bool have_best = false;
    for (int attempt = 0; attempt <= kDistantRetries; ++attempt) {
      std::size_t other = uniform_index(rng, rows - 1);
      if (other >= i) ++other;
      const std::size_t col = uniform_index(rng, cols);
      const std::size_t gap = slot_gap(batch_slots[other][col], row[anchor]);
      if (!have_best || gap > best_gap) {
        best_row = other;
        best_col = col;
        best_gap = gap;
        have_best = true;
      }
      if (gap > 2 * mid_range) break;
    }

    out.anchors.push_back(row[anchor]);
    out.adjacents.push_back(row[adjacent]);
    out.mids.push_back(row[mid]);
    out.distants.push_back(batch_slots[best_row][best_col]);
    out.anchor_at.push_back({i, anchor});
    out.adjacent_at.push_back({i, adjacent});
    out.mid_at.push_back({i, mid});
    out.distant_at.push_back({best_row, best_col});
  }
  return out;
}

Var time_discrepancy_loss(const Var& time_table, const TimeDistanceSamples& samples) {
  const std::size_t count = samples.size();
  if (count == 0) throw ContractError("time discrepancy loss over an empty sample set");
  Tape& tape = *time_table.tape();
  const std::size_t slots = time_table.value().shape()[0];

  auto indices = [slots](const std::vector<TimeIndex>& v) {
    std::vector<std::size_t> idx;
    idx.reserve(v.size());
    for (auto t : v) {
      if (t.slot >= slots) {
        throw OutOfRangeError("sampled slot " + std::to_string(t.slot) + " outside time table of " +
                              std::to_string(slots) + " rows");
      }
      idx.push_back(t.slot);
    }
    return idx;
  };
  const auto anchor_idx = indices(samples.anchors);
  const Var anchor_rows = nx::gather_rows(time_table, anchor_idx);

  // ratio_x = ||E[t_x] - E[t_anchor]|| / |t_x - t_anchor|
  auto ratio = [&](const std::vector<TimeIndex>& others, bool clamp) {
    const auto idx = indices(others);
    Tensor inv_gap({count, 1});
    for (std::size_t b = 0; b < count; ++b) {
      std::size_t gap = slot_gap(others[b], samples.anchors[b]);
      if (gap == 0) {
        if (!clamp) {
          throw ContractError("sampler produced a zero slot distance at sample " +
                              std::to_string(b));
        }
        gap = 1;
      }
      inv_gap[b] = 1.0 / static_cast<double>(gap);
    }
    const Var dist = nx::row_norm(nx::gather_rows(time_table, idx) - anchor_rows);
    return dist * tape.constant(std::move(inv_gap));
  };
  const Var adjacent = ratio(samples.adjacents, false);
  const Var mid = ratio(samples.mids, false);
  const Var distant = ratio(samples.distants, true);
  return nx::mean(nx::abs(adjacent - mid) + nx::abs(adjacent - distant) + nx::abs(mid - distant));
}

Var static_affinity(const Var& node_table) {
  return nx::matmul(node_table, nx::transpose(node_table));
}

Var trend_factors(const Var& time_table, std::span<const TimeIndex> slots, PredecessorRule rule) {
  const std::size_t table_rows = time_table.value().shape()[0];
  std::vector<std::size_t> current, previous;
  for (auto s : slots) {
    current.push_back(s.slot);
    previous.push_back(predecessor(s, table_rows, rule).slot);
  }
  return nx::row_sum(nx::gather_rows(time_table, current) * nx::gather_rows(time_table, previous));
}

Var trend_factor(const Var& time_table, TimeIndex slot, PredecessorRule rule) {
  const TimeIndex one[] = {slot};
  return trend_factors(time_table, one, rule);
}

Var periodic_discriminant(const Var& node_state, std::size_t num_nodes) {
  return nx::tanh(nx::block_gram(node_state, num_nodes));
}

TimeAwareGraph time_aware_adjacency(const Var& affinity, const Var& trend, const Var& discriminant,
                                    double saturation, std::vector<TimeIndex> slots) {
  const Tensor& a = affinity.value();
  nx::require_matrix(a, "time_aware_adjacency");
  const std::size_t n = a.shape()[0];
  if (a.shape()[1] != n) {
    throw DimensionError("affinity must be square, got " + nx::shape_to_string(a.shape()));
  }
  const Tensor& eta = trend.value();
  if (eta.rank() != 2 || eta.shape()[1] != 1) {
    throw DimensionError("trend must be B×1, got " + nx::shape_to_string(eta.shape()));
  }
  if (saturation < 0) throw ConfigError("saturation factor must be non-negative");
  const std::size_t batch = eta.shape()[0];
  Tape& tape = *affinity.tape();

  std::vector<std::size_t> tile(batch * n), expand(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      tile[b * n + i] = i;
      expand[b * n + i] = b;
    }
  }
  const Var ones = tape.constant(Tensor({1, n}, 1.0));
  Var base = nx::gather_rows(affinity, tile) + nx::matmul(nx::gather_rows(trend, expand), ones);

  Var raw = base;
  if (discriminant.valid()) {
    const Tensor& d = discriminant.value();
    if (d.rank() != 2 || d.shape()[0] != batch * n || d.shape()[1] != n) {
      throw DimensionError("periodic discriminant shape " + nx::shape_to_string(d.shape()) +
                           " does not match " + std::to_string(batch) + " blocks of " +
                           std::to_string(n) + "x" + std::to_string(n));
    }
    raw = (1.0 + saturation * nx::sigmoid(discriminant)) * base;
  }
  return TimeAwareGraph{raw, nx::row_softmax(raw), std::move(slots)};
}

}  // namespace tgcrn
