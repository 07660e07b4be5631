#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tgcrn/timegraph.hpp"

namespace tgcrn {

enum class DayKind { kWeekday, kWeekend };

const char* to_string(DayKind kind);

struct DatasetMetadata {
  std::string name;
  std::size_t num_nodes = 0;  // N
  std::size_t length = 0;     // L
  std::size_t channels = 0;   // d
  int interval_minutes = 15;
  std::size_t slots_per_day = 96;
  int day_start_minutes = 0;
  std::string start;  // ISO-8601 local date-time of row 0, e.g. 2024-01-01T00:00

  ServiceDay service_day() const { return {day_start_minutes, interval_minutes, slots_per_day}; }
};

/// Minute-resolution calendar timestamp.
struct Timestamp {
  int days_since_epoch = 0;  // days since 1970-01-01
  int minute_of_day = 0;

  static Timestamp parse(const std::string& iso);
  std::string to_iso() const;
  /// 0 = Monday ... 6 = Sunday.
  int weekday() const;
};

/// Observations of N co-evolving series, one row per slot.
struct Dataset {
  Tensor values;  // [L, N, d]
  std::vector<TimeIndex> slots;
  std::vector<DayKind> day_kind;
  DatasetMetadata meta;

  /// Throws LoadError when shapes, slots or day kinds disagree with metadata.
  void validate() const;

  /// Row whose timestamp equals `ts`; throws OutOfRangeError when outside.
  std::size_t row_at(const Timestamp& ts) const;
  Timestamp timestamp_of(std::size_t row) const;
};

/// Reads metadata.json + values.bin from `dir`.
Dataset load_dataset(const std::filesystem::path& dir);
/// Writes metadata.json + values.bin into `dir` (created when missing).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Synthetic data with planted time-varying structure

struct SynthConfig {
  std::size_t num_nodes = 10;
  std::size_t days = 28;
  std::size_t slots_per_day = 48;
  double noise_std = 0.05;
  std::uint64_t seed = 7;
};

/// Ground-truth adjacency of the synthetic generator: A*(t) = base(day kind) · profile(slot).
struct PlantedTruth {
  Tensor base_weekday;  // N×N, symmetric, non-negative
  Tensor base_weekend;
  std::vector<double> intraday_profile;  // one positive value per slot
  Tensor adjacency;                      // [L, N, N]

  /// A*(t) as an N×N matrix.
  Tensor at(std::size_t row) const;
  /// A*(t) with each row scaled to sum to one.
  Tensor row_normalized_at(std::size_t row) const;
};

/// Share of the mixed previous state carried into the next step.
inline constexpr double kSynthRetention = 0.9;

std::pair<Dataset, PlantedTruth> generate_synthetic(const SynthConfig& cfg);

/// truth.bin: raw little-endian doubles [L, N, N].
void save_truth(const PlantedTruth& truth, const std::filesystem::path& dir);
Tensor load_truth(const std::filesystem::path& dir, const DatasetMetadata& meta);

// ---------------------------------------------------------------------------
// Windows and normalization

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

/// Window start rows per split. A window starting at row s covers rows
/// [s, s + P + Q): the first P are inputs, the rest targets.
struct Splits {
  std::vector<std::size_t> train, val, test;
  // Row segments [begin, end) each split's windows are confined to.
  std::size_t train_end = 0;
  std::size_t val_end = 0;
};

std::size_t window_count(std::size_t length, std::size_t history, std::size_t horizon);

/// Chronological split by rows; windows never cross a segment boundary.
Splits make_windows(const Dataset& ds, std::size_t history, std::size_t horizon,
                    SplitFractions fractions);

/// Per-channel z-score.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kMinStd = 1e-8;

  /// Statistics over rows [begin, end) of the dataset.
  static Normalizer fit(const Dataset& ds, std::size_t begin, std::size_t end);
  /// Statistics over every row covered by the given windows.
  static Normalizer fit_windows(const Dataset& ds, std::span<const std::size_t> starts,
                                std::size_t window_length);

  /// The trailing axis of `t` is the channel axis.
  Tensor normalize(const Tensor& t) const;
  Tensor denormalize(const Tensor& t) const;
  /// Statistics of the first `k` channels only.
  Normalizer leading(std::size_t k) const;
};

struct WindowBatch {
  Tensor inputs;   // [B, P, N, d], normalized
  Tensor targets;  // [B, Q, N, d], original units
  SlotMatrix slots;  // B × (P + Q)
  std::vector<std::size_t> starts;

  std::size_t batch_size() const { return starts.size(); }
};

WindowBatch make_batch(const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts, std::size_t history,
                       std::size_t horizon);

}  // namespace tgcrn
