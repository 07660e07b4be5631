#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tgcrn/data.hpp"
#include "tgcrn/model.hpp"
#include "tgcrn/training.hpp"

namespace tgcrn::cli {

struct DataConfig {
  std::string path;                      // dataset directory
  std::optional<SynthConfig> synthetic;  // used instead of `path` when set
  std::size_t history = 12;
  std::size_t horizon = 12;
  SplitFractions splits;
};

/// The run configuration file: {"model": {...}, "train": {...}, "data": {...}}.
/// Model fields describing the data (num_nodes, input_dim, slots_per_day,
/// history, horizon) are filled from the dataset and `data` section.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  nlohmann::json model_json = nlohmann::json::object();  // as given, for data checks
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);
nlohmann::json to_json(const RunConfig& cfg);

/// Loads or generates the dataset named by `cfg` and completes the model
/// config from it. Throws ConfigError when an explicit model field disagrees.
Dataset resolve_dataset(RunConfig& cfg);

// Checkpoint extras written next to the parameters.
inline constexpr const char* kNormMean = "normalizer.mean";
inline constexpr const char* kNormStd = "normalizer.std";
inline constexpr const char* kSplitFractions = "data.split_fractions";

struct TrainedRun {
  RunConfig config;
  FitResult fit;
  MetricsReport test;
};

/// Files written into `out`: checkpoint.bin, history.jsonl, metrics.csv, config.json.
TrainedRun cmd_train(RunConfig cfg, const std::filesystem::path& out, std::ostream& log);

void cmd_synth(const SynthConfig& cfg, const std::filesystem::path& out);

/// Per-horizon metrics CSV for one split ("train", "val" or "test").
std::string cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                     const std::string& split);

/// Slot list syntax: "all", "a-b" (inclusive) or comma-separated values.
std::vector<std::size_t> parse_slot_list(const std::string& text, std::size_t slots_per_day);

/// Writes graph_<slot>_raw.csv, graph_<slot>_normalized.csv and time_embedding.csv.
void cmd_export_graphs(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& data, const std::vector<std::size_t>& slots,
                       const std::filesystem::path& out);

/// CSV with header step,node,channel,value.
std::string cmd_forecast(const std::filesystem::path& checkpoint,
                         const std::filesystem::path& data, const std::string& at);

/// Matrix CSV: header "row,0,1,...", one line per row, 17 significant digits.
std::string matrix_csv(const Tensor& m);
Tensor parse_matrix_csv(const std::string& text);

/// Entry point. Returns the process exit status; errors go to `err` as one line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tgcrn::cli
