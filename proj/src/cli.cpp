#include "tgcrn/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "tgcrn/errors.hpp"

namespace tgcrn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create directory " + dir.string());
}

template <typename T>
void get_field(const json& j, const std::string& path, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

void reject_unknown(const json& j, const std::string& path, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(path + "." + key + ": unknown key");
  }
}

SynthConfig synth_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"nodes", "days", "slots_per_day", "noise", "seed"});
  SynthConfig c;
  get_field(j, path, "nodes", c.num_nodes);
  get_field(j, path, "days", c.days);
  get_field(j, path, "slots_per_day", c.slots_per_day);
  get_field(j, path, "noise", c.noise_std);
  get_field(j, path, "seed", c.seed);
  return c;
}

json synth_to_json(const SynthConfig& c) {
  return json{{"nodes", c.num_nodes},
              {"days", c.days},
              {"slots_per_day", c.slots_per_day},
              {"noise", c.noise_std},
              {"seed", c.seed}};
}

DataConfig data_from_json(const json& j) {
  reject_unknown(j, "data", {"path", "synthetic", "history", "horizon", "splits"});
  DataConfig d;
  get_field(j, "data", "path", d.path);
  if (j.contains("synthetic")) d.synthetic = synth_from_json(j.at("synthetic"), "data.synthetic");
  if (d.synthetic && !d.path.empty()) {
    throw ConfigError("data: give either path or synthetic, not both");
  }
  if (!d.synthetic && d.path.empty()) throw ConfigError("data.path: missing dataset path");
  get_field(j, "data", "history", d.history);
  get_field(j, "data", "horizon", d.horizon);
  if (d.history == 0) throw ConfigError("data.history must be >= 1");
  if (d.horizon == 0) throw ConfigError("data.horizon must be >= 1");
  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    reject_unknown(s, "data.splits", {"train", "val", "test"});
    get_field(s, "data.splits", "train", d.splits.train);
    get_field(s, "data.splits", "val", d.splits.val);
    get_field(s, "data.splits", "test", d.splits.test);
  }
  return d;
}

json data_to_json(const DataConfig& d) {
  json j{{"history", d.history},
         {"horizon", d.horizon},
         {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}}};
  if (d.synthetic) {
    j["synthetic"] = synth_to_json(*d.synthetic);
  } else {
    j["path"] = d.path;
  }
  return j;
}

void fill_from_data(ModelConfig& m, const json& given, const char* key, std::size_t value) {
  std::size_t* field = nullptr;
  const std::string k = key;
  if (k == "num_nodes") field = &m.num_nodes;
  if (k == "input_dim") field = &m.input_dim;
  if (k == "slots_per_day") field = &m.slots_per_day;
  if (k == "history") field = &m.history;
  if (k == "horizon") field = &m.horizon;
  if (given.contains(key) && *field != value) {
    throw ConfigError("model." + k + " is " + std::to_string(*field) + " but the data gives " +
                      std::to_string(value));
  }
  *field = value;
}

struct LoadedCheckpoint {
  Model model;
  Normalizer norm;
  SplitFractions splits;
};

LoadedCheckpoint open_checkpoint(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  Model model = Model::from_checkpoint(ckpt);
  const Tensor* mean = ckpt.find(kNormMean);
  const Tensor* std = ckpt.find(kNormStd);
  if (!mean || !std) throw LoadError("checkpoint lacks normalizer statistics");
  Normalizer norm{mean->values(), std->values()};
  SplitFractions splits;
  if (const Tensor* s = ckpt.find(kSplitFractions); s && s->size() == 3) {
    splits = SplitFractions{(*s)[0], (*s)[1], (*s)[2]};
  }
  return {std::move(model), std::move(norm), splits};
}

void check_dataset(const Model& model, const Normalizer& norm, const Dataset& ds) {
  const auto& c = model.config();
  if (c.num_nodes != ds.meta.num_nodes) {
    throw ConfigError("checkpoint has N=" + std::to_string(c.num_nodes) + " but dataset has N=" +
                      std::to_string(ds.meta.num_nodes));
  }
  if (c.input_dim != ds.meta.channels || norm.mean.size() != ds.meta.channels) {
    throw ConfigError("checkpoint has d=" + std::to_string(c.input_dim) + " but dataset has d=" +
                      std::to_string(ds.meta.channels));
  }
  if (c.slots_per_day != ds.meta.slots_per_day) {
    throw ConfigError("checkpoint has slots_per_day=" + std::to_string(c.slots_per_day) +
                      " but dataset has slots_per_day=" + std::to_string(ds.meta.slots_per_day));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Run configuration

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, "config", {"model", "train", "data"});
  RunConfig cfg;
  if (j.contains("model")) {
    cfg.model_json = j.at("model");
    cfg.model = model_config_from_json(cfg.model_json, "model");
  }
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"), "train");
  if (!j.contains("data")) throw ConfigError("data: missing section");
  cfg.data = data_from_json(j.at("data"));
  return cfg;
}

RunConfig load_run_config(const fs::path& file) {
  const std::string text = read_text(file);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(file.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
  return json{{"model", to_json(cfg.model)},
              {"train", to_json(cfg.train)},
              {"data", data_to_json(cfg.data)}};
}

Dataset resolve_dataset(RunConfig& cfg) {
  Dataset ds = cfg.data.synthetic ? generate_synthetic(*cfg.data.synthetic).first
                                  : load_dataset(cfg.data.path);
  const json& given = cfg.model_json;
  fill_from_data(cfg.model, given, "num_nodes", ds.meta.num_nodes);
  fill_from_data(cfg.model, given, "input_dim", ds.meta.channels);
  fill_from_data(cfg.model, given, "slots_per_day", ds.meta.slots_per_day);
  fill_from_data(cfg.model, given, "history", cfg.data.history);
  fill_from_data(cfg.model, given, "horizon", cfg.data.horizon);
  if (!given.contains("output_dim")) cfg.model.output_dim = ds.meta.channels;
  cfg.model.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const SynthConfig& cfg, const fs::path& out) {
  auto [ds, truth] = generate_synthetic(cfg);
  save_dataset(ds, out);
  save_truth(truth, out);
}

TrainedRun cmd_train(RunConfig cfg, const fs::path& out, std::ostream& log) {
  Dataset ds = resolve_dataset(cfg);
  cfg.train.validate();
  const Splits splits = make_windows(ds, cfg.data.history, cfg.data.horizon, cfg.data.splits);
  const Normalizer norm = Normalizer::fit(ds, 0, splits.train_end);
  ensure_dir(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  Model model(cfg.model);
  FitResult result = fit(model, ds, splits, norm, cfg.train, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_total << " val_mae "
        << r.val.mae << (r.improved ? " *" : "") << "\n";
  });
  write_text(out / "history.jsonl", history_jsonl(result.history));
  std::vector<NamedTensor> extras;
  extras.push_back({kNormMean, Tensor({norm.mean.size()}, norm.mean)});
  extras.push_back({kNormStd, Tensor({norm.std.size()}, norm.std)});
  extras.push_back({kSplitFractions, Tensor({3}, {cfg.data.splits.train, cfg.data.splits.val,
                                                  cfg.data.splits.test})});
  save_checkpoint(model.to_checkpoint(std::move(extras)), out / "checkpoint.bin");
  if (result.diverged) {
    throw NumericError(result.divergence + "; kept checkpoint of best finite epoch " +
                       std::to_string(result.best_epoch));
  }
  MetricsReport test = evaluate(model, ds, norm, splits.test);
  write_text(out / "metrics.csv",
             metrics_csv({{ablation_name(cfg.model.ablations), test}}));
  return TrainedRun{std::move(cfg), std::move(result), std::move(test)};
}

std::string cmd_eval(const fs::path& checkpoint, const fs::path& data, const std::string& split) {
  LoadedCheckpoint ck = open_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  check_dataset(ck.model, ck.norm, ds);
  const auto& c = ck.model.config();
  const Splits splits = make_windows(ds, c.history, c.horizon, ck.splits);
  const std::vector<std::size_t>* starts = nullptr;
  if (split == "train") starts = &splits.train;
  if (split == "val") starts = &splits.val;
  if (split == "test") starts = &splits.test;
  if (!starts) throw ConfigError("--split must be train, val or test, got '" + split + "'");
  const MetricsReport report = evaluate(ck.model, ds, ck.norm, *starts);
  return metrics_csv({{ablation_name(c.ablations), report}});
}

std::vector<std::size_t> parse_slot_list(const std::string& text, std::size_t slots_per_day) {
  std::vector<std::size_t> out;
  auto number = [&](const std::string& s) -> std::size_t {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError("bad slot '" + s + "' in --slots");
    if (v >= slots_per_day) {
      throw OutOfRangeError("slot " + s + " outside [0, " + std::to_string(slots_per_day) + ")");
    }
    return static_cast<std::size_t>(v);
  };
  if (text == "all") {
    for (std::size_t s = 0; s < slots_per_day; ++s) out.push_back(s);
    return out;
  }
  if (const auto dash = text.find('-'); dash != std::string::npos) {
    const std::size_t a = number(text.substr(0, dash));
    const std::size_t b = number(text.substr(dash + 1));
    if (b < a) throw ConfigError("empty slot range '" + text + "'");
    for (std::size_t s = a; s <= b; ++s) out.push_back(s);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(number(item));
  if (out.empty()) throw ConfigError("empty --slots");
  return out;
}

std::string matrix_csv(const Tensor& m) {
  numerics::require_matrix(m, "matrix_csv");
  std::string out = "row";
  for (std::size_t j = 0; j < m.cols(); ++j) out += "," + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out += "," + fmt17(m(i, j));
    out += "\n";
  }
  return out;
}

Tensor parse_matrix_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw LoadError("empty matrix CSV");
  std::vector<std::vector<double>> rows;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');  // row index
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw LoadError("matrix CSV cell '" + cell + "' is not a number");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw LoadError("matrix CSV rows differ in length");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.front().empty()) throw LoadError("matrix CSV has no values");
  Tensor m({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

void cmd_export_graphs(const fs::path& checkpoint, const fs::path& data,
                       const std::vector<std::size_t>& slots, const fs::path& out) {
  LoadedCheckpoint ck = open_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  check_dataset(ck.model, ck.norm, ds);
  const auto& c = ck.model.config();
  const std::size_t n = c.num_nodes, d = c.input_dim;
  ensure_dir(out);
  for (std::size_t slot : slots) {
    if (slot >= c.slots_per_day) {
      throw OutOfRangeError("slot " + std::to_string(slot) + " outside [0, " +
                            std::to_string(c.slots_per_day) + ")");
    }
    // The node state fed to the discriminant is the latest observation at this slot.
    std::optional<std::size_t> row;
    for (std::size_t r = ds.meta.length; r-- > 0;) {
      if (ds.slots[r].slot == slot) {
        row = r;
        break;
      }
    }
    if (!row) throw OutOfRangeError("slot " + std::to_string(slot) + " never occurs in the data");
    Tensor obs({1, n, d});
    std::copy_n(ds.values.data().begin() + static_cast<std::ptrdiff_t>(*row * n * d), n * d,
                obs.data().begin());
    Tape tape;
    const Model::Bound bound = ck.model.bind(tape);
    const Var x = tape.constant(ck.norm.normalize(obs).reshaped({n, d}));
    const TimeIndex ti{slot};
    const TimeAwareGraph g = ck.model.step_graph(bound, std::span<const TimeIndex>(&ti, 1), x);
    const std::string stem = "graph_" + std::to_string(slot);
    write_text(out / (stem + "_raw.csv"), matrix_csv(g.raw.value()));
    write_text(out / (stem + "_normalized.csv"), matrix_csv(g.propagation.value()));
  }
  write_text(out / "time_embedding.csv", matrix_csv(ck.model.tables().time_table.value));
}

std::string cmd_forecast(const fs::path& checkpoint, const fs::path& data, const std::string& at) {
  LoadedCheckpoint ck = open_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  check_dataset(ck.model, ck.norm, ds);
  const auto& c = ck.model.config();
  const std::size_t row = ds.row_at(Timestamp::parse(at));
  if (row + 1 < c.history) {
    throw OutOfRangeError("insufficient history: " + at + " is row " + std::to_string(row) +
                          " but P=" + std::to_string(c.history) + " rows are needed");
  }
  const std::size_t n = c.num_nodes, d = c.input_dim;
  const std::size_t first = row + 1 - c.history;
  WindowBatch batch;
  Tensor window({1, c.history, n, d});
  std::copy_n(ds.values.data().begin() + static_cast<std::ptrdiff_t>(first * n * d),
              c.history * n * d, window.data().begin());
  batch.inputs = ck.norm.normalize(window);
  batch.targets = Tensor({1, c.horizon, n, d});
  batch.starts = {first};
  batch.slots.emplace_back();
  for (std::size_t k = 0; k < c.history + c.horizon; ++k) {
    batch.slots[0].push_back(k < c.history ? ds.slots[first + k]
                                           : TimeIndex{(ds.slots[row].slot + k + 1 - c.history) %
                                                       c.slots_per_day});
  }
  const Tensor pred = ck.model.predict(batch, ck.norm);
  std::string out = "step,node,channel,value\n";
  for (std::size_t q = 0; q < c.horizon; ++q)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c.output_dim; ++ch)
        out += std::to_string(q + 1) + "," + std::to_string(i) + "," + std::to_string(ch) + "," +
               fmt17(pred[(q * n + i) * c.output_dim + ch]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Entry point

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Time-aware graph convolutional recurrent forecasting"};
  app.require_subcommand(1);

  SynthConfig synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset with planted graphs");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--nodes", synth.num_nodes, "Number of series");
  synth_cmd->add_option("--days", synth.days, "Number of days (>= 7)");
  synth_cmd->add_option("--slots-per-day", synth.slots_per_day, "Slots per day");
  synth_cmd->add_option("--noise", synth.noise_std, "Noise standard deviation");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");

  std::string config_file, train_out, ablation;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run configuration");
  train_cmd->add_option("--config", config_file, "Run configuration JSON")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--ablation", ablation, "Variant, e.g. w/o-PDF");

  std::string ablate_config, ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every variant and tabulate test metrics");
  ablate_cmd->add_option("--config", ablate_config, "Run configuration JSON")->required();
  ablate_cmd->add_option("--out", ablate_out, "Output CSV")->required();

  std::string ckpt, data_dir, split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Per-horizon metrics of a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--split", split, "train, val or test");

  std::string slots_text = "all", export_out;
  auto* export_cmd = app.add_subcommand("export-graphs", "Write learned graphs and time table");
  export_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  export_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  export_cmd->add_option("--slots", slots_text, "all, a-b or a,b,c");
  export_cmd->add_option("--out", export_out, "Output directory")->required();

  std::string at;
  auto* forecast_cmd = app.add_subcommand("forecast", "Forecast the Q steps after a timestamp");
  forecast_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  forecast_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  forecast_cmd->add_option("--at", at, "ISO timestamp of the last observed row")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*synth_cmd) {
      cmd_synth(synth, synth_out);
    } else if (*train_cmd) {
      RunConfig cfg = load_run_config(config_file);
      if (!ablation.empty()) cfg.model.ablations = ablation_from_name(ablation);
      const TrainedRun run = cmd_train(std::move(cfg), train_out, out);
      out << "best epoch " << run.fit.best_epoch << " val_mae " << fmt17(run.fit.best_val_mae)
          << " test_mae " << fmt17(run.test.average.mae) << "\n";
    } else if (*ablate_cmd) {
      RunConfig cfg = load_run_config(ablate_config);
      const Dataset ds = resolve_dataset(cfg);
      const Splits splits =
          make_windows(ds, cfg.data.history, cfg.data.horizon, cfg.data.splits);
      const Normalizer norm = Normalizer::fit(ds, 0, splits.train_end);
      const auto results = run_ablation(ablation_variants(), cfg.model, cfg.train, ds, splits,
                                        norm);
      std::vector<std::pair<std::string, MetricsReport>> rows;
      for (const auto& r : results) rows.emplace_back(r.variant, r.test);
      write_text(ablate_out, metrics_csv(rows));
      out << metrics_csv(rows);
    } else if (*eval_cmd) {
      out << cmd_eval(ckpt, data_dir, split);
    } else if (*export_cmd) {
      const Model model = open_checkpoint(ckpt).model;
      cmd_export_graphs(ckpt, data_dir, parse_slot_list(slots_text, model.config().slots_per_day),
                        export_out);
    } else if (*forecast_cmd) {
      out << cmd_forecast(ckpt, data_dir, at);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n' || ch == '\r') ch = ' ';
    }
    err << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tgcrn::cli
