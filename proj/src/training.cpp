#include "tgcrn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tgcrn/errors.hpp"

namespace tgcrn {

namespace nx = numerics;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
  if (!(decay > 0)) throw ConfigError("train.decay must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be >= 1");
  if (grad_clip && !(*grad_clip > 0)) throw ConfigError("train.grad_clip must be positive");
  for (std::size_t k = 1; k < decay_epochs.size(); ++k) {
    if (decay_epochs[k] <= decay_epochs[k - 1]) {
      throw ConfigError("train.decay_epochs must be strictly increasing");
    }
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  const auto k = std::count_if(decay_epochs.begin(), decay_epochs.end(),
                               [epoch](std::size_t e) { return e <= epoch; });
  return lr0 * std::pow(decay, static_cast<double>(k));
}

json to_json(const TrainConfig& c) {
  json j{{"lr0", c.lr0},
         {"decay", c.decay},
         {"decay_epochs", c.decay_epochs},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"patience", c.patience},
         {"max_epochs", c.max_epochs},
         {"seed", c.seed}};
  j["grad_clip"] = c.grad_clip ? json(*c.grad_clip) : json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  static const std::set<std::string> known = {"lr0",        "decay",      "decay_epochs",
                                              "weight_decay", "batch_size", "patience",
                                              "max_epochs", "grad_clip",  "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(path + "." + key + ": unknown key");
  }
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(path + "." + key + ": wrong type");
    }
  };
  get("lr0", c.lr0);
  get("decay", c.decay);
  get("decay_epochs", c.decay_epochs);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("patience", c.patience);
  get("max_epochs", c.max_epochs);
  get("seed", c.seed);
  if (j.contains("grad_clip")) {
    const auto& g = j.at("grad_clip");
    if (g.is_null()) {
      c.grad_clip.reset();
    } else if (g.is_number()) {
      c.grad_clip = g.get<double>();
    } else {
      throw ConfigError(path + ".grad_clip: expected a number or null");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::span<Parameter* const> params, const GradientMap& grads, AdamState& state,
               double lr, double weight_decay, double grad_scale) {
  for (const auto* p : params) {
    if (const Tensor* g = grads.find(*p); g && !g->all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + p->name + "'");
    }
  }
  if (state.slots.empty()) {
    for (const auto* p : params) {
      state.slots.push_back({Tensor::zeros_like(p->value), Tensor::zeros_like(p->value)});
    }
  }
  if (state.slots.size() != params.size()) {
    throw ContractError("adam state holds " + std::to_string(state.slots.size()) +
                        " slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    AdamSlot& slot = state.slots[k];
    const Tensor* g = grads.find(p);
    auto theta = p.value.data();
    auto m = slot.m.data();
    auto v = slot.v.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double grad = (g ? grad_scale * g->data()[i] : 0.0) + weight_decay * theta[i];
      m[i] = state.beta1 * m[i] + (1 - state.beta1) * grad;
      v[i] = state.beta2 * v[i] + (1 - state.beta2) * grad * grad;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

double gradient_norm(const GradientMap& grads) {
  double sq = 0;
  for (const auto& [_, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  return std::sqrt(sq);
}

double clip_scale(double norm, double max_norm) {
  return norm > max_norm ? max_norm / norm : 1.0;
}

bool EarlyStopping::update(double score) {
  if (!seen_ || score < best_) {
    seen_ = true;
    best_ = score;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

// ---------------------------------------------------------------------------
// Metrics

Metrics compute_metrics(std::span<const double> truth, std::span<const double> prediction) {
  if (truth.size() != prediction.size()) {
    throw DimensionError("metrics: " + std::to_string(truth.size()) + " targets vs " +
                         std::to_string(prediction.size()) + " predictions");
  }
  if (truth.empty()) throw ContractError("metrics over an empty set");
  const double n = static_cast<double>(truth.size());
  double abs_sum = 0, sq_sum = 0, pct_sum = 0;
  std::size_t pct_count = 0;
  double mean_y = 0, mean_p = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double e = truth[i] - prediction[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (std::abs(truth[i]) >= kMapeFloor) {
      pct_sum += std::abs(e) / std::abs(truth[i]);
      ++pct_count;
    }
    mean_y += truth[i];
    mean_p += prediction[i];
  }
  mean_y /= n;
  mean_p /= n;
  double cov = 0, var_y = 0, var_p = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double dy = truth[i] - mean_y;
    const double dp = prediction[i] - mean_p;
    cov += dy * dp;
    var_y += dy * dy;
    var_p += dp * dp;
  }
  Metrics m;
  m.mae = abs_sum / n;
  m.mse = sq_sum / n;
  m.rmse = std::sqrt(m.mse);
  m.mape = pct_count ? 100.0 * pct_sum / static_cast<double>(pct_count) : 0.0;
  if (var_y > 0 && var_p > 0) {
    m.pcc = std::clamp(cov / std::sqrt(var_y * var_p), -1.0, 1.0);
  } else {
    m.pcc = sq_sum == 0 ? 1.0 : 0.0;
  }
  return m;
}

MetricsReport compute_metrics(const Tensor& truth, const Tensor& prediction) {
  if (truth.shape() != prediction.shape() || truth.rank() != 4) {
    throw DimensionError("metrics: truth " + nx::shape_to_string(truth.shape()) +
                         " vs prediction " + nx::shape_to_string(prediction.shape()));
  }
  const auto& s = truth.shape();
  const std::size_t b = s[0], q = s[1], per_step = s[2] * s[3];
  MetricsReport report;
  std::vector<double> ys, ps;
  for (std::size_t h = 0; h < q; ++h) {
    ys.clear();
    ps.clear();
    for (std::size_t k = 0; k < b; ++k) {
      const std::size_t off = (k * q + h) * per_step;
      ys.insert(ys.end(), truth.data().begin() + off, truth.data().begin() + off + per_step);
      ps.insert(ps.end(), prediction.data().begin() + off,
                prediction.data().begin() + off + per_step);
    }
    report.per_horizon.push_back(compute_metrics(ys, ps));
  }
  report.average = compute_metrics(truth.data(), prediction.data());
  return report;
}

json to_json(const Metrics& m) {
  return json{{"MAE", m.mae}, {"RMSE", m.rmse}, {"MSE", m.mse}, {"MAPE", m.mape}, {"PCC", m.pcc}};
}

namespace {

std::string fmt17(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "variant,horizon,MAE,RMSE,MAPE,MSE,PCC\n";
  auto line = [&](const std::string& variant, const std::string& horizon, const Metrics& m) {
    out += variant + "," + horizon + "," + fmt17(m.mae) + "," + fmt17(m.rmse) + "," +
           fmt17(m.mape) + "," + fmt17(m.mse) + "," + fmt17(m.pcc) + "\n";
  };
  for (const auto& [variant, report] : rows) {
    for (std::size_t h = 0; h < report.per_horizon.size(); ++h) {
      line(variant, std::to_string(h + 1), report.per_horizon[h]);
    }
    line(variant, "avg", report.average);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

Tensor predict_windows(const Model& model, const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts) {
  if (starts.empty()) throw ContractError("cannot evaluate an empty split");
  const auto& c = model.config();
  Tensor out({starts.size(), c.horizon, c.num_nodes, c.output_dim});
  const std::size_t per_window = c.horizon * c.num_nodes * c.output_dim;
  for (std::size_t begin = 0; begin < starts.size(); begin += kEvalBatch) {
    const auto chunk = starts.subspan(begin, std::min(kEvalBatch, starts.size() - begin));
    const WindowBatch batch = make_batch(ds, norm, chunk, c.history, c.horizon);
    const Tensor pred = model.predict(batch, norm);
    std::copy(pred.data().begin(), pred.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(begin * per_window));
  }
  return out;
}

namespace {

Tensor targets_for(const Dataset& ds, std::span<const std::size_t> starts, std::size_t history,
                   std::size_t horizon, std::size_t out_dim) {
  const std::size_t n = ds.meta.num_nodes, d = ds.meta.channels;
  Tensor out({starts.size(), horizon, n, out_dim});
  for (std::size_t k = 0; k < starts.size(); ++k)
    for (std::size_t q = 0; q < horizon; ++q)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < out_dim; ++c)
          out[((k * horizon + q) * n + i) * out_dim + c] =
              ds.values[((starts[k] + history + q) * n + i) * d + c];
  return out;
}

void check_compatible(const Model& model, const Dataset& ds) {
  const auto& c = model.config();
  if (c.num_nodes != ds.meta.num_nodes) {
    throw ConfigError("model has N=" + std::to_string(c.num_nodes) + " but dataset has N=" +
                      std::to_string(ds.meta.num_nodes));
  }
  if (c.input_dim != ds.meta.channels) {
    throw ConfigError("model has d_in=" + std::to_string(c.input_dim) + " but dataset has d=" +
                      std::to_string(ds.meta.channels));
  }
  if (c.output_dim > ds.meta.channels) {
    throw ConfigError("model has d_out=" + std::to_string(c.output_dim) +
                      " but dataset has only d=" + std::to_string(ds.meta.channels));
  }
  if (c.slots_per_day != ds.meta.slots_per_day) {
    throw ConfigError("model has slots_per_day=" + std::to_string(c.slots_per_day) +
                      " but dataset has slots_per_day=" + std::to_string(ds.meta.slots_per_day));
  }
}

}  // namespace

MetricsReport evaluate(const Model& model, const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts) {
  check_compatible(model, ds);
  const auto& c = model.config();
  const Tensor pred = predict_windows(model, ds, norm, starts);
  return compute_metrics(targets_for(ds, starts, c.history, c.horizon, c.output_dim), pred);
}

// ---------------------------------------------------------------------------
// Training

json to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"lr", r.lr},
         {"train_L_error", r.train_error},
         {"train_L_time", r.train_time},
         {"train_loss", r.train_total},
         {"improved", r.improved}};
  j["val"] = to_json(r.val);
  return j;
}

std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) out += to_json(r).dump() + "\n";
  return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Tensor> snapshot(const Model& model) {
  std::vector<Tensor> out;
  for (const auto* p : model.parameters()) out.push_back(p->value);
  return out;
}

void restore(Model& model, const std::vector<Tensor>& values) {
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = values[k];
}

}  // namespace

FitResult fit(Model& model, const Dataset& ds, const Splits& splits, const Normalizer& norm,
              const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  check_compatible(model, ds);
  if (splits.train.empty()) throw ContractError("training split is empty");
  if (splits.val.empty()) throw ContractError("validation split is empty");
  const ModelConfig& mc = model.config();
  const double time_weight = mc.effective_time_weight();
  const SamplingRanges ranges = mc.sampling_ranges();

  FitResult result;
  std::vector<Parameter*> params = model.parameters();
  AdamState adam;
  EarlyStopping stopper(cfg.patience);
  std::vector<Tensor> best = snapshot(model);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(splits.train.begin(), splits.train.end());
  std::uint64_t batch_counter = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double err_sum = 0, time_sum = 0, total_sum = 0;
    std::size_t batches = 0;
    try {
      for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        const std::span<const std::size_t> starts(
            order.data() + begin, std::min(cfg.batch_size, order.size() - begin));
        const WindowBatch batch = make_batch(ds, norm, starts, mc.history, mc.horizon);
        Tape tape;
        const Model::Bound bound = model.bind(tape);
        const Var pred = model.forward(bound, batch);
        Tensor target = stack_steps(norm.leading(mc.output_dim).normalize(
            targets_for(ds, starts, mc.history, mc.horizon, mc.output_dim)));
        const Var target_var = tape.constant(std::move(target));
        std::optional<TimeDistanceSamples> samples;
        if (time_weight > 0 && batch.batch_size() >= 2) {
          samples = sample_time_distances(batch.slots, ranges, mix_seed(cfg.seed, batch_counter));
        }
        ++batch_counter;
        const LossTerms loss = joint_loss(pred, target_var, bound.time_table,
                                          samples ? &*samples : nullptr, time_weight);
        const double total = loss.total.value().item();
        if (!std::isfinite(total)) {
          throw NumericError("training loss became non-finite in epoch " +
                             std::to_string(epoch));
        }
        const GradientMap grads = tape.backward(loss.total);
        double scale = 1.0;
        if (cfg.grad_clip) scale = clip_scale(gradient_norm(grads), *cfg.grad_clip);
        adam_step(params, grads, adam, rec.lr, cfg.weight_decay, scale);
        err_sum += loss.error_value;
        time_sum += loss.time_value;
        total_sum += total;
        ++batches;
      }
      rec.val = evaluate(model, ds, norm, splits.val).average;
      if (!std::isfinite(rec.val.mae)) {
        throw NumericError("validation MAE became non-finite in epoch " + std::to_string(epoch));
      }
    } catch (const NumericError& e) {
      result.diverged = true;
      result.divergence = e.what();
      break;
    }
    rec.train_error = err_sum / static_cast<double>(batches);
    rec.train_time = time_sum / static_cast<double>(batches);
    rec.train_total = total_sum / static_cast<double>(batches);
    rec.improved = stopper.update(rec.val.mae);
    if (rec.improved) {
      best = snapshot(model);
      result.best_epoch = epoch;
      result.best_val_mae = rec.val.mae;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) break;
  }
  restore(model, best);
  return result;
}

// ---------------------------------------------------------------------------
// Ablations

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names = {"full",    "w/o tagsl", "w/ TE",
                                                 "w/o TDL", "w/o PDF",   "w/o enc-dec"};
  return names;
}

std::vector<AblationResult> run_ablation(const std::vector<std::string>& variants,
                                         const ModelConfig& base, const TrainConfig& train,
                                         const Dataset& ds, const Splits& splits,
                                         const Normalizer& norm) {
  std::vector<AblationResult> out;
  for (const auto& name : variants) {
    ModelConfig cfg = base;
    cfg.ablations = ablation_from_name(name);
    Model model(cfg);
    FitResult fr = fit(model, ds, splits, norm, train);
    MetricsReport test = evaluate(model, ds, norm, splits.test);
    out.push_back(AblationResult{ablation_name(cfg.ablations), std::move(fr), std::move(test),
                                 std::move(model)});
  }
  return out;
}

}  // namespace tgcrn
