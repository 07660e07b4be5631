#include "tgcrn/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "tgcrn/errors.hpp"

namespace tgcrn {

namespace nx = numerics;
using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "TGCRN1";

void require_positive(std::size_t v, const char* field) {
  if (v == 0) throw ConfigError(std::string("model.") + field + " must be >= 1");
}

std::string predecessor_name(PredecessorRule r) {
  return r == PredecessorRule::kWrap ? "wrap" : "clamp";
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  require_positive(num_nodes, "num_nodes");
  require_positive(input_dim, "input_dim");
  require_positive(output_dim, "output_dim");
  require_positive(history, "history");
  require_positive(horizon, "horizon");
  require_positive(layers, "layers");
  require_positive(hidden, "hidden");
  require_positive(node_dim, "node_dim");
  require_positive(time_dim, "time_dim");
  require_positive(slots_per_day, "slots_per_day");
  if (!(saturation >= 0)) throw ConfigError("model.saturation must be >= 0");
  if (!(time_loss_weight >= 0)) throw ConfigError("model.time_loss_weight must be >= 0");
  if (ablations.tagsl_off && ablations.te_only) {
    throw ConfigError("model.ablations: tagsl_off and te_only are mutually exclusive");
  }
}

SamplingRanges ModelConfig::sampling_ranges() const {
  SamplingRanges r;
  r.adjacent = adjacent_range != 0 ? adjacent_range : std::max<std::size_t>(1, history / 2);
  r.mid = mid_range != 0 ? mid_range : history + horizon;
  return r;
}

double ModelConfig::effective_time_weight() const {
  if (ablations.tdl_off || ablations.te_only) return 0.0;
  return time_loss_weight;
}

json to_json(const ModelConfig& c) {
  return json{{"num_nodes", c.num_nodes},
              {"input_dim", c.input_dim},
              {"output_dim", c.output_dim},
              {"history", c.history},
              {"horizon", c.horizon},
              {"layers", c.layers},
              {"hidden", c.hidden},
              {"node_dim", c.node_dim},
              {"time_dim", c.time_dim},
              {"saturation", c.saturation},
              {"time_loss_weight", c.time_loss_weight},
              {"adjacent_range", c.adjacent_range},
              {"mid_range", c.mid_range},
              {"slots_per_day", c.slots_per_day},
              {"predecessor", predecessor_name(c.predecessor)},
              {"ablations",
               {{"tagsl_off", c.ablations.tagsl_off},
                {"te_only", c.ablations.te_only},
                {"tdl_off", c.ablations.tdl_off},
                {"pdf_off", c.ablations.pdf_off},
                {"encdec_off", c.ablations.encdec_off}}},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  ModelConfig c;
  static const std::set<std::string> known = {
      "num_nodes", "input_dim",  "output_dim", "history",          "horizon",
      "layers",    "hidden",     "node_dim",   "time_dim",         "saturation",
      "time_loss_weight",        "adjacent_range", "mid_range",    "slots_per_day",
      "predecessor", "ablations", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(path + "." + key + ": unknown key");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(path + "." + key + ": wrong type");
    }
  };
  get("num_nodes", c.num_nodes);
  get("input_dim", c.input_dim);
  get("output_dim", c.output_dim);
  get("history", c.history);
  get("horizon", c.horizon);
  get("layers", c.layers);
  get("hidden", c.hidden);
  get("node_dim", c.node_dim);
  get("time_dim", c.time_dim);
  get("saturation", c.saturation);
  get("time_loss_weight", c.time_loss_weight);
  get("adjacent_range", c.adjacent_range);
  get("mid_range", c.mid_range);
  get("slots_per_day", c.slots_per_day);
  get("seed", c.seed);
  if (j.contains("predecessor")) {
    const auto& p = j.at("predecessor");
    if (p == "wrap") {
      c.predecessor = PredecessorRule::kWrap;
    } else if (p == "clamp") {
      c.predecessor = PredecessorRule::kClamp;
    } else {
      throw ConfigError(path + ".predecessor: expected \"wrap\" or \"clamp\"");
    }
  }
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    if (!a.is_object()) throw ConfigError(path + ".ablations: expected an object");
    static const std::set<std::string> flags = {"tagsl_off", "te_only", "tdl_off", "pdf_off",
                                                "encdec_off"};
    for (const auto& [key, value] : a.items()) {
      if (!flags.count(key)) throw ConfigError(path + ".ablations." + key + ": unknown key");
      if (!value.is_boolean()) throw ConfigError(path + ".ablations." + key + ": wrong type");
    }
    c.ablations.tagsl_off = a.value("tagsl_off", false);
    c.ablations.te_only = a.value("te_only", false);
    c.ablations.tdl_off = a.value("tdl_off", false);
    c.ablations.pdf_off = a.value("pdf_off", false);
    c.ablations.encdec_off = a.value("encdec_off", false);
  }
  return c;
}

Ablations ablation_from_name(std::string_view name) {
  Ablations a;
  if (name == "full") return a;
  if (name == "w/o tagsl" || name == "w/o-tagsl") {
    a.tagsl_off = true;
  } else if (name == "w/ TE" || name == "w/-TE") {
    a.te_only = true;
  } else if (name == "w/o TDL" || name == "w/o-TDL") {
    a.tdl_off = true;
  } else if (name == "w/o PDF" || name == "w/o-PDF") {
    a.pdf_off = true;
  } else if (name == "w/o enc-dec" || name == "w/o-enc-dec") {
    a.encdec_off = true;
  } else {
    throw ConfigError("unknown ablation '" + std::string(name) + "'");
  }
  return a;
}

std::string ablation_name(const Ablations& a) {
  if (a.tagsl_off) return "w/o tagsl";
  if (a.te_only) return "w/ TE";
  if (a.tdl_off) return "w/o TDL";
  if (a.pdf_off) return "w/o PDF";
  if (a.encdec_off) return "w/o enc-dec";
  return "full";
}

// ---------------------------------------------------------------------------
// Checkpoint

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic);
  const std::string config = to_json(ckpt.config).dump();
  io::put_u64(out, config.size());
  out += config;
  io::put_u64(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    io::put_u64(out, t.name.size());
    out += t.name;
    io::put_u64(out, t.value.rank());
    for (auto d : t.value.shape()) io::put_u64(out, d);
    io::put_f64s(out, t.value.data());
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) {
    throw LoadError("checkpoint does not start with magic bytes TGCRN1");
  }
  io::Reader r(std::span<const char>(bytes.data() + kMagic.size(), bytes.size() - kMagic.size()));
  Checkpoint ckpt;
  const std::uint64_t config_len = r.u64();
  const std::string config = r.str(config_len);
  if (!r.ok()) throw LoadError("checkpoint truncated in config header");
  try {
    ckpt.config = model_config_from_json(json::parse(config));
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count && r.ok(); ++k) {
    NamedTensor t;
    t.name = r.str(r.u64());
    const std::uint64_t rank = r.u64();
    if (!r.ok() || rank > 8) throw LoadError("checkpoint tensor header corrupt");
    nx::Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      numel *= d;
    }
    if (!r.ok() || numel == 0 || numel * sizeof(double) > r.remaining()) {
      throw LoadError("checkpoint truncated in tensor '" + t.name + "'");
    }
    t.value = Tensor(shape);
    r.f64s(t.value.data());
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.ok()) throw LoadError("checkpoint truncated");
  if (r.remaining() != 0) throw LoadError("checkpoint has trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Layout helpers

Tensor stack_steps(const Tensor& t) {
  if (t.rank() != 4) throw DimensionError("stack_steps expects [B,S,N,d], got " +
                                          nx::shape_to_string(t.shape()));
  const auto& s = t.shape();
  const std::size_t b = s[0], steps = s[1], n = s[2], d = s[3];
  Tensor out({b * n, steps * d});
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t q = 0; q < steps; ++q)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c)
          out(k * n + i, q * d + c) = t[((k * steps + q) * n + i) * d + c];
  return out;
}

Tensor unstack_steps(const Tensor& stacked, std::size_t batch, std::size_t steps,
                     std::size_t nodes, std::size_t channels) {
  if (stacked.shape() != nx::Shape{batch * nodes, steps * channels}) {
    throw DimensionError("unstack_steps: shape " + nx::shape_to_string(stacked.shape()) +
                         " does not match requested layout");
  }
  Tensor out({batch, steps, nodes, channels});
  for (std::size_t k = 0; k < batch; ++k)
    for (std::size_t q = 0; q < steps; ++q)
      for (std::size_t i = 0; i < nodes; ++i)
        for (std::size_t c = 0; c < channels; ++c)
          out[((k * steps + q) * nodes + i) * channels + c] =
              stacked(k * nodes + i, q * channels + c);
  return out;
}

Tensor step_slice(const Tensor& t, std::size_t s) {
  const auto& sh = t.shape();
  if (t.rank() != 4 || s >= sh[1]) throw DimensionError("step_slice out of range");
  const std::size_t b = sh[0], steps = sh[1], n = sh[2], d = sh[3];
  Tensor out({b * n, d});
  for (std::size_t k = 0; k < b; ++k) {
    std::copy_n(&t.data()[(k * steps + s) * n * d], n * d, &out.data()[k * n * d]);
  }
  return out;
}

std::pair<SlotMatrix, SlotMatrix> split_slots(const SlotMatrix& slots, std::size_t history) {
  SlotMatrix past, future;
  for (const auto& row : slots) {
    if (row.size() < history) throw DimensionError("slot row shorter than history");
    past.emplace_back(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(history));
    future.emplace_back(row.begin() + static_cast<std::ptrdiff_t>(history), row.end());
  }
  return {std::move(past), std::move(future)};
}

LossTerms joint_loss(const Var& prediction, const Var& target, const Var& time_table,
                     const TimeDistanceSamples* samples, double weight) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("joint_loss: prediction " + nx::shape_to_string(prediction.shape()) +
                         " vs target " + nx::shape_to_string(target.shape()));
  }
  LossTerms terms;
  terms.error = nx::mean(nx::abs(prediction - target));
  terms.error_value = terms.error.value().item();
  terms.total = terms.error;
  if (weight > 0 && samples != nullptr) {
    terms.time = time_discrepancy_loss(time_table, *samples);
    terms.time_value = terms.time.value().item();
    terms.total = terms.error + weight * terms.time;
  }
  return terms;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  tables_ = EmbeddingTables::init(c.num_nodes, c.node_dim, c.slots_per_day, c.time_dim, c.seed);
  std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t embed = c.node_dim + c.time_dim;
  for (std::size_t l = 0; l < c.layers; ++l) {
    encoder_.push_back(CellParams::init("encoder." + std::to_string(l), embed,
                                        l == 0 ? c.input_dim : c.hidden, c.hidden, rng));
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    decoder_.push_back(
        CellParams::init("decoder." + std::to_string(l), embed, c.hidden, c.hidden, rng));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.hidden));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto init = [&](const std::string& name, nx::Shape shape) {
    Parameter p{name, Tensor(std::move(shape))};
    for (auto& v : p.value.data()) v = dist(rng);
    return p;
  };
  head_w_ = init("head.weight", {c.hidden, c.output_dim});
  head_b_ = Parameter{"head.bias", Tensor({1, c.output_dim})};
  direct_w_ = init("direct.weight", {c.hidden, c.horizon * c.output_dim});
  direct_b_ = Parameter{"direct.bias", Tensor({1, c.horizon * c.output_dim})};
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out{&tables_.node_table, &tables_.time_table};
  for (auto& cell : encoder_) {
    for (auto* p : cell.parameters()) out.push_back(p);
  }
  if (config_.ablations.encdec_off) {
    out.push_back(&direct_w_);
    out.push_back(&direct_b_);
  } else {
    for (auto& cell : decoder_) {
      for (auto* p : cell.parameters()) out.push_back(p);
    }
    out.push_back(&head_w_);
    out.push_back(&head_b_);
  }
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  auto mutable_params = const_cast<Model*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

Model::Bound Model::bind(Tape& tape) const {
  Bound b;
  b.node_table = tape.parameter(tables_.node_table);
  b.time_table = tape.parameter(tables_.time_table);
  b.affinity = static_affinity(b.node_table);
  if (config_.ablations.tagsl_off) b.static_prop = nx::row_softmax(b.affinity);
  for (const auto& cell : encoder_) b.encoder.push_back(BoundCell::bind(tape, cell));
  if (config_.ablations.encdec_off) {
    b.direct_w = tape.parameter(direct_w_);
    b.direct_b = tape.parameter(direct_b_);
  } else {
    for (const auto& cell : decoder_) b.decoder.push_back(BoundCell::bind(tape, cell));
    b.head_w = tape.parameter(head_w_);
    b.head_b = tape.parameter(head_b_);
  }
  return b;
}

TimeAwareGraph Model::step_graph(const Bound& bound, std::span<const TimeIndex> slots,
                                 const Var& pdf_input) const {
  const std::size_t n = config_.num_nodes;
  const auto& ab = config_.ablations;
  std::vector<TimeIndex> slot_list(slots.begin(), slots.end());
  if (ab.tagsl_off) {
    std::vector<std::size_t> tile(slots.size() * n);
    for (std::size_t k = 0; k < tile.size(); ++k) tile[k] = k % n;
    return TimeAwareGraph{nx::gather_rows(bound.affinity, tile),
                          nx::gather_rows(bound.static_prop, tile), std::move(slot_list)};
  }
  const Var trend = trend_factors(bound.time_table, slots, config_.predecessor);
  Var discriminant;
  if (!ab.pdf_off && !ab.te_only) discriminant = periodic_discriminant(pdf_input, n);
  return time_aware_adjacency(bound.affinity, trend, discriminant, config_.saturation,
                              std::move(slot_list));
}

namespace {

std::vector<TimeIndex> column(const SlotMatrix& slots, std::size_t j) {
  std::vector<TimeIndex> out;
  out.reserve(slots.size());
  for (const auto& row : slots) out.push_back(row[j]);
  return out;
}

void check_consecutive(const SlotMatrix& slots, std::size_t slots_per_day, const char* what) {
  for (std::size_t b = 0; b < slots.size(); ++b) {
    for (std::size_t j = 1; j < slots[b].size(); ++j) {
      if (slots[b][j].slot != (slots[b][j - 1].slot + 1) % slots_per_day) {
        throw ContractError(std::string(what) + ": slots of sample " + std::to_string(b) +
                            " jump from " + std::to_string(slots[b][j - 1].slot) + " to " +
                            std::to_string(slots[b][j].slot));
      }
    }
  }
}

}  // namespace

std::vector<Var> Model::encode(const Bound& bound, const Tensor& inputs,
                               const SlotMatrix& slots) const {
  const auto& c = config_;
  if (inputs.rank() != 4 || inputs.shape()[1] != c.history || inputs.shape()[2] != c.num_nodes ||
      inputs.shape()[3] != c.input_dim) {
    throw DimensionError("encode: inputs " + nx::shape_to_string(inputs.shape()) +
                         " do not match [B," + std::to_string(c.history) + "," +
                         std::to_string(c.num_nodes) + "," + std::to_string(c.input_dim) + "]");
  }
  const std::size_t batch = inputs.shape()[0];
  if (slots.size() != batch) throw DimensionError("encode: slot rows do not match batch size");
  for (const auto& row : slots) {
    if (row.size() != c.history) throw DimensionError("encode: slot row length must equal P");
  }
  check_consecutive(slots, c.slots_per_day, "encode");

  Tape& tape = *bound.node_table.tape();
  std::vector<Var> hidden;
  for (std::size_t l = 0; l < c.layers; ++l) {
    hidden.push_back(tape.constant(Tensor({batch * c.num_nodes, c.hidden})));
  }
  for (std::size_t j = 0; j < c.history; ++j) {
    const auto step_slots = column(slots, j);
    const Var x = tape.constant(step_slice(inputs, j));
    const Var fused = fused_embedding(bound.node_table, bound.time_table, step_slots);
    const TimeAwareGraph graph = step_graph(bound, step_slots, x);
    Var layer_input = x;
    for (std::size_t l = 0; l < c.layers; ++l) {
      hidden[l] = gcgru_step(layer_input, CellState{hidden[l]}, graph.propagation, fused,
                             bound.encoder[l])
                      .h;
      layer_input = hidden[l];
    }
  }
  return hidden;
}

Var Model::decode(const Bound& bound, const std::vector<Var>& encoder_hidden,
                  const SlotMatrix& future_slots) const {
  const auto& c = config_;
  if (encoder_hidden.size() != c.layers) {
    throw DimensionError("decode: expected " + std::to_string(c.layers) + " encoder states");
  }
  if (c.ablations.encdec_off) {
    return nx::matmul(encoder_hidden.back(), bound.direct_w) + bound.direct_b;
  }
  for (const auto& row : future_slots) {
    if (row.size() != c.horizon) throw DimensionError("decode: slot row length must equal Q");
  }
  check_consecutive(future_slots, c.slots_per_day, "decode");

  std::vector<Var> hidden = encoder_hidden;
  Var layer1_input = encoder_hidden.back();
  std::vector<Var> outputs;
  for (std::size_t q = 0; q < c.horizon; ++q) {
    const auto step_slots = column(future_slots, q);
    const Var fused = fused_embedding(bound.node_table, bound.time_table, step_slots);
    const TimeAwareGraph graph = step_graph(bound, step_slots, layer1_input);
    Var layer_input = layer1_input;
    for (std::size_t l = 0; l < c.layers; ++l) {
      hidden[l] = gcgru_step(layer_input, CellState{hidden[l]}, graph.propagation, fused,
                             bound.decoder[l])
                      .h;
      layer_input = hidden[l];
    }
    outputs.push_back(nx::matmul(hidden.back(), bound.head_w) + bound.head_b);
    layer1_input = hidden.back();
  }
  return nx::concat_cols(outputs);
}

Var Model::forward(const Bound& bound, const WindowBatch& batch) const {
  const auto [past, future] = split_slots(batch.slots, config_.history);
  if (!past.empty() && !future.empty()) {
    // The horizon continues the history without a gap.
    for (std::size_t b = 0; b < past.size(); ++b) {
      if (future[b][0].slot != (past[b].back().slot + 1) % config_.slots_per_day) {
        throw ContractError("forward: horizon slots do not follow history slots");
      }
    }
  }
  return decode(bound, encode(bound, batch.inputs, past), future);
}

Tensor Model::predict(const WindowBatch& batch, const Normalizer& norm) const {
  Tape tape;
  const Bound bound = bind(tape);
  const Var out = forward(bound, batch);
  const Tensor y = unstack_steps(out.value(), batch.batch_size(), config_.horizon,
                                 config_.num_nodes, config_.output_dim);
  Tensor result = norm.leading(config_.output_dim).denormalize(y);
  if (!result.all_finite()) throw NumericError("forecast contains non-finite values");
  return result;
}

Checkpoint Model::to_checkpoint(std::vector<NamedTensor> extras) const {
  Checkpoint ckpt{config_, {}};
  for (const auto* p : parameters()) ckpt.tensors.push_back({p->name, p->value});
  for (auto& e : extras) ckpt.tensors.push_back(std::move(e));
  return ckpt;
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  Model m(ckpt.config);
  m.load_parameters(ckpt);
  return m;
}

void Model::load_parameters(const Checkpoint& ckpt) {
  for (auto* p : parameters()) {
    const Tensor* t = ckpt.find(p->name);
    if (!t) throw LoadError("checkpoint has no tensor '" + p->name + "'");
    if (t->shape() != p->value.shape()) {
      throw LoadError("checkpoint tensor '" + p->name + "' has shape " +
                      nx::shape_to_string(t->shape()) + ", model expects " +
                      nx::shape_to_string(p->value.shape()));
    }
    p->value = *t;
  }
}

}  // namespace tgcrn
