#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tgcrn/data.hpp"
#include "tgcrn/gcgru.hpp"
#include "tgcrn/timegraph.hpp"

namespace tgcrn {

/// Variant switches. Each disables one component of the full model.
struct Ablations {
  bool tagsl_off = false;   // static self-learning graph softmax(E_v E_vᵀ)
  bool te_only = false;     // graph from E_v E_vᵀ + η only, no discriminant, no time loss
  bool tdl_off = false;     // no time discrepancy loss
  bool pdf_off = false;     // no periodic discriminant multiplier
  bool encdec_off = false;  // single affine map from the encoder to all Q steps

  friend bool operator==(const Ablations&, const Ablations&) = default;
};

struct ModelConfig {
  std::size_t num_nodes = 0;   // N
  std::size_t input_dim = 1;   // d_in
  std::size_t output_dim = 1;  // d_out
  std::size_t history = 12;    // P
  std::size_t horizon = 12;    // Q
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t node_dim = 64;  // d_N
  std::size_t time_dim = 32;  // d_T
  double saturation = 0.3;        // α
  double time_loss_weight = 0.1;  // λ
  std::size_t adjacent_range = 0;  // 0: P / 2 (at least 1)
  std::size_t mid_range = 0;       // 0: P + Q
  std::size_t slots_per_day = 96;
  PredecessorRule predecessor = PredecessorRule::kWrap;
  Ablations ablations;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  SamplingRanges sampling_ranges() const;
  /// λ after ablations: zero when the time loss is switched off.
  double effective_time_weight() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Fills a config from JSON. Absent keys keep their defaults; unknown keys
/// raise ConfigError prefixed with `path`.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

/// Ablation name as used on the command line and in result tables
/// ("full", "w/o tagsl", "w/ TE", "w/o TDL", "w/o PDF", "w/o enc-dec").
Ablations ablation_from_name(std::string_view name);
std::string ablation_name(const Ablations& a);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Serialized model: config plus named tensors. Binary layout:
/// "TGCRN1" | u64 json length | canonical JSON | u64 tensor count |
/// per tensor: u64 name length, name, u64 rank, u64 dims..., f64 values (LE).
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Layout helpers between [B, S, N, d] tensors and the stacked (B·N)×(S·d)
// matrices the model computes with.
Tensor stack_steps(const Tensor& t);
Tensor unstack_steps(const Tensor& stacked, std::size_t batch, std::size_t steps,
                     std::size_t nodes, std::size_t channels);
/// Step `s` of a [B, S, N, d] tensor as a (B·N)×d matrix.
Tensor step_slice(const Tensor& t, std::size_t s);

struct LossTerms {
  Var total;
  Var error;
  Var time;  // unbound when the time term is off
  double error_value = 0.0;
  double time_value = 0.0;
};

/// mean|y - ŷ| + λ · time discrepancy loss. The time term is skipped
/// (contributes exactly 0) when `weight` is 0 or `samples` is null.
LossTerms joint_loss(const Var& prediction, const Var& target, const Var& time_table,
                     const TimeDistanceSamples* samples, double weight);

/// Time-aware graph convolutional recurrent network: stacked GCGRU encoder
/// and decoder sharing one time-aware graph per step.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const EmbeddingTables& tables() const { return tables_; }
  EmbeddingTables& tables() { return tables_; }

  /// Every trainable parameter in a fixed order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// Parameters recorded on one tape, plus per-forward shared terms.
  struct Bound {
    Var node_table, time_table;
    Var affinity;     // E_v E_vᵀ
    Var static_prop;  // softmax(E_v E_vᵀ); only with tagsl_off
    std::vector<BoundCell> encoder, decoder;
    Var head_w, head_b;      // decoder output head
    Var direct_w, direct_b;  // encdec_off head
  };
  Bound bind(Tape& tape) const;

  /// Time-aware graph for one step: one N×N block per sample. `pdf_input` is
  /// the step's layer-1 input, (B·N)×c.
  TimeAwareGraph step_graph(const Bound& bound, std::span<const TimeIndex> slots,
                            const Var& pdf_input) const;

  /// Final hidden state of each encoder layer, each (B·N)×hidden.
  /// `inputs` is [B, P, N, d_in]; `slots` is B×P and must advance by one slot per step.
  std::vector<Var> encode(const Bound& bound, const Tensor& inputs, const SlotMatrix& slots) const;

  /// Q decoder steps from the encoder state; returns (B·N)×(Q·d_out).
  Var decode(const Bound& bound, const std::vector<Var>& encoder_hidden,
             const SlotMatrix& future_slots) const;

  /// Normalized predictions, (B·N)×(Q·d_out).
  Var forward(const Bound& bound, const WindowBatch& batch) const;

  /// Forecast in original units, [B, Q, N, d_out].
  Tensor predict(const WindowBatch& batch, const Normalizer& norm) const;

  /// Parameters plus any extra named tensors (e.g. normalizer statistics).
  Checkpoint to_checkpoint(std::vector<NamedTensor> extras = {}) const;
  static Model from_checkpoint(const Checkpoint& ckpt);
  /// Copies matching parameter values; throws LoadError on missing names or
  /// shape mismatches.
  void load_parameters(const Checkpoint& ckpt);

 private:
  ModelConfig config_;
  EmbeddingTables tables_;
  std::vector<CellParams> encoder_;
  std::vector<CellParams> decoder_;
  Parameter head_w_, head_b_;
  Parameter direct_w_, direct_b_;
};

/// Splits a B×(P+Q) slot matrix into its history and horizon parts.
std::pair<SlotMatrix, SlotMatrix> split_slots(const SlotMatrix& slots, std::size_t history);

}  // namespace tgcrn
