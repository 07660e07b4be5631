#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tgcrn/timegraph.hpp"

namespace tgcrn {

/// Weight and bias pools of one GCGRU cell. Per-node weights are generated as
/// fused_embedding_row · pool, so every pool's leading axis is d_N + d_T.
struct CellParams {
  Parameter w_update, w_reset, w_candidate;  // [embed, input + hidden, hidden]
  Parameter b_update, b_reset, b_candidate;  // [embed, hidden]
  std::size_t embed_dim = 0;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  /// Uniform on [-1/sqrt(input + hidden), +1/sqrt(input + hidden)].
  static CellParams init(const std::string& prefix, std::size_t embed_dim, std::size_t input_dim,
                         std::size_t hidden_dim, std::mt19937_64& rng);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

/// CellParams recorded on a tape with pools flattened to 2-D.
struct BoundCell {
  Var w_update, w_reset, w_candidate;  // [(embed·(input + hidden)) × hidden]
  Var b_update, b_reset, b_candidate;  // [embed × hidden]
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  static BoundCell bind(Tape& tape, const CellParams& params);
};

struct CellState {
  Var h;  // (B·N)×hidden
};

/// Gate activations of the last step, for inspection in tests.
struct GateTrace {
  Tensor update, reset, candidate;
};

/// [E_v row ; E_τ[slot] row] for every node, stacked per sample: (B·N)×(d_N + d_T).
Var fused_embedding(const Var& node_table, const Var& time_table, std::span<const TimeIndex> slots);

/// Node-adaptive graph convolution: row i of the output is
/// (prop · features)_i · W_i + b_i with W_i = fused_i · pool_w and b_i = fused_i · pool_b.
/// `pool_w` is the flattened ((embed·c) × out) pool.
Var graph_conv(const Var& propagation, const Var& features, const Var& fused, const Var& pool_w,
               const Var& pool_b);

/// One recurrent step over the time-aware graph.
CellState gcgru_step(const Var& input, const CellState& state, const Var& propagation,
                     const Var& fused, const BoundCell& cell, GateTrace* trace = nullptr);

}  // namespace tgcrn
