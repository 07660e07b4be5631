#include "tgcrn/gcgru.hpp"

#include <cmath>

#include "tgcrn/errors.hpp"

namespace tgcrn {

namespace nx = numerics;

CellParams CellParams::init(const std::string& prefix, std::size_t embed_dim,
                            std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng) {
  if (embed_dim == 0 || input_dim == 0 || hidden_dim == 0) {
    throw ConfigError("cell dimensions must be positive");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto make = [&](const std::string& name, nx::Shape shape) {
    Parameter p{prefix + "." + name, Tensor(std::move(shape))};
    for (auto& v : p.value.data()) v = dist(rng);
    return p;
  };
  const std::size_t cat = input_dim + hidden_dim;
  CellParams params;
  params.w_update = make("w_update", {embed_dim, cat, hidden_dim});
  params.w_reset = make("w_reset", {embed_dim, cat, hidden_dim});
  params.w_candidate = make("w_candidate", {embed_dim, cat, hidden_dim});
  params.b_update = make("b_update", {embed_dim, hidden_dim});
  params.b_reset = make("b_reset", {embed_dim, hidden_dim});
  params.b_candidate = make("b_candidate", {embed_dim, hidden_dim});
  params.embed_dim = embed_dim;
  params.input_dim = input_dim;
  params.hidden_dim = hidden_dim;
  return params;
}

std::vector<Parameter*> CellParams::parameters() {
  return {&w_update, &w_reset, &w_candidate, &b_update, &b_reset, &b_candidate};
}

std::vector<const Parameter*> CellParams::parameters() const {
  return {&w_update, &w_reset, &w_candidate, &b_update, &b_reset, &b_candidate};
}

BoundCell BoundCell::bind(Tape& tape, const CellParams& params) {
  const std::size_t rows = params.embed_dim * (params.input_dim + params.hidden_dim);
  auto flat = [&](const Parameter& p) {
    return nx::reshape(tape.parameter(p), {rows, params.hidden_dim});
  };
  return BoundCell{flat(params.w_update),
                   flat(params.w_reset),
                   flat(params.w_candidate),
                   tape.parameter(params.b_update),
                   tape.parameter(params.b_reset),
                   tape.parameter(params.b_candidate),
                   params.input_dim,
                   params.hidden_dim};
}

Var fused_embedding(const Var& node_table, const Var& time_table,
                    std::span<const TimeIndex> slots) {
  const std::size_t n = node_table.value().shape()[0];
  const std::size_t table_rows = time_table.value().shape()[0];
  std::vector<std::size_t> node_rows, time_rows;
  node_rows.reserve(slots.size() * n);
  time_rows.reserve(slots.size() * n);
  for (auto s : slots) {
    if (s.slot >= table_rows) {
      throw OutOfRangeError("slot " + std::to_string(s.slot) + " outside time table of " +
                            std::to_string(table_rows) + " rows");
    }
    for (std::size_t i = 0; i < n; ++i) {
      node_rows.push_back(i);
      time_rows.push_back(s.slot);
    }
  }
  return nx::concat_cols({nx::gather_rows(node_table, node_rows),
                          nx::gather_rows(time_table, time_rows)});
}

Var graph_conv(const Var& propagation, const Var& features, const Var& fused, const Var& pool_w,
               const Var& pool_b) {
  const std::size_t embed = fused.value().shape()[1];
  const std::size_t c = features.value().shape()[1];
  if (pool_w.value().shape()[0] != embed * c) {
    throw DimensionError("graph_conv: weight pool has " +
                         std::to_string(pool_w.value().shape()[0]) + " rows, expected " +
                         std::to_string(embed) + "x" + std::to_string(c));
  }
  const Var aggregated = nx::block_matmul(propagation, features);
  // Σ_d fused[i,d] · (aggregated_i · pool[d]) as one matrix product.
  return nx::matmul(nx::row_outer(fused, aggregated), pool_w) + nx::matmul(fused, pool_b);
}

namespace {

void check_finite(const Var& v, const char* gate) {
  if (!v.value().all_finite()) {
    throw NumericError(std::string("non-finite value in GCGRU ") + gate + " gate");
  }
}

}  // namespace

CellState gcgru_step(const Var& input, const CellState& state, const Var& propagation,
                     const Var& fused, const BoundCell& cell, GateTrace* trace) {
  const Tensor& x = input.value();
  const Tensor& h = state.h.value();
  if (x.rank() != 2 || x.shape()[1] != cell.input_dim) {
    throw DimensionError("gcgru_step: input " + nx::shape_to_string(x.shape()) +
                         " does not have " + std::to_string(cell.input_dim) + " channels");
  }
  if (h.rank() != 2 || h.shape()[0] != x.shape()[0] || h.shape()[1] != cell.hidden_dim) {
    throw DimensionError("gcgru_step: hidden state " + nx::shape_to_string(h.shape()) +
                         " does not match input " + nx::shape_to_string(x.shape()) +
                         " with hidden size " + std::to_string(cell.hidden_dim));
  }

  const Var input_hidden = nx::concat_cols({input, state.h});
  const Var update = nx::sigmoid(
      graph_conv(propagation, input_hidden, fused, cell.w_update, cell.b_update));
  check_finite(update, "update");
  const Var reset =
      nx::sigmoid(graph_conv(propagation, input_hidden, fused, cell.w_reset, cell.b_reset));
  check_finite(reset, "reset");
  const Var candidate = nx::tanh(graph_conv(propagation, nx::concat_cols({input, reset * state.h}),
                                            fused, cell.w_candidate, cell.b_candidate));
  check_finite(candidate, "candidate");

  if (trace) *trace = GateTrace{update.value(), reset.value(), candidate.value()};
  return CellState{(1.0 - update) * state.h + update * candidate};
}

}  // namespace tgcrn
