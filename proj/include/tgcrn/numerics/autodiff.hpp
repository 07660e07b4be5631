#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tgcrn/numerics/tensor.hpp"

namespace tgcrn::numerics {

/// A named trainable tensor. Parameters live outside any tape; a tape records
/// a leaf that refers back to the parameter so gradients can be keyed by it.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Gradients produced by one backward pass, keyed by parameter identity and
/// kept in first-seen order so downstream consumers iterate deterministically.
class GradientMap {
 public:
  using Entry = std::pair<const Parameter*, Tensor>;

  void accumulate(const Parameter& param, const Tensor& grad);
  /// Adds every entry of `other` into this map (entry order of `other`).
  void merge(const GradientMap& other);

  const Tensor* find(const Parameter& param) const;
  const Tensor& at(const Parameter& param) const;
  bool contains(const Parameter& param) const { return find(param) != nullptr; }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const Parameter*, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode computation graph. Nodes are appended in evaluation order, so
/// append order is a valid topological order. One tape per forward pass; a
/// tape is not shared between threads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf for a trainable parameter. Repeated calls with the same parameter
  /// return the same leaf, so multiple uses accumulate into one gradient.
  Var parameter(const Parameter& param);

  /// Appends an op result. `backward` is dropped when no input tracks
  /// gradients.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulator for a node, zero-initialised on first access.
  Tensor& grad(std::size_t id);

  /// Reverse sweep from a scalar loss. Every parameter leaf on the tape gets
  /// an entry, zero when the loss does not depend on it.
  GradientMap backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
    const Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> leaves_;
};

// ---------------------------------------------------------------------------
// Operations. All take rank-2 operands unless stated otherwise.

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

/// Binary elementwise ops accept equal shapes, a scalar operand on either
/// side, or a 1×n row vector against an m×n matrix on either side.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);

Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var abs(const Var& a);

/// Numerically stable softmax along each row.
Var row_softmax(const Var& a);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var reshape(const Var& a, Shape shape);

/// Reductions over every element; any rank. Result has rank 0.
Var sum(const Var& a);
Var mean(const Var& a);
/// m×n -> m×1.
Var row_sum(const Var& a);
/// Euclidean norm of every row, m×n -> m×1. The subgradient at a zero row is
/// taken as zero.
Var row_norm(const Var& a);

/// Embedding lookup: out[r] = table[indices[r]].
Var gather_rows(const Var& table, std::span<const std::size_t> indices);

/// Row-wise Kronecker product: out[r, i*q + j] = a[r, i] * b[r, j].
Var row_outer(const Var& a, const Var& b);

/// `a` stacks B square n×n blocks vertically ((B·n)×n); `b` stacks B blocks of
/// n×c. Returns the stacked per-block products ((B·n)×c).
Var block_matmul(const Var& a, const Var& b);
/// Per-block Gram matrices of stacked (B·n)×c blocks: out block = X_b X_bᵀ.
Var block_gram(const Var& x, std::size_t block_rows);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
/// Hadamard product.
Var operator*(const Var& a, const Var& b);
Var operator*(double factor, const Var& a);
Var operator+(double offset, const Var& a);
Var operator-(double offset, const Var& a);

}  // namespace tgcrn::numerics
