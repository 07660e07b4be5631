#include "tgcrn/numerics/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "tgcrn/errors.hpp"

namespace tgcrn::numerics {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

MatMap as_matrix(Tensor& t) { return MatMap(t.data().data(), t.shape()[0], t.shape()[1]); }
ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), t.shape()[0], t.shape()[1]);
}

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ContractError("operation on an unbound Var");
  if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
  return *a.tape();
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// How a binary operand maps onto output element k.
enum class Bcast { kFull, kScalar, kRow };

struct BinaryPlan {
  Shape out_shape;
  Bcast a = Bcast::kFull;
  Bcast b = Bcast::kFull;
  std::size_t row_len = 1;

  std::size_t index(Bcast kind, std::size_t k) const {
    switch (kind) {
      case Bcast::kFull: return k;
      case Bcast::kScalar: return 0;
      case Bcast::kRow: return k % row_len;
    }
    return k;
  }
};

bool is_row_of(const Tensor& row, const Tensor& mat) {
  return row.rank() == 2 && mat.rank() == 2 && row.shape()[0] == 1 &&
         row.shape()[1] == mat.shape()[1];
}

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* op) {
  BinaryPlan plan;
  if (a.shape() == b.shape()) {
    plan.out_shape = a.shape();
  } else if (b.is_scalar()) {
    plan.out_shape = a.shape();
    plan.b = Bcast::kScalar;
  } else if (a.is_scalar()) {
    plan.out_shape = b.shape();
    plan.a = Bcast::kScalar;
  } else if (is_row_of(b, a)) {
    plan.out_shape = a.shape();
    plan.b = Bcast::kRow;
    plan.row_len = a.shape()[1];
  } else if (is_row_of(a, b)) {
    plan.out_shape = b.shape();
    plan.a = Bcast::kRow;
    plan.row_len = b.shape()[1];
  } else {
    throw DimensionError(std::string(op) + ": incompatible shapes " +
                         shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  return plan;
}

// Elementwise unary op with derivative expressed via input x and output y.
template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, dfdx](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(io);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// GradientMap

void GradientMap::accumulate(const Parameter& param, const Tensor& grad) {
  if (grad.shape() != param.value.shape()) {
    throw DimensionError("gradient for '" + param.name + "' has shape " +
                         shape_to_string(grad.shape()) + ", parameter has " +
                         shape_to_string(param.value.shape()));
  }
  auto it = index_.find(&param);
  if (it == index_.end()) {
    index_.emplace(&param, entries_.size());
    entries_.emplace_back(&param, grad);
  } else {
    add_into(entries_[it->second].second, grad);
  }
}

void GradientMap::merge(const GradientMap& other) {
  for (const auto& [param, grad] : other.entries_) accumulate(*param, grad);
}

const Tensor* GradientMap::find(const Parameter& param) const {
  auto it = index_.find(&param);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& GradientMap::at(const Parameter& param) const {
  const Tensor* g = find(param);
  if (!g) throw ContractError("no gradient recorded for parameter '" + param.name + "'");
  return *g;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& param) {
  if (auto it = leaves_.find(&param); it != leaves_.end()) return Var(this, it->second);
  nodes_.push_back(Node{param.value, {}, true, false, nullptr, &param});
  leaves_.emplace(&param, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool tracked = false;
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractError("op input recorded on a different tape");
    tracked = tracked || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(value), {}, tracked, false, nullptr, nullptr};
  if (tracked) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor::zeros_like(n.value);
    n.has_grad = true;
  }
  return n.grad;
}

GradientMap Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (!loss.value().is_scalar()) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(loss.value().shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  // Parameters are reported in the order they were first bound to this tape.
  std::vector<std::pair<std::size_t, const Parameter*>> order;
  order.reserve(leaves_.size());
  for (const auto& [param, id] : leaves_) order.emplace_back(id, param);
  std::sort(order.begin(), order.end());
  GradientMap out;
  for (const auto& [id, param] : order) out.accumulate(*param, grad(id));
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()));
  }
  Tensor out({av.shape()[0], bv.shape()[1]});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      as_matrix(t.grad(ia)).noalias() += as_matrix(g) * as_matrix(t.value(ib)).transpose();
    }
    if (t.requires_grad(ib)) {
      as_matrix(t.grad(ib)).noalias() += as_matrix(t.value(ia)).transpose() * as_matrix(g);
    }
  });
}

Var transpose(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_matrix(av, "transpose");
  Tensor out({av.shape()[1], av.shape()[0]});
  as_matrix(out) = as_matrix(av).transpose();
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    as_matrix(t.grad(ia)) += as_matrix(g).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryPlan plan = plan_binary(av, bv, "add");
  Tensor out(plan.out_shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = av[plan.index(plan.a, k)] + bv[plan.index(plan.b, k)];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, plan](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t k = 0; k < g.size(); ++k) ga[plan.index(plan.a, k)] += g[k];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t k = 0; k < g.size(); ++k) gb[plan.index(plan.b, k)] += g[k];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryPlan plan = plan_binary(av, bv, "sub");
  Tensor out(plan.out_shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = av[plan.index(plan.a, k)] - bv[plan.index(plan.b, k)];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, plan](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t k = 0; k < g.size(); ++k) ga[plan.index(plan.a, k)] += g[k];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t k = 0; k < g.size(); ++k) gb[plan.index(plan.b, k)] -= g[k];
    }
  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryPlan plan = plan_binary(av, bv, "hadamard");
  Tensor out(plan.out_shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = av[plan.index(plan.a, k)] * bv[plan.index(plan.b, k)];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, plan](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[plan.index(plan.a, k)] += g[k] * y[plan.index(plan.b, k)];
      }
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t k = 0; k < g.size(); ++k) {
        gb[plan.index(plan.b, k)] += g[k] * x[plan.index(plan.a, k)];
      }
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        // Branching keeps exp() from overflowing for large |x|.
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var row_softmax(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "row_softmax");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out(x.shape());
  for (std::size_t r = 0; r < m; ++r) {
    double mx = x(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out(r, c) = std::exp(x(r, c) - mx);
      total += out(r, c);
    }
    for (std::size_t c = 0; c < n; ++c) out(r, c) /= total;
  }
  const std::size_t ia = a.id();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, m, n](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < n; ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape& tape = tape_of(parts[0]);
  const std::size_t m = parts[0].value().rank() == 2 ? parts[0].value().shape()[0] : 0;
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    if (p.tape() != &tape) throw ContractError("concat_cols: operands on different tapes");
    if (v.rank() != 2 || v.shape()[0] != m) {
      throw DimensionError("concat_cols: operand " + shape_to_string(v.shape()) +
                           " does not match row count " + std::to_string(m));
    }
    widths.push_back(v.shape()[1]);
    ids.push_back(p.id());
    total += v.shape()[1];
  }
  Tensor out({m, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    const std::size_t w = v.shape()[1];
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(&v.data()[r * w], w, &out.data()[r * total + offset]);
    }
    offset += w;
  }
  return tape.record(std::move(out), parts, [ids, widths, m, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad(ids[p]);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
        }
      }
      off += w;
    }
    (void)total;
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "slice_rows");
  if (begin >= end || end > x.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.shape()[1];
  Tensor out({end - begin, n});
  std::copy_n(&x.data()[begin * n], (end - begin) * n, out.data().data());
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, [ia, begin, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[begin * n + k] += g[k];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "slice_cols");
  if (begin >= end || end > x.shape()[1]) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.shape()[0], w = end - begin;
  Tensor out({m, w});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < w; ++c) out(r, c) = x(r, begin + c);
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, [ia, begin, m, w](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += g(r, c);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  Tape& tape = tape_of(a);
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(total), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    const double s = g[0];
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += s;
  });
}

Var mean(const Var& a) {
  Tape& tape = tape_of(a);
  const double count = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(total / count), {a}, [ia, count](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    const double s = g[0] / count;
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += s;
  });
}

Var row_sum(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "row_sum");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x(r, c);
    out[r] = s;
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, [ia, m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) ga(r, c) += g[r];
    }
  });
}

Var row_norm(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  require_matrix(x, "row_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x(r, c) * x(r, c);
    out[r] = std::sqrt(s);
  }
  const std::size_t ia = a.id();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, m, n](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& norms = t.value(io);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r) {
      if (norms[r] == 0.0) continue;
      const double s = g[r] / norms[r];
      for (std::size_t c = 0; c < n; ++c) ga(r, c) += s * xv(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and batched products

Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  Tape& tape = tape_of(table);
  const Tensor& x = table.value();
  require_matrix(x, "gather_rows");
  const std::size_t rows = x.shape()[0], n = x.shape()[1];
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out({indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw OutOfRangeError("gather_rows: index " + std::to_string(indices[r]) +
                            " out of range for " + std::to_string(rows) + " rows");
    }
    std::copy_n(&x.data()[indices[r] * n], n, &out.data()[r * n]);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t ia = table.id();
  return tape.record(std::move(out), {table}, [ia, idx = std::move(idx), n](Tape& t,
                                                                            const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < n; ++c) ga(idx[r], c) += g(r, c);
    }
  });
}

Var row_outer(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0]) {
    throw DimensionError("row_outer: incompatible shapes " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()));
  }
  const std::size_t m = av.shape()[0], p = av.shape()[1], q = bv.shape()[1];
  Tensor out({m, p * q});
  for (std::size_t r = 0; r < m; ++r) {
    double* row = &out.data()[r * p * q];
    for (std::size_t i = 0; i < p; ++i) {
      const double ai = av(r, i);
      for (std::size_t j = 0; j < q; ++j) row[i * q + j] = ai * bv(r, j);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, m, p, q](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    Tensor* ga = need_a ? &t.grad(ia) : nullptr;
    Tensor* gb = need_b ? &t.grad(ib) : nullptr;
    for (std::size_t r = 0; r < m; ++r) {
      const double* grow = &g.data()[r * p * q];
      for (std::size_t i = 0; i < p; ++i) {
        double acc = 0.0;
        const double ai = av(r, i);
        for (std::size_t j = 0; j < q; ++j) {
          acc += grow[i * q + j] * bv(r, j);
          if (gb) (*gb)(r, j) += grow[i * q + j] * ai;
        }
        if (ga) (*ga)(r, i) += acc;
      }
    }
  });
}

Var block_matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] ||
      av.shape()[0] % av.shape()[1] != 0) {
    throw DimensionError("block_matmul: incompatible shapes " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()));
  }
  const std::size_t n = av.shape()[1], c = bv.shape()[1];
  const std::size_t blocks = av.shape()[0] / n;
  Tensor out({av.shape()[0], c});
  for (std::size_t k = 0; k < blocks; ++k) {
    ConstMatMap ab(&av.data()[k * n * n], n, n);
    ConstMatMap bb(&bv.data()[k * n * c], n, c);
    MatMap ob(&out.data()[k * n * c], n, c);
    ob.noalias() = ab * bb;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib, n, c, blocks](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    Tensor* ga = need_a ? &t.grad(ia) : nullptr;
    Tensor* gb = need_b ? &t.grad(ib) : nullptr;
    for (std::size_t k = 0; k < blocks; ++k) {
      ConstMatMap gk(&g.data()[k * n * c], n, c);
      if (ga) {
        MatMap(&ga->data()[k * n * n], n, n).noalias() +=
            gk * ConstMatMap(&bv.data()[k * n * c], n, c).transpose();
      }
      if (gb) {
        MatMap(&gb->data()[k * n * c], n, c).noalias() +=
            ConstMatMap(&av.data()[k * n * n], n, n).transpose() * gk;
      }
    }
  });
}

Var block_gram(const Var& x, std::size_t block_rows) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_matrix(xv, "block_gram");
  if (block_rows == 0 || xv.shape()[0] % block_rows != 0) {
    throw DimensionError("block_gram: " + std::to_string(xv.shape()[0]) +
                         " rows do not split into blocks of " + std::to_string(block_rows));
  }
  const std::size_t n = block_rows, c = xv.shape()[1];
  const std::size_t blocks = xv.shape()[0] / n;
  Tensor out({xv.shape()[0], n});
  for (std::size_t k = 0; k < blocks; ++k) {
    ConstMatMap xb(&xv.data()[k * n * c], n, c);
    MatMap(&out.data()[k * n * n], n, n).noalias() = xb * xb.transpose();
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [ix, n, c, blocks](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t k = 0; k < blocks; ++k) {
      ConstMatMap gk(&g.data()[k * n * n], n, n);
      ConstMatMap xb(&xv.data()[k * n * c], n, c);
      MatMap(&gx.data()[k * n * c], n, c).noalias() += (gk + gk.transpose()) * xb;
    }
  });
}

// ---------------------------------------------------------------------------
// Operators

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return hadamard(a, b); }
Var operator*(double factor, const Var& a) { return scale(a, factor); }
Var operator+(double offset, const Var& a) { return add_scalar(a, offset); }
Var operator-(double offset, const Var& a) { return add_scalar(scale(a, -1.0), offset); }

}  // namespace tgcrn::numerics
