#pragma once

// Straight-line reference computations on plain nested vectors. Nothing here
// touches the autodiff tape, so they serve as independent oracles.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;
// pool[e][k][o]
using Pool = std::vector<Mat>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, Vec(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat softmax_rows(const Mat& a) {
  Mat out = a;
  for (auto& row : out) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  return out;
}

/// (1 + α·σ(tanh(X Xᵀ))) ⊙ (E Eᵀ + ⟨τ_t, τ_{t-1}⟩)
inline Mat raw_adjacency(const Mat& node_emb, const Vec& time_now, const Vec& time_prev,
                         const Mat& x, double alpha, bool with_discriminant) {
  const std::size_t n = node_emb.size();
  double eta = 0;
  for (std::size_t k = 0; k < time_now.size(); ++k) eta += time_now[k] * time_prev[k];
  Mat out = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double aff = 0;
      for (std::size_t k = 0; k < node_emb[i].size(); ++k) aff += node_emb[i][k] * node_emb[j][k];
      double mult = 1.0;
      if (with_discriminant) {
        double g = 0;
        for (std::size_t k = 0; k < x[i].size(); ++k) g += x[i][k] * x[j][k];
        mult = 1.0 + alpha * sigmoid(std::tanh(g));
      }
      out[i][j] = mult * (aff + eta);
    }
  return out;
}

/// Per-node weights W_i = Σ_e fused[i][e]·pool[e]; output_i = (prop·feat)_i W_i + fused_i·bias.
inline Mat graph_conv(const Mat& prop, const Mat& feat, const Mat& fused, const Pool& pool,
                      const Mat& bias) {
  const std::size_t n = prop.size();
  const std::size_t c = feat[0].size();
  const std::size_t o = bias[0].size();
  const Mat agg = matmul(prop, feat);
  Mat out = zeros(n, o);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t col = 0; col < o; ++col) {
      double acc = 0;
      for (std::size_t e = 0; e < fused[i].size(); ++e) {
        acc += fused[i][e] * bias[e][col];
        for (std::size_t k = 0; k < c; ++k) acc += agg[i][k] * fused[i][e] * pool[e][k][col];
      }
      out[i][col] = acc;
    }
  }
  return out;
}

struct Cell {
  Pool wz, wr, wh;
  Mat bz, br, bh;
};

struct StepTrace {
  Mat z, r, hhat, h;
};

inline StepTrace gru_step(const Mat& x, const Mat& h, const Mat& prop, const Mat& fused,
                          const Cell& cell) {
  const std::size_t n = x.size();
  Mat xh = zeros(n, x[0].size() + h[0].size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < x[0].size(); ++k) xh[i][k] = x[i][k];
    for (std::size_t k = 0; k < h[0].size(); ++k) xh[i][x[0].size() + k] = h[i][k];
  }
  StepTrace t;
  t.z = graph_conv(prop, xh, fused, cell.wz, cell.bz);
  t.r = graph_conv(prop, xh, fused, cell.wr, cell.br);
  for (auto& row : t.z)
    for (double& v : row) v = sigmoid(v);
  for (auto& row : t.r)
    for (double& v : row) v = sigmoid(v);
  Mat xrh = xh;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < h[0].size(); ++k) xrh[i][x[0].size() + k] = t.r[i][k] * h[i][k];
  t.hhat = graph_conv(prop, xrh, fused, cell.wh, cell.bh);
  for (auto& row : t.hhat)
    for (double& v : row) v = std::tanh(v);
  t.h = h;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < h[0].size(); ++k)
      t.h[i][k] = (1 - t.z[i][k]) * h[i][k] + t.z[i][k] * t.hhat[i][k];
  return t;
}

}  // namespace oracle
