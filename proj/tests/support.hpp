#pragma once

// Shared helpers for the test binaries: finite differences, rank statistics,
// scratch directories and seeded tensors.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "tgcrn/numerics/autodiff.hpp"

namespace testing {

using tgcrn::numerics::GradientMap;
using tgcrn::numerics::Parameter;
using tgcrn::numerics::Shape;
using tgcrn::numerics::Tape;
using tgcrn::numerics::Tensor;
using tgcrn::numerics::Var;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

struct GradCheck {
  std::string name;
  double rel_error = 0;  // ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)
  double max_abs = 0;
};

/// Central differences of `loss` (which builds a scalar on a fresh tape from
/// the given parameters) against the tape's analytic gradient, per parameter.
inline std::vector<GradCheck> gradient_check(
    const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss,
    double step = 1e-5, double floor = 1e-10) {
  Tape tape;
  const GradientMap grads = tape.backward(loss(tape));
  std::vector<GradCheck> out;
  for (Parameter* p : params) {
    const Tensor* analytic = grads.find(*p);
    GradCheck gc{p->name, 0, 0};
    double diff_sq = 0, a_sq = 0, n_sq = 0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      double plus = 0;
      {
        Tape t;
        plus = loss(t).value().item();
      }
      p->value[i] = saved - step;
      double minus = 0;
      {
        Tape t;
        minus = loss(t).value().item();
      }
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2 * step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
      gc.max_abs = std::max(gc.max_abs, std::abs(a - numeric));
    }
    gc.rel_error = std::sqrt(diff_sq) / std::max({std::sqrt(a_sq), std::sqrt(n_sq), floor});
    out.push_back(gc);
  }
  return out;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0 || vb == 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  return pearson(ra, rb);
}

/// Fresh empty directory under the system temp dir, unique per call.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("tgcrn_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace testing
