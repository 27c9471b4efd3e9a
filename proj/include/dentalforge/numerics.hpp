#pragma once

// Dense math kernel: row-major 2-D tensors, named parameter collections,
// the two primitive NN ops (affine, log_softmax), Adam, and a finite-
// difference gradient checker. No BLAS; shapes here are tiny by design.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dentalforge/rng.hpp"

namespace dentalforge {

struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major, rows*cols entries

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Ordered collection of named tensors. Used for parameters, gradients, and
// optimizer moments so they all share one shape vocabulary; iteration order is
// insertion order, which keeps serialization and coordinate sampling stable.
class TensorMap {
 public:
  Tensor2& add(std::string name, std::size_t rows, std::size_t cols) {
    if (find(name) != nullptr)
      throw std::invalid_argument("TensorMap: duplicate tensor name '" + name + "'");
    entries_.emplace_back(std::move(name), Tensor2(rows, cols));
    return entries_.back().second;
  }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  Tensor2& at(std::string_view name) {
    if (Tensor2* t = find(name)) return *t;
    throw std::out_of_range("TensorMap: no tensor named '" + std::string(name) + "'");
  }
  const Tensor2& at(std::string_view name) const {
    return const_cast<TensorMap*>(this)->at(name);
  }

  std::size_t tensor_count() const { return entries_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void set_zero() {
    for (auto& [_, t] : entries_) std::fill(t.data.begin(), t.data.end(), 0.0);
  }

  static TensorMap zeros_like(const TensorMap& other) {
    TensorMap out;
    for (const auto& [name, t] : other.entries_) out.add(name, t.rows, t.cols);
    return out;
  }

  void require_same_shape(const TensorMap& other, const char* what) const {
    if (entries_.size() != other.entries_.size())
      throw std::invalid_argument(std::string(what) + ": tensor count mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != other.entries_[i].first ||
          !entries_[i].second.same_shape(other.entries_[i].second))
        throw std::invalid_argument(std::string(what) + ": shape mismatch at tensor '" +
                                    entries_[i].first + "'");
    }
  }

  // this += scale * other
  void add_scaled(const TensorMap& other, double scale) {
    require_same_shape(other, "TensorMap::add_scaled");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& dst = entries_[i].second.data;
      const auto& src = other.entries_[i].second.data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
    }
  }

  void scale(double s) {
    for (auto& [_, t] : entries_)
      for (double& v : t.data) v *= s;
  }

  bool all_finite() const {
    for (const auto& [_, t] : entries_)
      if (!t.all_finite()) return false;
    return true;
  }

 private:
  Tensor2* find(std::string_view name) {
    for (auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor2* find(std::string_view name) const {
    return const_cast<TensorMap*>(this)->find(name);
  }

  std::vector<std::pair<std::string, Tensor2>> entries_;
};

// Gradients are stored under the same names/shapes as the parameters they
// differentiate, so a plain TensorMap is the right container.
using GradientBundle = TensorMap;

// y = W x + b with W (m x n), x (n), b (m)
inline std::vector<double> affine(const Tensor2& W, std::span<const double> x,
                                  std::span<const double> b) {
  if (W.cols != x.size() || W.rows != b.size())
    throw std::invalid_argument("affine: shape mismatch");
  std::vector<double> y(W.rows);
  for (std::size_t r = 0; r < W.rows; ++r) {
    double acc = b[r];
    const double* wr = W.data.data() + r * W.cols;
    for (std::size_t c = 0; c < W.cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// numerically-stable log softmax (max shift); defined for any finite input
inline std::vector<double> log_softmax(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("log_softmax: empty input");
  double zmax = z[0];
  for (double v : z) {
    if (!std::isfinite(v)) throw std::invalid_argument("log_softmax: non-finite input");
    if (v > zmax) zmax = v;
  }
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - zmax);
  const double lse = zmax + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

struct AdamMoments {
  TensorMap m;
  TensorMap v;

  static AdamMoments like(const TensorMap& params) {
    return AdamMoments{TensorMap::zeros_like(params), TensorMap::zeros_like(params)};
  }
};

// One Adam update. step is 1-based (used for bias correction).
inline void adam_step(TensorMap& params, const GradientBundle& grads, AdamMoments& mom,
                      long step, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1");
  params.require_same_shape(grads, "adam_step(grads)");
  params.require_same_shape(mom.m, "adam_step(moments)");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  auto pi = params.begin();
  auto gi = grads.begin();
  auto mi = mom.m.begin();
  auto vi = mom.v.begin();
  for (; pi != params.end(); ++pi, ++gi, ++mi, ++vi) {
    auto& p = pi->second.data;
    const auto& g = gi->second.data;
    auto& m = mi->second.data;
    auto& v = vi->second.data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      if (!std::isfinite(p[k]))
        throw std::runtime_error("adam_step: parameter '" + pi->first + "' became non-finite");
    }
  }
}

// Central-difference gradient check.
//
// loss must be callable as double() and read the current contents of params;
// analytic holds d loss / d params. Perturbs each checked coordinate in place
// (restoring it afterwards) and returns the worst relative error
//   |fd - an| / max(1e-8, |fd| + |an|).
// When the parameter space has more than max_coords coordinates, a seeded
// sample of exactly max_coords distinct coordinates is checked.
template <typename LossFn>
inline double finite_difference_check(LossFn&& loss, TensorMap& params,
                                      const GradientBundle& analytic, double eps = 1e-5,
                                      std::uint64_t seed = 0, std::size_t max_coords = 200) {
  params.require_same_shape(analytic, "finite_difference_check");
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");

  const std::size_t total = params.total_elements();
  std::vector<std::size_t> coords(total);
  for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  std::size_t n_check = total;
  if (total > max_coords) {
    Rng rng(derive_seed(seed, "fdcheck"));
    // partial Fisher-Yates: the first max_coords entries become the sample
    for (std::size_t i = 0; i < max_coords; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
      std::swap(coords[i], coords[j]);
    }
    n_check = max_coords;
  }

  // flatten views in insertion order
  std::vector<double*> pslot;
  std::vector<const double*> aslot;
  pslot.reserve(total);
  aslot.reserve(total);
  for (auto& [_, t] : params)
    for (double& v : t.data) pslot.push_back(&v);
  for (const auto& [_, t] : analytic)
    for (const double& v : t.data) aslot.push_back(&v);

  double worst = 0.0;
  for (std::size_t i = 0; i < n_check; ++i) {
    double* p = pslot[coords[i]];
    const double saved = *p;
    *p = saved + eps;
    const double lp = loss();
    *p = saved - eps;
    const double lm = loss();
    *p = saved;
    const double fd = (lp - lm) / (2.0 * eps);
    const double an = *aslot[coords[i]];
    const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
    if (rel > worst) worst = rel;
  }
  return worst;
}

}  // namespace dentalforge
