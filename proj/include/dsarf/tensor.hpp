#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsarf {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class shape_error : public error {
 public:
  using error::error;
};
class numeric_error : public error {
 public:
  using error::error;
};
class io_error : public error {
 public:
  using error::error;
};
class config_error : public error {
 public:
  using error::error;
};

// Probabilities and variances are clamped here before any log.
inline constexpr double kProbFloor = 1e-8;

/// Dense row-major tensor of doubles. Rank 1 and 2 are what the tape
/// operates on; rank 3 is used for (N, T, D) data blocks.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    v.assign(numel_of(shape), 0.0);
  }
  Tensor(std::vector<std::size_t> s, std::vector<double> vals)
      : shape(std::move(s)), v(std::move(vals)) {
    if (v.size() != numel_of(shape)) throw shape_error("tensor: value count does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double x) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static Tensor matrix(std::size_t r, std::size_t c) { return Tensor({r, c}); }
  static Tensor row(std::vector<double> vals) {
    std::size_t n = vals.size();
    return Tensor({1, n}, std::move(vals));
  }
  static Tensor scalar(double x) { return Tensor({1, 1}, {x}); }

  std::size_t numel() const { return v.size(); }
  std::size_t ndim() const { return shape.size(); }

  // 2-D views: rank-1 tensors are row vectors.
  std::size_t rows() const {
    if (shape.empty()) return 0;
    return shape.size() == 1 ? 1 : shape[0];
  }
  std::size_t cols() const {
    if (shape.empty()) return 0;
    return shape.size() == 1 ? shape[0] : shape[1];
  }

  double& at(std::size_t i, std::size_t j) { return v[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols() + j]; }

  // rank-3 access for (N, T, D) blocks
  double& at3(std::size_t a, std::size_t b, std::size_t c) {
    return v[(a * shape[1] + b) * shape[2] + c];
  }
  double at3(std::size_t a, std::size_t b, std::size_t c) const {
    return v[(a * shape[1] + b) * shape[2] + c];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
  void require_finite(const char* what) const {
    if (!all_finite()) throw numeric_error(std::string("non-finite value in ") + what);
  }
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + ")";
}

/// Numerically stable softmax (max subtraction). Output sums to 1.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  double m = logits[0];
  for (double x : logits) {
    if (!std::isfinite(x)) throw numeric_error("softmax: non-finite logit");
    m = std::max(m, x);
  }
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  return softmax(std::span<const double>(logits));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace dsarf
