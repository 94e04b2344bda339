#pragma once

#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace dsarf {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moment accumulators plus the shared step count.
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;

  void init(const std::vector<Tensor*>& params) {
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.push_back(Tensor::zeros(p->shape));
      v.push_back(Tensor::zeros(p->shape));
    }
    step = 0;
  }
};

/// One Adam update with bias correction; grads[i] must match params[i] in shape.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      AdamState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw shape_error("adam_step: parameter/gradient count mismatch");
  st.step += 1;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (!p.same_shape(g)) throw shape_error("adam_step: gradient shape mismatch");
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t j = 0; j < p.v.size(); ++j) {
      const double gj = g.v[j];
      m.v[j] = b1 * m.v[j] + (1.0 - b1) * gj;
      v.v[j] = b2 * v.v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m.v[j] / c1;
      const double vhat = v.v[j] / c2;
      p.v[j] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
  }
}

}  // namespace dsarf
