#pragma once

#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "random.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace dsarf {

enum class Activation { Tanh, Relu };

struct ModelConfig {
  int k = 2;                  // factor count
  int s = 2;                  // discrete state count
  int d = 0;                  // spatial dimension (set from data)
  std::vector<int> lags = {1};
  int z_dim = 2;              // spatial embedding dimension
  int hidden = 16;            // MLP hidden width
  double sigma0 = 0.1;        // observation noise std
  Activation act = Activation::Tanh;

  int max_lag() const {
    int m = 0;
    for (int l : lags) m = std::max(m, l);
    return m;
  }

  void validate() const {
    if (k < 1 || s < 1) throw config_error("model: K and S must be >= 1");
    if (d < 1) throw config_error("model: D must be >= 1");
    if (lags.empty()) throw config_error("model: lag set must be nonempty");
    int prev = 0;
    for (int l : lags) {
      if (l <= prev) throw config_error("model: lags must be distinct, positive, ascending");
      prev = l;
    }
    if (z_dim < 1 || hidden < 1) throw config_error("model: z_dim and hidden must be >= 1");
    if (sigma0 <= 0.0) throw config_error("model: sigma0 must be > 0");
  }
};

/// Diagonal Gaussian as (mean, log variance).
struct GaussianDiag {
  std::vector<double> mean;
  std::vector<double> logvar;

  GaussianDiag() = default;
  GaussianDiag(std::vector<double> m, std::vector<double> lv)
      : mean(std::move(m)), logvar(std::move(lv)) {
    if (mean.size() != logvar.size()) throw shape_error("GaussianDiag: length mismatch");
  }
  std::size_t size() const { return mean.size(); }
};

/// Categorical belief over the S discrete states.
struct StateBelief {
  std::vector<double> p;

  StateBelief() = default;
  explicit StateBelief(std::vector<double> probs) : p(std::move(probs)) {}
  static StateBelief uniform(int s) {
    return StateBelief(std::vector<double>(s, 1.0 / s));
  }
  std::size_t size() const { return p.size(); }

  void validate(double tol = 1e-9) const {
    double sum = 0.0;
    for (double x : p) {
      if (x < -tol) throw numeric_error("StateBelief: negative probability");
      sum += x;
    }
    if (std::abs(sum - 1.0) > tol) throw numeric_error("StateBelief: does not sum to 1");
  }
};

namespace detail {
// PyTorch-style fan-in init for a linear layer tensor.
inline Tensor linear_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                          std::uint64_t seed) {
  Tensor t({rows, cols});
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}
}  // namespace detail

/// One switching regime: linear VAR coefficients per lag, the multi-head MLP
/// producing the nonlinear mean and the log-variance, and the gating MLP that
/// blends the two mean paths.
struct StateParams {
  std::vector<Tensor> var_a;  // per lag, K x K
  Tensor var_b;               // 1 x K
  std::vector<Tensor> head_w; // per lag, K x H
  std::vector<Tensor> head_b; // per lag, 1 x H
  Tensor mean_w, mean_b;      // H x K, 1 x K
  Tensor lv_w, lv_b;          // H x K, 1 x K
  Tensor gate_w1, gate_b1;    // (K*|lags|) x H, 1 x H
  Tensor gate_w2, gate_b2;    // H x K, 1 x K
};

struct DecoderParams {
  Tensor w1, b1;        // Z x H, 1 x H
  Tensor mean_w, mean_b;  // H x (K*D), 1 x (K*D)
  Tensor lv_w, lv_b;    // H x (K*D), 1 x (K*D)
};

/// All generative parameters (theta).
struct GenerativeParams {
  ModelConfig cfg;
  Tensor trans_logits;  // S x S
  Tensor init_logits;   // 1 x S
  std::vector<StateParams> states;
  DecoderParams decoder;

  static GenerativeParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GenerativeParams th;
    th.cfg = cfg;
    const auto k = static_cast<std::size_t>(cfg.k);
    const auto s = static_cast<std::size_t>(cfg.s);
    const auto h = static_cast<std::size_t>(cfg.hidden);
    const auto z = static_cast<std::size_t>(cfg.z_dim);
    const auto kd = k * static_cast<std::size_t>(cfg.d);
    const std::size_t nl = cfg.lags.size();

    auto mk = [&](const std::string& name, std::size_t r, std::size_t c, std::size_t fan) {
      return detail::linear_init(r, c, fan, name_seed(seed, name));
    };
    th.trans_logits = mk("trans", s, s, s);
    th.init_logits = mk("init", 1, s, s);
    th.states.resize(s);
    for (std::size_t si = 0; si < s; ++si) {
      StateParams& sp = th.states[si];
      const std::string p = "s" + std::to_string(si) + ".";
      for (std::size_t li = 0; li < nl; ++li) {
        // persistence-anchored start: the lag-1 map begins near the identity
        // and the remaining lags near zero, so early (and out-of-sample)
        // predictions stay close to the previous weight instead of jumping
        Tensor a({k, k});
        Rng ra(name_seed(seed, p + "A" + std::to_string(li)));
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            a.at(i, j) = (li == 0 && i == j ? 1.0 : 0.0) + ra.uniform(-0.1, 0.1);
        sp.var_a.push_back(std::move(a));
        sp.head_w.push_back(mk(p + "hw" + std::to_string(li), k, h, k));
        sp.head_b.push_back(mk(p + "hb" + std::to_string(li), 1, h, k));
      }
      sp.var_b = mk(p + "vb", 1, k, k);
      sp.mean_w = mk(p + "mw", h, k, h);
      sp.mean_b = mk(p + "mb", 1, k, h);
      sp.lv_w = mk(p + "lw", h, k, h);
      sp.lv_b = mk(p + "lb", 1, k, h);
      sp.gate_w1 = mk(p + "gw1", k * nl, h, k * nl);
      sp.gate_b1 = mk(p + "gb1", 1, h, k * nl);
      sp.gate_w2 = mk(p + "gw2", h, k, h);
      // gate opens toward the nonlinear path only once it earns its keep
      sp.gate_b2 = mk(p + "gb2", 1, k, h);
      Rng rg(name_seed(seed, p + "gb2.off"));
      for (auto& x : sp.gate_b2.v) x = -2.0 + rg.uniform(-0.3, 0.3);
    }
    th.decoder.w1 = mk("dec.w1", z, h, z);
    th.decoder.b1 = mk("dec.b1", 1, h, z);
    th.decoder.mean_w = mk("dec.mw", h, kd, h);
    th.decoder.mean_b = mk("dec.mb", 1, kd, h);
    th.decoder.lv_w = mk("dec.lw", h, kd, h);
    th.decoder.lv_b = mk("dec.lb", 1, kd, h);
    return th;
  }

  /// Stable-order traversal used by the trainer and the checkpoint writer.
  template <class F>
  void for_each_tensor(F&& fn) {
    fn("theta.trans_logits", trans_logits);
    fn("theta.init_logits", init_logits);
    for (std::size_t si = 0; si < states.size(); ++si) {
      StateParams& sp = states[si];
      const std::string p = "theta.s" + std::to_string(si) + ".";
      for (std::size_t li = 0; li < sp.var_a.size(); ++li)
        fn(p + "A" + std::to_string(li), sp.var_a[li]);
      fn(p + "var_b", sp.var_b);
      for (std::size_t li = 0; li < sp.head_w.size(); ++li) {
        fn(p + "head_w" + std::to_string(li), sp.head_w[li]);
        fn(p + "head_b" + std::to_string(li), sp.head_b[li]);
      }
      fn(p + "mean_w", sp.mean_w);
      fn(p + "mean_b", sp.mean_b);
      fn(p + "lv_w", sp.lv_w);
      fn(p + "lv_b", sp.lv_b);
      fn(p + "gate_w1", sp.gate_w1);
      fn(p + "gate_b1", sp.gate_b1);
      fn(p + "gate_w2", sp.gate_w2);
      fn(p + "gate_b2", sp.gate_b2);
    }
    fn("theta.dec.w1", decoder.w1);
    fn("theta.dec.b1", decoder.b1);
    fn("theta.dec.mean_w", decoder.mean_w);
    fn("theta.dec.mean_b", decoder.mean_b);
    fn("theta.dec.lv_w", decoder.lv_w);
    fn("theta.dec.lv_b", decoder.lv_b);
  }
};

// ---------------------------------------------------------------------------
// Tape builders. These are the single authoritative definition of every
// conditional density; the plain-value overloads below evaluate them through
// a throwaway tape.
// ---------------------------------------------------------------------------

struct ThetaNodes {
  NodeId trans = -1, init_logits = -1;
  struct StateNodes {
    std::vector<NodeId> var_a;
    NodeId var_b;
    std::vector<NodeId> head_w, head_b;
    NodeId mean_w, mean_b, lv_w, lv_b;
    NodeId gate_w1, gate_b1, gate_w2, gate_b2;
  };
  std::vector<StateNodes> states;
  NodeId dec_w1, dec_b1, dec_mean_w, dec_mean_b, dec_lv_w, dec_lv_b;
};

/// Creates a leaf per theta tensor. When `order` is given, (name, node) pairs
/// are recorded using the same names as GenerativeParams::for_each_tensor.
inline ThetaNodes stage_theta(Tape& tp, const GenerativeParams& th, bool trainable,
                              std::vector<std::pair<std::string, NodeId>>* order = nullptr) {
  auto mk = [&](const std::string& name, const Tensor& t) {
    NodeId id = tp.leaf(t, trainable);
    if (order) order->emplace_back(name, id);
    return id;
  };
  ThetaNodes tn;
  tn.trans = mk("theta.trans_logits", th.trans_logits);
  tn.init_logits = mk("theta.init_logits", th.init_logits);
  for (std::size_t si = 0; si < th.states.size(); ++si) {
    const StateParams& sp = th.states[si];
    const std::string p = "theta.s" + std::to_string(si) + ".";
    ThetaNodes::StateNodes s;
    for (std::size_t li = 0; li < sp.var_a.size(); ++li)
      s.var_a.push_back(mk(p + "A" + std::to_string(li), sp.var_a[li]));
    s.var_b = mk(p + "var_b", sp.var_b);
    for (std::size_t li = 0; li < sp.head_w.size(); ++li) {
      s.head_w.push_back(mk(p + "head_w" + std::to_string(li), sp.head_w[li]));
      s.head_b.push_back(mk(p + "head_b" + std::to_string(li), sp.head_b[li]));
    }
    s.mean_w = mk(p + "mean_w", sp.mean_w);
    s.mean_b = mk(p + "mean_b", sp.mean_b);
    s.lv_w = mk(p + "lv_w", sp.lv_w);
    s.lv_b = mk(p + "lv_b", sp.lv_b);
    s.gate_w1 = mk(p + "gate_w1", sp.gate_w1);
    s.gate_b1 = mk(p + "gate_b1", sp.gate_b1);
    s.gate_w2 = mk(p + "gate_w2", sp.gate_w2);
    s.gate_b2 = mk(p + "gate_b2", sp.gate_b2);
    tn.states.push_back(std::move(s));
  }
  tn.dec_w1 = mk("theta.dec.w1", th.decoder.w1);
  tn.dec_b1 = mk("theta.dec.b1", th.decoder.b1);
  tn.dec_mean_w = mk("theta.dec.mean_w", th.decoder.mean_w);
  tn.dec_mean_b = mk("theta.dec.mean_b", th.decoder.mean_b);
  tn.dec_lv_w = mk("theta.dec.lv_w", th.decoder.lv_w);
  tn.dec_lv_b = mk("theta.dec.lv_b", th.decoder.lv_b);
  return tn;
}

inline NodeId activation(Tape& tp, NodeId x, Activation a) {
  return a == Activation::Tanh ? tp.tanh(x) : tp.relu(x);
}

inline NodeId affine(Tape& tp, NodeId x, NodeId w, NodeId b) {
  return tp.add_rowvec(tp.matmul(x, w), b);
}

struct GaussNodes {
  NodeId mean = -1;
  NodeId logvar = -1;
};

/// Switching temporal prior p(w_t | w_{t-lags}, s). `lag_inputs[i]` holds the
/// weights at lag lags[i], one row per evaluation point. The mean blends the
/// linear VAR path and the multi-head MLP path through the gating vector.
inline GaussNodes build_temporal_prior(Tape& tp, const ThetaNodes& tn, const ModelConfig& cfg,
                                       std::span<const NodeId> lag_inputs, int s) {
  const auto& st = tn.states[static_cast<std::size_t>(s)];
  const std::size_t nl = cfg.lags.size();
  if (lag_inputs.size() != nl) throw shape_error("temporal_prior: lag count mismatch");

  // multi-head trunk: h = sum_l act(FC_{s,l}(w_{t-l}))
  NodeId h = -1;
  for (std::size_t li = 0; li < nl; ++li) {
    NodeId a = activation(tp, affine(tp, lag_inputs[li], st.head_w[li], st.head_b[li]), cfg.act);
    h = (h < 0) ? a : tp.add(h, a);
  }
  NodeId mlp_mean = affine(tp, h, st.mean_w, st.mean_b);
  NodeId logvar = affine(tp, h, st.lv_w, st.lv_b);

  // linear VAR path with bias
  NodeId lin = -1;
  for (std::size_t li = 0; li < nl; ++li) {
    NodeId a = tp.matmul(lag_inputs[li], st.var_a[li]);
    lin = (lin < 0) ? a : tp.add(lin, a);
  }
  lin = tp.add_rowvec(lin, st.var_b);

  // gate from the concatenated lag vectors
  NodeId gin = nl == 1 ? lag_inputs[0] : tp.concat_cols(lag_inputs);
  NodeId gh = activation(tp, affine(tp, gin, st.gate_w1, st.gate_b1), cfg.act);
  NodeId gate = tp.sigmoid(affine(tp, gh, st.gate_w2, st.gate_b2));

  // mean = (1 - g) .* VAR + g .* MLP
  NodeId one_minus_g = tp.add_scalar(tp.mul_scalar(gate, -1.0), 1.0);
  NodeId mean = tp.add(tp.mul(one_minus_g, lin), tp.mul(gate, mlp_mean));
  return {mean, logvar};
}

/// Transition prior softmax(Phi * pi) applied rowwise to a batch of beliefs.
inline NodeId build_transition(Tape& tp, const ThetaNodes& tn, NodeId pi_prev) {
  return tp.softmax_rows(tp.matmul_bt(pi_prev, tn.trans));
}

/// Spatial decoder p(F | z): z (1 x Z) -> diagonal Gaussian over K x D entries.
inline GaussNodes build_spatial_decoder(Tape& tp, const ThetaNodes& tn, const ModelConfig& cfg,
                                        NodeId z) {
  NodeId h = activation(tp, affine(tp, z, tn.dec_w1, tn.dec_b1), cfg.act);
  NodeId mean = tp.reshape(affine(tp, h, tn.dec_mean_w, tn.dec_mean_b), cfg.k, cfg.d);
  NodeId logvar = tp.reshape(affine(tp, h, tn.dec_lv_w, tn.dec_lv_b), cfg.k, cfg.d);
  return {mean, logvar};
}

/// Masked Gaussian log likelihood sum_{observed} log N(x | (w^T F), sigma0^2).
/// `w` is (R x K), `f` is (K x D), `x`/`mask` are (R x D) constants,
/// `n_obs` the number of observed entries in the mask.
inline NodeId build_observation_loglik(Tape& tp, NodeId w, NodeId f, NodeId x, NodeId mask,
                                       double sigma0, double n_obs) {
  NodeId pred = tp.matmul(w, f);
  NodeId diff = tp.mul(tp.sub(pred, x), mask);
  NodeId sq = tp.sum(tp.mul(diff, diff));
  const double inv = -0.5 / (sigma0 * sigma0);
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * sigma0 * sigma0);
  return tp.add_scalar(tp.mul_scalar(sq, inv), n_obs * log_norm);
}

// ---------------------------------------------------------------------------
// Plain-value interfaces
// ---------------------------------------------------------------------------

inline StateBelief transition_prior(const StateBelief& pi_prev, const GenerativeParams& th) {
  const int s = th.cfg.s;
  if (static_cast<int>(pi_prev.size()) != s) throw shape_error("transition_prior: belief size");
  std::vector<double> logits(s, 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) logits[i] += th.trans_logits.at(i, j) * pi_prev.p[j];
  return StateBelief(softmax(logits));
}

/// Evaluates the temporal prior at one point (row) through the tape builder.
inline GaussianDiag temporal_prior(const std::vector<std::vector<double>>& w_lagged, int s,
                                   const GenerativeParams& th) {
  const ModelConfig& cfg = th.cfg;
  if (w_lagged.size() != cfg.lags.size()) throw shape_error("temporal_prior: lag count mismatch");
  Tape tp;
  ThetaNodes tn = stage_theta(tp, th, false);
  std::vector<NodeId> lag_nodes;
  for (const auto& w : w_lagged) {
    if (static_cast<int>(w.size()) != cfg.k) throw shape_error("temporal_prior: lag vector length");
    lag_nodes.push_back(tp.leaf(Tensor::row(w)));
  }
  GaussNodes g = build_temporal_prior(tp, tn, cfg, lag_nodes, s);
  return GaussianDiag(tp.value(g.mean), tp.value(g.logvar));
}

inline GaussianDiag spatial_decoder(const std::vector<double>& z, const GenerativeParams& th) {
  if (static_cast<int>(z.size()) != th.cfg.z_dim) throw shape_error("spatial_decoder: z length");
  Tape tp;
  ThetaNodes tn = stage_theta(tp, th, false);
  GaussNodes g = build_spatial_decoder(tp, tn, th.cfg, tp.leaf(Tensor::row(z)));
  return GaussianDiag(tp.value(g.mean), tp.value(g.logvar));
}

/// Masked log likelihood of one sequence: X (T x D), mask (T x D, 1 = observed),
/// W (T x K), F (K x D).
inline double observation_loglik(const Tensor& x, const Tensor& mask, const Tensor& w,
                                 const Tensor& f, double sigma0) {
  if (sigma0 <= 0.0) throw config_error("observation_loglik: sigma0 must be > 0");
  const std::size_t t_len = x.rows(), d = x.cols(), k = w.cols();
  if (mask.rows() != t_len || mask.cols() != d || w.rows() != t_len || f.rows() != k ||
      f.cols() != d)
    throw shape_error("observation_loglik: shape mismatch");
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * sigma0 * sigma0);
  const double inv = 0.5 / (sigma0 * sigma0);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      if (mask.at(t, j) == 0.0) continue;
      double pred = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) pred += w.at(t, kk) * f.at(kk, j);
      const double r = x.at(t, j) - pred;
      total += log_norm - inv * r * r;
    }
  }
  return total;
}

}  // namespace dsarf
