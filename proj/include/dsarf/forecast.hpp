#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <vector>

#include "inference.hpp"
#include "model.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace dsarf {

struct ForecastOptions {
  int n_rollouts = 50;
  bool assimilate = true;       // short-term rolling absorbs each true observation
  bool suppress_noise = false;  // rollouts propagate means instead of sampling
  bool gradient_refine = false; // re-infer the observed prefix by gradient ascent
  int refine_steps = 100;
  // Variance inflation floor (std, model units) applied to the temporal prior
  // inside the conjugate update. Trained prior variances reflect in-sample
  // one-step residuals and understate model error on fresh trajectories; an
  // uninflated filter then rejects the observations and drifts.
  double assim_std_floor = 0.05;
  std::uint64_t seed = 0;
};

struct ForecastResult {
  Tensor pred;    // {H, D} point predictions in original units
  Tensor stddev;  // {H, D} predictive standard deviations (>= 0)
  std::vector<StateBelief> states;
  double nrmse_pct = std::numeric_limits<double>::quiet_NaN();
  int warmup = 0;  // leading rows consumed to build lag history (not predictions)
};

struct LabelAlignment {
  std::vector<int> perm;  // perm[i] = reference label assigned to inferred label i+1
  double accuracy_pct = 0.0;
};

/// 100 * ||(pred - truth) .* mask||_F / ||truth .* mask||_F over observed cells.
inline double nrmse(const Tensor& pred, const Tensor& truth, const Tensor* mask = nullptr) {
  if (!pred.same_shape(truth)) throw shape_error("nrmse: shape mismatch");
  if (mask && !mask->same_shape(truth)) throw shape_error("nrmse: mask shape mismatch");
  double num = 0.0, den = 0.0;
  long count = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    if (mask && mask->v[i] == 0.0) continue;
    const double r = pred.v[i] - truth.v[i];
    num += r * r;
    den += truth.v[i] * truth.v[i];
    ++count;
  }
  if (count == 0) throw numeric_error("nrmse: no observed entries");
  if (den == 0.0) throw numeric_error("nrmse: zero-norm truth");
  return 100.0 * std::sqrt(num / den);
}

/// Best label-permutation match fraction (brute force over S! permutations).
inline LabelAlignment state_accuracy(std::span<const int> inferred, std::span<const int> reference,
                                     int s) {
  if (inferred.size() != reference.size()) throw shape_error("state_accuracy: length mismatch");
  if (s < 1 || s > 8) throw config_error("state_accuracy: S must be in [1, 8]");
  for (int l : inferred)
    if (l < 1 || l > s) throw config_error("state_accuracy: inferred label out of range");
  for (int l : reference)
    if (l < 1 || l > s) throw config_error("state_accuracy: reference label out of range");
  std::vector<int> perm(s);
  for (int i = 0; i < s; ++i) perm[i] = i + 1;
  LabelAlignment best;
  best.perm = perm;
  do {
    long hits = 0;
    for (std::size_t i = 0; i < inferred.size(); ++i)
      hits += perm[inferred[i] - 1] == reference[i] ? 1 : 0;
    const double acc = 100.0 * hits / inferred.size();
    if (acc > best.accuracy_pct) {
      best.accuracy_pct = acc;
      best.perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

namespace detail {
// Dense K x K solve / inverse by Gauss-Jordan with partial pivoting.
inline std::vector<double> invert_dense(std::vector<double> a, int k) {
  std::vector<double> inv(static_cast<std::size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i) inv[static_cast<std::size_t>(i) * k + i] = 1.0;
  for (int col = 0; col < k; ++col) {
    int piv = col;
    for (int r = col + 1; r < k; ++r)
      if (std::abs(a[static_cast<std::size_t>(r) * k + col]) >
          std::abs(a[static_cast<std::size_t>(piv) * k + col]))
        piv = r;
    if (std::abs(a[static_cast<std::size_t>(piv) * k + col]) < 1e-300)
      throw numeric_error("conjugate update: singular precision matrix");
    if (piv != col)
      for (int j = 0; j < k; ++j) {
        std::swap(a[static_cast<std::size_t>(piv) * k + j],
                  a[static_cast<std::size_t>(col) * k + j]);
        std::swap(inv[static_cast<std::size_t>(piv) * k + j],
                  inv[static_cast<std::size_t>(col) * k + j]);
      }
    const double d = a[static_cast<std::size_t>(col) * k + col];
    for (int j = 0; j < k; ++j) {
      a[static_cast<std::size_t>(col) * k + j] /= d;
      inv[static_cast<std::size_t>(col) * k + j] /= d;
    }
    for (int r = 0; r < k; ++r) {
      if (r == col) continue;
      const double f = a[static_cast<std::size_t>(r) * k + col];
      if (f == 0.0) continue;
      for (int j = 0; j < k; ++j) {
        a[static_cast<std::size_t>(r) * k + j] -= f * a[static_cast<std::size_t>(col) * k + j];
        inv[static_cast<std::size_t>(r) * k + j] -= f * inv[static_cast<std::size_t>(col) * k + j];
      }
    }
  }
  return inv;
}
}  // namespace detail

/// Exact linear-Gaussian posterior of w given one observation row under
/// x ~ N(w^T F, sigma0^2 I) restricted to observed columns. The returned
/// diagonal holds the exact marginal variances of the joint posterior.
inline GaussianDiag conjugate_weight_update(const GaussianDiag& prior, const Tensor& f,
                                            std::span<const double> x_obs,
                                            std::span<const double> mask_row, double sigma0) {
  const int k = static_cast<int>(prior.size());
  const int d = static_cast<int>(f.cols());
  if (static_cast<int>(f.rows()) != k) throw shape_error("conjugate update: factor rows != K");
  if (static_cast<int>(x_obs.size()) != d || static_cast<int>(mask_row.size()) != d)
    throw shape_error("conjugate update: observation length != D");
  if (sigma0 <= 0.0) throw config_error("conjugate update: sigma0 must be > 0");

  bool any = false;
  for (double m : mask_row)
    if (m != 0.0) any = true;
  if (!any) return prior;

  const double inv_s2 = 1.0 / (sigma0 * sigma0);
  std::vector<double> lam(static_cast<std::size_t>(k) * k, 0.0);
  std::vector<double> rhs(k, 0.0);
  for (int i = 0; i < k; ++i) {
    const double p = std::exp(-prior.logvar[i]);
    lam[static_cast<std::size_t>(i) * k + i] = p;
    rhs[i] = p * prior.mean[i];
  }
  for (int dd = 0; dd < d; ++dd) {
    if (mask_row[dd] == 0.0) continue;
    for (int i = 0; i < k; ++i) {
      const double fi = f.at(i, dd);
      rhs[i] += inv_s2 * fi * x_obs[dd];
      for (int j = 0; j < k; ++j) lam[static_cast<std::size_t>(i) * k + j] += inv_s2 * fi * f.at(j, dd);
    }
  }
  const std::vector<double> cov = detail::invert_dense(lam, k);
  GaussianDiag post;
  post.mean.assign(k, 0.0);
  post.logvar.assign(k, 0.0);
  for (int i = 0; i < k; ++i) {
    double m = 0.0;
    for (int j = 0; j < k; ++j) m += cov[static_cast<std::size_t>(i) * k + j] * rhs[j];
    post.mean[i] = m;
    post.logvar[i] = std::log(std::max(cov[static_cast<std::size_t>(i) * k + i], 1e-300));
  }
  return post;
}

/// Lag history plus state belief carried through a forecast, in model space.
struct RollState {
  std::deque<std::vector<double>> w_hist;  // most recent last
  StateBelief pi;
};

/// Rolling state built from the first max-lag rows of a fresh sequence:
/// each row is assimilated from the standard-normal weight prior through the
/// conjugate update while the state belief is propagated from p(s_0).
inline RollState roll_state_from_prefix(const TrainedModel& m, const Tensor& y,
                                        const Tensor& mask);

/// Rolling state at the end of a training sequence: the last max-lag weight
/// posterior means and the final state belief of the training chain.
inline RollState roll_state_from_train(const TrainedModel& m, int seq) {
  RollState rs;
  const int p = m.phi.preamble;
  for (int t = m.phi.t - p + 1; t <= m.phi.t; ++t) rs.w_hist.push_back(m.phi.w_mean_at(seq, t));
  auto path = state_path_from_means(m.theta, m.phi, seq);
  rs.pi = path.empty() ? StateBelief::uniform(m.cfg.s) : path.back();
  return rs;
}

namespace detail {

inline std::vector<double> standardize_row(const TrainedModel& m, std::span<const double> x,
                                           std::span<const double> mask) {
  std::vector<double> out(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (mask[d] == 0.0) {
      out[d] = 0.0;
    } else if (m.mu.empty()) {
      out[d] = x[d];
    } else {
      out[d] = (x[d] - m.mu[d]) / m.sd[d];
    }
  }
  return out;
}

struct MixturePrediction {
  std::vector<double> w_mean;             // pi-weighted mean
  std::vector<double> x_mean;             // w_mean^T F
  std::vector<double> x_var;              // per-dimension predictive variance
  std::vector<GaussianDiag> state_prior;  // per-state temporal prior (inflated)
};

/// One-step predictive mixture over states given lag history. Prior variances
/// are inflated to at least std_floor.
inline MixturePrediction predict_step(const TrainedModel& m, const RollState& rs,
                                      const StateBelief& pi_pred, const Tensor& f,
                                      double std_floor = 0.0) {
  const ModelConfig& cfg = m.cfg;
  const int k = cfg.k, d = cfg.d, s_cnt = cfg.s;
  MixturePrediction out;
  out.state_prior.resize(s_cnt);
  std::vector<std::vector<double>> lagged;
  for (int l : cfg.lags) lagged.push_back(rs.w_hist[rs.w_hist.size() - l]);
  out.w_mean.assign(k, 0.0);
  const double lv_floor = 2.0 * std::log(std::max(std_floor, 1e-154));
  for (int s = 0; s < s_cnt; ++s) {
    out.state_prior[s] = temporal_prior(lagged, s, m.theta);
    if (std_floor > 0.0)
      for (double& lv : out.state_prior[s].logvar) lv = std::max(lv, lv_floor);
    for (int j = 0; j < k; ++j) out.w_mean[j] += pi_pred.p[s] * out.state_prior[s].mean[j];
  }
  out.x_mean.assign(d, 0.0);
  out.x_var.assign(d, 0.0);
  for (int dd = 0; dd < d; ++dd) {
    // mixture moments propagated through the linear map column
    double mean_mix = 0.0, second = 0.0;
    for (int s = 0; s < s_cnt; ++s) {
      double mu_s = 0.0, var_s = 0.0;
      for (int j = 0; j < k; ++j) {
        mu_s += out.state_prior[s].mean[j] * f.at(j, dd);
        var_s += f.at(j, dd) * f.at(j, dd) * std::exp(out.state_prior[s].logvar[j]);
      }
      mean_mix += pi_pred.p[s] * mu_s;
      second += pi_pred.p[s] * (var_s + mu_s * mu_s);
    }
    out.x_mean[dd] = mean_mix;
    out.x_var[dd] = std::max(second - mean_mix * mean_mix, 0.0) + cfg.sigma0 * cfg.sigma0;
  }
  return out;
}

}  // namespace detail

/// One-step-ahead rolling forecast over a test block. Each step predicts from
/// the current belief and lag history, then (with assimilation on) absorbs the
/// actual observation through the per-state conjugate update mixed by the
/// predictive belief, and updates the state belief from the assimilated
/// weight. theta and F are never modified. When no initial state is given the
/// first max-lag rows are consumed to build the history.
inline ForecastResult short_term_rolling(const TrainedModel& m, const Tensor& y,
                                         const Tensor& mask, const RollState* init,
                                         const ForecastOptions& opts = {}) {
  if (y.ndim() != 2 || !y.same_shape(mask)) throw shape_error("rolling: bad input shapes");
  const ModelConfig& cfg = m.cfg;
  const int t_len = static_cast<int>(y.rows());
  const int d = cfg.d, p = cfg.max_lag();
  if (static_cast<int>(y.cols()) != d) throw shape_error("rolling: dimension mismatch");
  const Tensor f = m.factor_mean();

  RollState rs;
  ForecastResult out;
  out.pred = Tensor({(std::size_t)t_len, (std::size_t)d});
  out.stddev = Tensor({(std::size_t)t_len, (std::size_t)d});
  out.states.reserve(t_len);

  std::optional<NewSeqInference> refined;
  if (opts.gradient_refine) {
    // fallback: fit the whole test block's variational parameters by gradient
    // ascent under the frozen model, then roll over its posterior means
    Tensor ys({(std::size_t)t_len, (std::size_t)d});
    for (int t = 0; t < t_len; ++t) {
      auto row = detail::standardize_row(
          m, std::span(y.v).subspan((std::size_t)t * d, d),
          std::span(mask.v).subspan((std::size_t)t * d, d));
      std::copy(row.begin(), row.end(), ys.v.begin() + (std::size_t)t * d);
    }
    TrainConfig tc;
    tc.seed = derive_seed(opts.seed, 0x9EF1);
    refined = infer_new_sequence(ys, mask, m.theta, f, opts.refine_steps, tc);
  }

  int start = 0;
  if (init) {
    if (static_cast<int>(init->w_hist.size()) < p)
      throw config_error("rolling: history shorter than the maximum lag");
    rs = *init;
  } else {
    if (t_len <= p) throw config_error("rolling: sequence shorter than the maximum lag");
    // build history from the test prefix
    std::vector<double> logits(cfg.s);
    for (int j = 0; j < cfg.s; ++j) logits[j] = m.theta.init_logits.v[j];
    rs.pi = StateBelief(softmax(logits));
    GaussianDiag std_normal(std::vector<double>(cfg.k, 0.0), std::vector<double>(cfg.k, 0.0));
    for (int t = 0; t < p; ++t) {
      auto xs = detail::standardize_row(m, std::span(y.v).subspan((std::size_t)t * d, d),
                                        std::span(mask.v).subspan((std::size_t)t * d, d));
      auto ms = std::span(mask.v).subspan((std::size_t)t * d, d);
      GaussianDiag post = conjugate_weight_update(std_normal, f, xs, ms, cfg.sigma0);
      if (opts.gradient_refine) post = refined->phi.w_at(0, t + 1);
      rs.w_hist.push_back(post.mean);
      if (t > 0) rs.pi = transition_prior(rs.pi, m.theta);
      out.states.push_back(rs.pi);
      // warmup rows carry the assimilated reconstruction, not a prediction
      for (int dd = 0; dd < d; ++dd) {
        double rec = 0.0;
        for (int j = 0; j < cfg.k; ++j) rec += post.mean[j] * f.at(j, dd);
        out.pred.at(t, dd) = m.mu.empty() ? rec : rec * m.sd[dd] + m.mu[dd];
        out.stddev.at(t, dd) = 0.0;
      }
    }
    start = p;
  }
  out.warmup = start;

  for (int t = start; t < t_len; ++t) {
    StateBelief pi_pred = transition_prior(rs.pi, m.theta);
    detail::MixturePrediction mp = detail::predict_step(m, rs, pi_pred, f, opts.assim_std_floor);
    for (int dd = 0; dd < d; ++dd) {
      out.pred.at(t, dd) = m.mu.empty() ? mp.x_mean[dd] : mp.x_mean[dd] * m.sd[dd] + m.mu[dd];
      out.stddev.at(t, dd) =
          std::sqrt(mp.x_var[dd]) * (m.mu.empty() ? 1.0 : m.sd[dd]);
    }
    if (opts.assimilate) {
      auto xs = detail::standardize_row(m, std::span(y.v).subspan((std::size_t)t * d, d),
                                        std::span(mask.v).subspan((std::size_t)t * d, d));
      auto ms = std::span(mask.v).subspan((std::size_t)t * d, d);
      std::vector<double> w_new(cfg.k, 0.0);
      if (opts.gradient_refine) {
        w_new = refined->phi.w_mean_at(0, t + 1);
      } else {
        for (int s = 0; s < cfg.s; ++s) {
          GaussianDiag post = conjugate_weight_update(mp.state_prior[s], f, xs, ms, cfg.sigma0);
          for (int j = 0; j < cfg.k; ++j) w_new[j] += pi_pred.p[s] * post.mean[j];
        }
      }
      // state evidence from the same inflated priors
      std::vector<double> logdens(cfg.s);
      for (int s = 0; s < cfg.s; ++s)
        logdens[s] = gaussian_logpdf_diag(w_new, mp.state_prior[s]);
      rs.pi = posterior_from_logdensity(pi_pred, logdens);
      rs.w_hist.push_back(std::move(w_new));
    } else {
      rs.pi = pi_pred;
      rs.w_hist.push_back(mp.w_mean);
    }
    if (rs.w_hist.size() > static_cast<std::size_t>(p)) rs.w_hist.pop_front();
    out.states.push_back(rs.pi);
  }

  if (t_len > start) {
    Tensor pred_cut({(std::size_t)(t_len - start), (std::size_t)d});
    Tensor truth_cut = pred_cut, mask_cut = pred_cut;
    for (int t = start; t < t_len; ++t)
      for (int dd = 0; dd < d; ++dd) {
        pred_cut.at(t - start, dd) = out.pred.at(t, dd);
        truth_cut.at(t - start, dd) = y.at(t, dd);
        mask_cut.at(t - start, dd) = mask.at(t, dd);
      }
    out.nrmse_pct = nrmse(pred_cut, truth_cut, &mask_cut);
  }
  return out;
}

/// Free-running generation over a horizon: the point forecast propagates
/// posterior means; the uncertainty band is the spread of sampled rollouts.
inline ForecastResult long_term(const TrainedModel& m, const RollState& init, int horizon,
                                const ForecastOptions& opts = {}, const Tensor* truth = nullptr,
                                const Tensor* truth_mask = nullptr) {
  if (horizon < 1) throw config_error("long_term: horizon must be >= 1");
  const ModelConfig& cfg = m.cfg;
  const int d = cfg.d, p = cfg.max_lag();
  if (static_cast<int>(init.w_hist.size()) < p)
    throw config_error("long_term: history shorter than the maximum lag");
  const Tensor f = m.factor_mean();

  ForecastResult out;
  out.pred = Tensor({(std::size_t)horizon, (std::size_t)d});
  out.stddev = Tensor({(std::size_t)horizon, (std::size_t)d});

  // point forecast: mean propagation
  {
    RollState rs = init;
    for (int t = 0; t < horizon; ++t) {
      StateBelief pi_pred = transition_prior(rs.pi, m.theta);
      detail::MixturePrediction mp = detail::predict_step(m, rs, pi_pred, f, opts.assim_std_floor);
      for (int dd = 0; dd < d; ++dd)
        out.pred.at(t, dd) = m.mu.empty() ? mp.x_mean[dd] : mp.x_mean[dd] * m.sd[dd] + m.mu[dd];
      rs.pi = pi_pred;
      rs.w_hist.push_back(mp.w_mean);
      rs.w_hist.pop_front();
      out.states.push_back(rs.pi);
    }
  }

  // uncertainty: Monte Carlo rollouts with per-rollout derived seeds
  const int r_cnt = std::max(opts.n_rollouts, 1);
  Tensor acc = Tensor::zeros(out.pred.shape);
  Tensor acc2 = Tensor::zeros(out.pred.shape);
  for (int r = 0; r < r_cnt; ++r) {
    Rng rng(derive_seed(opts.seed, 0x2011, static_cast<std::uint64_t>(r)));
    RollState rs = init;
    int s_cur = opts.suppress_noise ? -1 : rng.categorical(rs.pi.p);
    for (int t = 0; t < horizon; ++t) {
      std::vector<double> w_next(cfg.k, 0.0);
      if (opts.suppress_noise) {
        StateBelief pi_pred = transition_prior(rs.pi, m.theta);
        detail::MixturePrediction mp =
            detail::predict_step(m, rs, pi_pred, f, opts.assim_std_floor);
        w_next = mp.w_mean;
        rs.pi = pi_pred;
      } else {
        StateBelief one_hot(std::vector<double>(cfg.s, 0.0));
        one_hot.p[s_cur] = 1.0;
        StateBelief pi_pred = transition_prior(one_hot, m.theta);
        s_cur = rng.categorical(pi_pred.p);
        std::vector<std::vector<double>> lagged;
        for (int l : cfg.lags) lagged.push_back(rs.w_hist[rs.w_hist.size() - l]);
        GaussianDiag pr = temporal_prior(lagged, s_cur, m.theta);
        const double lv_floor = 2.0 * std::log(std::max(opts.assim_std_floor, 1e-154));
        for (int j = 0; j < cfg.k; ++j) {
          const double lv = opts.assim_std_floor > 0.0 ? std::max(pr.logvar[j], lv_floor)
                                                       : pr.logvar[j];
          w_next[j] = pr.mean[j] + std::exp(0.5 * lv) * rng.normal();
        }
        rs.pi = one_hot;
      }
      for (int dd = 0; dd < d; ++dd) {
        double x = 0.0;
        for (int j = 0; j < cfg.k; ++j) x += w_next[j] * f.at(j, dd);
        if (!m.mu.empty()) x = x * m.sd[dd] + m.mu[dd];
        acc.at(t, dd) += x;
        acc2.at(t, dd) += x * x;
      }
      rs.w_hist.push_back(std::move(w_next));
      rs.w_hist.pop_front();
    }
  }
  for (std::size_t i = 0; i < out.stddev.v.size(); ++i) {
    const double mean = acc.v[i] / r_cnt;
    out.stddev.v[i] = std::sqrt(std::max(acc2.v[i] / r_cnt - mean * mean, 0.0));
  }

  if (truth) out.nrmse_pct = nrmse(out.pred, *truth, truth_mask);
  return out;
}

inline RollState roll_state_from_prefix(const TrainedModel& m, const Tensor& y,
                                        const Tensor& mask) {
  const ModelConfig& cfg = m.cfg;
  const int p = cfg.max_lag(), d = cfg.d;
  if (static_cast<int>(y.rows()) < p)
    throw config_error("prefix initialization: sequence shorter than the maximum lag");
  const Tensor f = m.factor_mean();
  RollState rs;
  std::vector<double> logits(cfg.s);
  for (int j = 0; j < cfg.s; ++j) logits[j] = m.theta.init_logits.v[j];
  rs.pi = StateBelief(softmax(logits));
  GaussianDiag std_normal(std::vector<double>(cfg.k, 0.0), std::vector<double>(cfg.k, 0.0));
  for (int t = 0; t < p; ++t) {
    auto xs = detail::standardize_row(m, std::span(y.v).subspan((std::size_t)t * d, d),
                                      std::span(mask.v).subspan((std::size_t)t * d, d));
    auto ms = std::span(mask.v).subspan((std::size_t)t * d, d);
    rs.w_hist.push_back(conjugate_weight_update(std_normal, f, xs, ms, cfg.sigma0).mean);
    if (t > 0) rs.pi = transition_prior(rs.pi, m.theta);
  }
  return rs;
}

/// Repeat-last-period baseline: tile the trailing `period` rows of the
/// history across the horizon.
inline Tensor repeat_last_period(const Tensor& history, int period, int horizon) {
  if (history.ndim() != 2 || static_cast<int>(history.rows()) < period)
    throw config_error("repeat_last_period: history shorter than one period");
  const int d = static_cast<int>(history.cols());
  Tensor out({(std::size_t)horizon, (std::size_t)d});
  const int t0 = static_cast<int>(history.rows()) - period;
  for (int t = 0; t < horizon; ++t)
    for (int dd = 0; dd < d; ++dd) out.at(t, dd) = history.at(t0 + (t % period), dd);
  return out;
}

}  // namespace dsarf
