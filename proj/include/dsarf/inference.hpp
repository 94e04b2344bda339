#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "adam.hpp"
#include "data.hpp"
#include "model.hpp"
#include "random.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace dsarf {

struct TrainConfig {
  int epochs = 200;
  double lr = 0.01;
  double anneal_start = 0.01;  // beta ramps linearly from here to 1
  int anneal_epochs = 100;
  int mc_samples = 1;
  int batch_size = 64;  // 0 = full batch
  std::uint64_t seed = 1;
  bool standardize = true;
  bool detach_states = false;  // EM-style constant state weights per step
  double w_init_std = 0.1;
  // Posterior log-variances start well below the per-step transition
  // residuals; otherwise the sampled-weight noise floor drowns the
  // state-evidence likelihood ratios and the regimes never separate.
  double logvar_init = -7.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (epochs < 1) throw config_error("train: epochs must be >= 1");
    if (anneal_start <= 0.0 || anneal_start > 1.0)
      throw config_error("train: anneal start must be in (0, 1]");
    if (anneal_epochs < 1) throw config_error("train: anneal ramp must be >= 1 epoch");
    if (mc_samples < 1) throw config_error("train: sample count must be >= 1");
    if (lr <= 0.0) throw config_error("train: learning rate must be > 0");
  }
};

/// Linear KL annealing: beta ramps from anneal_start at epoch 0 to 1 at
/// anneal_epochs and stays there.
inline double anneal(long epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw config_error("anneal: epoch must be >= 0");
  if (epoch >= cfg.anneal_epochs) return 1.0;
  return cfg.anneal_start +
         (1.0 - cfg.anneal_start) * (static_cast<double>(epoch) / cfg.anneal_epochs);
}

// ---------------------------------------------------------------------------
// Closed-form divergences and sampling helpers
// ---------------------------------------------------------------------------

inline double kl_gaussian_diag(const GaussianDiag& q, const GaussianDiag& p) {
  if (q.size() != p.size()) throw shape_error("kl_gaussian_diag: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double lq = q.logvar[i], lp = p.logvar[i];
    const double dm = q.mean[i] - p.mean[i];
    s += 0.5 * (std::exp(lq - lp) + dm * dm * std::exp(-lp) - 1.0 + lp - lq);
  }
  return s;
}

inline double kl_categorical(const StateBelief& q, const StateBelief& p) {
  if (q.size() != p.size()) throw shape_error("kl_categorical: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q.p[i] == 0.0) continue;
    s += q.p[i] * (std::log(std::max(q.p[i], kProbFloor)) -
                   std::log(std::max(p.p[i], kProbFloor)));
  }
  return s;
}

/// mean + exp(logvar / 2) .* noise
inline std::vector<double> reparam_sample(const GaussianDiag& g, std::span<const double> noise) {
  if (noise.size() != g.size()) throw shape_error("reparam_sample: noise length mismatch");
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    out[i] = g.mean[i] + std::exp(0.5 * g.logvar[i]) * noise[i];
  return out;
}

inline double gaussian_logpdf_diag(std::span<const double> x, const GaussianDiag& g) {
  if (x.size() != g.size()) throw shape_error("gaussian_logpdf_diag: length mismatch");
  double s = -0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lv = g.logvar[i];
    const double d = x[i] - g.mean[i];
    s += -0.5 * (lv + d * d * std::exp(-lv));
  }
  return s;
}

/// Normalized combination pi(s) proportional to prior(s) * exp(logdens(s)),
/// computed in log space.
inline StateBelief posterior_from_logdensity(const StateBelief& prior,
                                             std::span<const double> logdens) {
  if (prior.size() != logdens.size()) throw shape_error("state posterior: size mismatch");
  std::vector<double> logits(prior.size());
  for (std::size_t i = 0; i < prior.size(); ++i)
    logits[i] = std::log(std::max(prior.p[i], kProbFloor)) + logdens[i];
  return StateBelief(softmax(logits));
}

/// q(s_t) approximated by p(s_t | w_t): transition prior times the temporal
/// prior density of the current weight sample, normalized over states.
inline StateBelief state_posterior(const StateBelief& pi_prev, std::span<const double> w_t,
                                   const std::vector<std::vector<double>>& w_lagged,
                                   const GenerativeParams& th) {
  StateBelief prior = transition_prior(pi_prev, th);
  std::vector<double> logdens(th.cfg.s);
  for (int s = 0; s < th.cfg.s; ++s)
    logdens[s] = gaussian_logpdf_diag(w_t, temporal_prior(w_lagged, s, th));
  return posterior_from_logdensity(prior, logdens);
}

// ---------------------------------------------------------------------------
// Variational parameters
// ---------------------------------------------------------------------------

/// Mean-field family: a diagonal Gaussian per (sequence, time) weight
/// including the lag preamble, corpus-global Gaussians for z and F, and
/// categorical logits for each sequence's initial state. Weight rows are laid
/// out time-major: row index = t_idx * N + n with t_idx 0 .. T+P-1 covering
/// times 1-P .. T (P = max lag).
struct VariationalParams {
  int n = 0, t = 0, k = 0, s = 0, preamble = 0, z_dim = 0, d = 0;
  Tensor w_mean, w_logvar;  // ((T+P) * N) x K
  Tensor s0_logits;         // N x S
  Tensor z_mean, z_logvar;  // 1 x Z
  Tensor f_mean, f_logvar;  // K x D

  static VariationalParams init(int n_seq, int t_len, const ModelConfig& cfg,
                                const TrainConfig& tcfg) {
    VariationalParams vp;
    vp.n = n_seq;
    vp.t = t_len;
    vp.k = cfg.k;
    vp.s = cfg.s;
    vp.preamble = cfg.max_lag();
    vp.z_dim = cfg.z_dim;
    vp.d = cfg.d;
    const std::size_t rows = static_cast<std::size_t>(t_len + vp.preamble) * n_seq;
    vp.w_mean = sample_gaussian({rows, static_cast<std::size_t>(cfg.k)},
                                derive_seed(tcfg.seed, 0xF1A0));
    for (auto& x : vp.w_mean.v) x *= tcfg.w_init_std;
    vp.w_logvar = Tensor::full({rows, static_cast<std::size_t>(cfg.k)}, tcfg.logvar_init);
    vp.s0_logits = Tensor::zeros({static_cast<std::size_t>(n_seq), static_cast<std::size_t>(cfg.s)});
    vp.z_mean = sample_gaussian({1, static_cast<std::size_t>(cfg.z_dim)},
                                derive_seed(tcfg.seed, 0xF1A1));
    for (auto& x : vp.z_mean.v) x *= tcfg.w_init_std;
    vp.z_logvar = Tensor::full({1, static_cast<std::size_t>(cfg.z_dim)}, tcfg.logvar_init);
    vp.f_mean = sample_gaussian({static_cast<std::size_t>(cfg.k), static_cast<std::size_t>(cfg.d)},
                                derive_seed(tcfg.seed, 0xF1A2));
    for (auto& x : vp.f_mean.v) x *= tcfg.w_init_std;
    vp.f_logvar = Tensor::full({static_cast<std::size_t>(cfg.k), static_cast<std::size_t>(cfg.d)},
                               tcfg.logvar_init);
    return vp;
  }

  std::size_t w_row(int t_idx, int seq) const {
    return static_cast<std::size_t>(t_idx) * n + seq;
  }

  /// Posterior mean of w at time t (1-based; t <= 0 addresses the preamble).
  std::vector<double> w_mean_at(int seq, int time) const {
    const int t_idx = time + preamble - 1;
    std::vector<double> out(k);
    for (int j = 0; j < k; ++j) out[j] = w_mean.at(w_row(t_idx, seq), j);
    return out;
  }

  GaussianDiag w_at(int seq, int time) const {
    const int t_idx = time + preamble - 1;
    GaussianDiag g;
    g.mean.resize(k);
    g.logvar.resize(k);
    for (int j = 0; j < k; ++j) {
      g.mean[j] = w_mean.at(w_row(t_idx, seq), j);
      g.logvar[j] = w_logvar.at(w_row(t_idx, seq), j);
    }
    return g;
  }

  template <class F>
  void for_each_tensor(F&& fn) {
    fn("phi.w_mean", w_mean);
    fn("phi.w_logvar", w_logvar);
    fn("phi.s0_logits", s0_logits);
    fn("phi.z_mean", z_mean);
    fn("phi.z_logvar", z_logvar);
    fn("phi.f_mean", f_mean);
    fn("phi.f_logvar", f_logvar);
  }
};

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

struct ElboBreakdown {
  double reconstruction = 0.0;
  double initial_prior = 0.0;  // -beta * (KL(q(s0)||p(s0)) + KL(q(w_pre)||N(0,I)))
  double state_kl = 0.0;       // -beta * sum_t KL(q(s_t)||Cat(Phi pi_{t-1}))
  double weight_kl = 0.0;      // -beta * sum_t sum_s q(s_t=s) KL(q(w_t)||p(w_t|.,s))
  double factor = 0.0;         // -beta * (E_q(z) KL(q(F)||p(F|z)) + KL(q(z)||N(0,I)))
  double total = 0.0;
};

struct Batch {
  const Dataset* data = nullptr;
  std::vector<int> seqs;
  double scale = 1.0;  // N_total / |seqs|
};

namespace detail {

struct ElboNodes {
  NodeId total = -1;
  ElboBreakdown bd;
  std::vector<std::pair<std::string, NodeId>> bound;  // trainable leaves
  std::vector<NodeId> pi;                             // pi_t nodes, t = 0..T
};

struct ElboOptions {
  double beta = 1.0;
  std::uint64_t seed = 0;
  int mc_samples = 1;
  bool train_theta = true;
  bool train_phi = true;
  bool detach_pi = false;           // treat the state-posterior weights as
                                    // constants of the step (EM-style)
  const Tensor* fixed_f = nullptr;  // K x D; when set, F is constant and the
                                    // factor/z terms are dropped (frozen model)
};

/// Records the full ELBO of one batch on the tape. X/mask rows are gathered
/// time-major ((t-1)*Nb + i). Per-sequence terms are scaled by batch.scale;
/// the corpus-global factor term is not.
inline ElboNodes build_elbo(Tape& tp, const Batch& batch, GenerativeParams& theta,
                            VariationalParams& phi, const ElboOptions& opt) {
  const ModelConfig& cfg = theta.cfg;
  const Dataset& ds = *batch.data;
  const int nb = static_cast<int>(batch.seqs.size());
  const int t_len = phi.t;
  const int p = phi.preamble;
  const int k = cfg.k;
  const int s_cnt = cfg.s;
  const std::size_t rt = static_cast<std::size_t>(t_len) * nb;  // current-block rows
  if (nb == 0) throw config_error("elbo: empty batch");
  if (ds.t() != t_len || ds.d() != cfg.d) throw shape_error("elbo: dataset/model shape mismatch");

  ElboNodes out;
  auto bind = [&](const std::string& name, NodeId id, bool trainable) {
    if (trainable) out.bound.emplace_back(name, id);
  };

  // ---- constants: gathered observations and mask ----
  Tensor xb({rt, static_cast<std::size_t>(cfg.d)});
  Tensor mb({rt, static_cast<std::size_t>(cfg.d)});
  double n_obs = 0.0;
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < nb; ++i) {
      const int seq = batch.seqs[i];
      const std::size_t r = static_cast<std::size_t>(t) * nb + i;
      for (int d = 0; d < cfg.d; ++d) {
        xb.at(r, d) = ds.x.at3(seq, t, d);
        const double m = ds.mask.at3(seq, t, d);
        mb.at(r, d) = m;
        n_obs += m;
      }
    }
  NodeId x_const = tp.leaf(xb);
  NodeId m_const = tp.leaf(mb);

  // ---- stage parameters ----
  std::vector<std::pair<std::string, NodeId>> theta_order;
  ThetaNodes tn = stage_theta(tp, theta, opt.train_theta, &theta_order);
  if (opt.train_theta)
    for (const auto& [name, id] : theta_order) out.bound.emplace_back(name, id);

  std::vector<int> w_rows;
  w_rows.reserve(static_cast<std::size_t>(t_len + p) * nb);
  for (int ti = 0; ti < t_len + p; ++ti)
    for (int i = 0; i < nb; ++i) w_rows.push_back(ti * phi.n + batch.seqs[i]);
  std::vector<int> s0_rows(batch.seqs.begin(), batch.seqs.end());

  NodeId wm = tp.leaf_rows(phi.w_mean, w_rows, opt.train_phi);
  bind("phi.w_mean", wm, opt.train_phi);
  NodeId wl = tp.leaf_rows(phi.w_logvar, w_rows, opt.train_phi);
  bind("phi.w_logvar", wl, opt.train_phi);
  NodeId s0 = tp.leaf_rows(phi.s0_logits, s0_rows, opt.train_phi);
  bind("phi.s0_logits", s0, opt.train_phi);

  NodeId zm = -1, zl = -1, fm = -1, fl = -1;
  if (!opt.fixed_f) {
    zm = tp.leaf(phi.z_mean, opt.train_phi);
    bind("phi.z_mean", zm, opt.train_phi);
    zl = tp.leaf(phi.z_logvar, opt.train_phi);
    bind("phi.z_logvar", zl, opt.train_phi);
    fm = tp.leaf(phi.f_mean, opt.train_phi);
    bind("phi.f_mean", fm, opt.train_phi);
    fl = tp.leaf(phi.f_logvar, opt.train_phi);
    bind("phi.f_logvar", fl, opt.train_phi);
  }

  auto reparam = [&](NodeId mean, NodeId logvar, NodeId noise) {
    return tp.add(mean, tp.mul(tp.exp(tp.mul_scalar(logvar, 0.5)), noise));
  };
  auto kl_to_std_normal = [&](NodeId mean, NodeId logvar) {
    NodeId inner = tp.sub(tp.add(tp.exp(logvar), tp.mul(mean, mean)),
                          tp.add_scalar(logvar, 1.0));
    return tp.mul_scalar(tp.sum(inner), 0.5);
  };
  // KL(q || p) for diagonal Gaussians given as (mean, logvar) nodes
  auto kl_gauss = [&](NodeId mq, NodeId lq, NodeId mp, NodeId lp) {
    NodeId a = tp.exp(tp.sub(lq, lp));
    NodeId dm = tp.sub(mq, mp);
    NodeId b = tp.mul(tp.mul(dm, dm), tp.exp(tp.mul_scalar(lp, -1.0)));
    NodeId c = tp.add_scalar(tp.sub(lp, lq), -1.0);
    return tp.add(tp.add(a, b), c);  // elementwise; caller reduces
  };

  // ---- analytic terms (sample independent) ----
  NodeId kl_pre, kl_s0, pi0;
  try {
    NodeId pm = tp.slice_rows(wm, 0, p * nb);
    NodeId pl = tp.slice_rows(wl, 0, p * nb);
    kl_pre = kl_to_std_normal(pm, pl);

    pi0 = tp.softmax_rows(s0);
    NodeId p0 = tp.softmax_rows(tn.init_logits);  // 1 x S
    NodeId neg_lp0 = tp.mul_scalar(tp.log_clamp(p0), -1.0);
    NodeId diff = tp.add_rowvec(tp.log_clamp(pi0), neg_lp0);
    kl_s0 = tp.sum(tp.mul(pi0, diff));
  } catch (const numeric_error& e) {
    throw numeric_error(std::string("elbo initial-prior term: ") + e.what());
  }

  NodeId kl_z = -1;
  if (!opt.fixed_f) kl_z = kl_to_std_normal(zm, zl);

  // ---- sampled terms, averaged over mc_samples ----
  NodeId rec_acc = -1, klS_acc = -1, klW_acc = -1, klF_acc = -1;
  auto acc = [&](NodeId& slot, NodeId v) { slot = slot < 0 ? v : tp.add(slot, v); };

  for (int mc = 0; mc < opt.mc_samples; ++mc) {
    const std::uint64_t sseed = derive_seed(opt.seed, 0xE1B0, mc);

    NodeId w_noise = tp.leaf(sample_gaussian(
        {static_cast<std::size_t>(t_len + p) * nb, static_cast<std::size_t>(k)},
        derive_seed(sseed, 3)));
    NodeId w_samp = reparam(wm, wl, w_noise);
    NodeId w_cur = tp.slice_rows(w_samp, p * nb, t_len * nb);

    NodeId f_node;  // K x D factor matrix used by the likelihood
    if (opt.fixed_f) {
      f_node = tp.leaf(*opt.fixed_f);
    } else {
      try {
        NodeId z_noise = tp.leaf(sample_gaussian({1, static_cast<std::size_t>(cfg.z_dim)},
                                                 derive_seed(sseed, 1)));
        NodeId z_samp = reparam(zm, zl, z_noise);
        GaussNodes dec = build_spatial_decoder(tp, tn, cfg, z_samp);
        NodeId f_noise = tp.leaf(sample_gaussian(
            {static_cast<std::size_t>(k), static_cast<std::size_t>(cfg.d)},
            derive_seed(sseed, 2)));
        f_node = reparam(fm, fl, f_noise);
        acc(klF_acc, tp.mul_scalar(tp.sum(kl_gauss(fm, fl, dec.mean, dec.logvar)), 0.5));
      } catch (const numeric_error& e) {
        throw numeric_error(std::string("elbo factor term: ") + e.what());
      }
    }

    try {
      acc(rec_acc, build_observation_loglik(tp, w_cur, f_node, x_const, m_const, cfg.sigma0,
                                            n_obs));
    } catch (const numeric_error& e) {
      throw numeric_error(std::string("elbo reconstruction term: ") + e.what());
    }

    // per-state temporal priors over all t at once
    std::vector<NodeId> lag_in(cfg.lags.size());
    for (std::size_t li = 0; li < cfg.lags.size(); ++li) {
      const int l = cfg.lags[li];
      lag_in[li] = tp.slice_rows(w_samp, (p - l) * nb, t_len * nb);
    }
    NodeId mq = tp.slice_rows(wm, p * nb, t_len * nb);
    NodeId lq = tp.slice_rows(wl, p * nb, t_len * nb);

    std::vector<NodeId> ll_cols, klw_cols;
    try {
      for (int s = 0; s < s_cnt; ++s) {
        GaussNodes pr = build_temporal_prior(tp, tn, cfg, lag_in, s);
        NodeId d = tp.sub(w_cur, pr.mean);
        NodeId e_neg = tp.exp(tp.mul_scalar(pr.logvar, -1.0));
        NodeId inner = tp.add(pr.logvar, tp.mul(tp.mul(d, d), e_neg));
        NodeId ll = tp.add_scalar(tp.mul_scalar(tp.row_sum(inner), -0.5),
                                  -0.5 * k * std::log(2.0 * std::numbers::pi));
        ll_cols.push_back(ll);
        klw_cols.push_back(
            tp.mul_scalar(tp.row_sum(kl_gauss(mq, lq, pr.mean, pr.logvar)), 0.5));
      }
    } catch (const numeric_error& e) {
      throw numeric_error(std::string("elbo weight-prior term: ") + e.what());
    }

    try {
      NodeId ll_all = tp.concat_cols(ll_cols);    // (T*Nb) x S
      NodeId klw_all = tp.concat_cols(klw_cols);  // (T*Nb) x S

      // forward state-posterior chain; with detach_pi the chain is evaluated
      // outside the tape and re-enters as constants (prior nodes keep the
      // gradient path into the transition logits)
      std::vector<NodeId> pis;
      pis.reserve(t_len + 1);
      pis.push_back(opt.detach_pi ? tp.leaf(tp.value_tensor(pi0)) : pi0);
      NodeId klS_sum = -1;
      for (int t = 1; t <= t_len; ++t) {
        NodeId prior = build_transition(tp, tn, pis.back());
        NodeId ll_t = tp.slice_rows(ll_all, (t - 1) * nb, nb);
        NodeId pi_t = tp.softmax_rows(tp.add(tp.log_clamp(prior), ll_t));
        if (opt.detach_pi) pi_t = tp.leaf(tp.value_tensor(pi_t));
        NodeId kl_t =
            tp.sum(tp.mul(pi_t, tp.sub(tp.log_clamp(pi_t), tp.log_clamp(prior))));
        klS_sum = klS_sum < 0 ? kl_t : tp.add(klS_sum, kl_t);
        pis.push_back(pi_t);
      }
      acc(klS_acc, klS_sum);

      std::vector<NodeId> pi_main(pis.begin() + 1, pis.end());
      NodeId pi_all = tp.concat_rows(pi_main);  // (T*Nb) x S
      acc(klW_acc, tp.sum(tp.mul(pi_all, klw_all)));
      if (mc == 0) out.pi = pis;
    } catch (const numeric_error& e) {
      throw numeric_error(std::string("elbo state term: ") + e.what());
    }
  }

  const double inv_mc = 1.0 / opt.mc_samples;
  const double bscale = batch.scale;
  NodeId rec = tp.mul_scalar(rec_acc, inv_mc * bscale);
  NodeId init_term =
      tp.mul_scalar(tp.add(kl_s0, kl_pre), -opt.beta * bscale);
  NodeId state_term = tp.mul_scalar(klS_acc, -opt.beta * bscale * inv_mc);
  NodeId weight_term = tp.mul_scalar(klW_acc, -opt.beta * bscale * inv_mc);
  NodeId total = tp.add(tp.add(rec, init_term), tp.add(state_term, weight_term));
  NodeId factor_term = -1;
  if (!opt.fixed_f) {
    factor_term = tp.mul_scalar(tp.add(tp.mul_scalar(klF_acc, inv_mc), kl_z), -opt.beta);
    total = tp.add(total, factor_term);
  }

  out.total = total;
  out.bd.reconstruction = tp.scalar_value(rec);
  out.bd.initial_prior = tp.scalar_value(init_term);
  out.bd.state_kl = tp.scalar_value(state_term);
  out.bd.weight_kl = tp.scalar_value(weight_term);
  out.bd.factor = opt.fixed_f ? 0.0 : tp.scalar_value(factor_term);
  out.bd.total = tp.scalar_value(total);
  return out;
}

}  // namespace detail

/// One-sample ELBO of a batch (Eq. 5 terms, KLs scaled by beta). The noise
/// streams are pure functions of `seed`: z, F and the weight block draw from
/// derive_seed(derive_seed(seed, 0xE1B0, mc), {1,2,3}).
inline ElboBreakdown elbo(const Batch& batch, GenerativeParams& theta, VariationalParams& phi,
                          double beta, std::uint64_t seed, int mc_samples = 1) {
  Tape tp;
  detail::ElboOptions opt;
  opt.beta = beta;
  opt.seed = seed;
  opt.mc_samples = mc_samples;
  opt.train_theta = false;
  opt.train_phi = false;
  return detail::build_elbo(tp, batch, theta, phi, opt).bd;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainedModel {
  ModelConfig cfg;
  GenerativeParams theta;
  VariationalParams phi;
  std::vector<double> mu, sd;  // per-dimension standardization (empty when off)
  std::vector<double> curve;   // per-epoch ELBO estimates

  Tensor factor_mean() const {
    Tensor f({static_cast<std::size_t>(cfg.k), static_cast<std::size_t>(cfg.d)});
    f.v = phi.f_mean.v;
    return f;
  }
};

struct TrainState {
  AdamState opt;
  long epoch = 0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TrainedModel model;
  TrainState state;
  TrainConfig tcfg;
};

namespace detail {

struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  std::map<std::string, std::size_t> index;

  void add(const std::string& name, Tensor& t) {
    index[name] = tensors.size();
    names.push_back(name);
    tensors.push_back(&t);
  }
};

inline ParamSet collect_params(GenerativeParams& theta, VariationalParams* phi) {
  ParamSet ps;
  theta.for_each_tensor([&](const std::string& n, Tensor& t) { ps.add(n, t); });
  if (phi)
    phi->for_each_tensor([&](const std::string& n, Tensor& t) { ps.add(n, t); });
  return ps;
}

inline std::vector<int> epoch_permutation(int n, std::uint64_t seed, long epoch) {
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  Rng rng(derive_seed(seed, 0x5F0F, static_cast<std::uint64_t>(epoch)));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

/// Runs epochs [state.epoch, target) of stochastic variational inference.
/// `ds` must already be in model space (standardized if enabled).
inline void run_epochs(TrainResult& tr, const Dataset& ds, long target) {
  TrainedModel& m = tr.model;
  const int n = ds.n();
  const int bs = tr.tcfg.batch_size <= 0 ? n : std::min(tr.tcfg.batch_size, n);
  ParamSet ps = collect_params(m.theta, &m.phi);
  if (tr.state.opt.m.empty()) {
    tr.state.opt.cfg = {tr.tcfg.lr, tr.tcfg.adam_beta1, tr.tcfg.adam_beta2, tr.tcfg.adam_eps};
    tr.state.opt.init(ps.tensors);
  }
  for (long epoch = tr.state.epoch; epoch < target; ++epoch) {
    const double beta = anneal(epoch, tr.tcfg);
    const std::vector<int> perm = epoch_permutation(n, tr.state.seed, epoch);
    double epoch_elbo = 0.0;
    int n_batches = 0;
    for (int start = 0; start < n; start += bs, ++n_batches) {
      const int stop = std::min(start + bs, n);
      Batch batch;
      batch.data = &ds;
      batch.seqs.assign(perm.begin() + start, perm.begin() + stop);
      batch.scale = static_cast<double>(n) / (stop - start);

      ElboOptions opt;
      opt.beta = beta;
      opt.seed = derive_seed(tr.state.seed, 0x57E9, static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(n_batches));
      opt.mc_samples = tr.tcfg.mc_samples;
      opt.detach_pi = tr.tcfg.detach_states;

      Tape tp;
      ElboNodes en;
      try {
        en = build_elbo(tp, batch, m.theta, m.phi, opt);
        tp.backward_inplace(tp.mul_scalar(en.total, -1.0));
      } catch (const numeric_error& e) {
        throw numeric_error("training diverged at epoch " + std::to_string(epoch) + ": " +
                            e.what());
      }
      std::vector<Tensor> grads;
      grads.reserve(ps.tensors.size());
      for (const Tensor* t : ps.tensors) grads.push_back(Tensor::zeros(t->shape));
      for (const auto& [name, node] : en.bound) {
        auto it = ps.index.find(name);
        if (it == ps.index.end()) throw error("train: unbound parameter " + name);
        grads[it->second] = tp.leaf_grad(node);
      }
      adam_step(ps.tensors, grads, tr.state.opt);
      epoch_elbo += en.bd.total;
    }
    m.curve.push_back(epoch_elbo / n_batches);
    tr.state.epoch = epoch + 1;
  }
}

}  // namespace detail

/// Fit theta and phi by stochastic gradient ascent on the ELBO.
inline TrainResult train(const Dataset& ds, const ModelConfig& mcfg_in, const TrainConfig& tcfg) {
  ds.validate();
  tcfg.validate();
  ModelConfig mcfg = mcfg_in;
  mcfg.d = ds.d();
  mcfg.validate();
  if (ds.t() <= mcfg.max_lag())
    throw config_error("train: sequences shorter than the maximum lag");

  TrainResult tr;
  tr.tcfg = tcfg;
  tr.model.cfg = mcfg;
  tr.state.seed = tcfg.seed;
  if (tcfg.standardize) observed_stats(ds, tr.model.mu, tr.model.sd);
  const Dataset dstd =
      tcfg.standardize ? standardized(ds, tr.model.mu, tr.model.sd) : ds;

  tr.model.theta = GenerativeParams::init(mcfg, derive_seed(tcfg.seed, 0x7E7A));
  tr.model.phi = VariationalParams::init(ds.n(), ds.t(), mcfg, tcfg);
  detail::run_epochs(tr, dstd, tcfg.epochs);
  return tr;
}

/// Continue a (possibly checkpointed) run up to `target_epochs` on the same
/// dataset; bitwise-identical to an uninterrupted run.
inline void continue_training(TrainResult& tr, const Dataset& ds, long target_epochs) {
  const Dataset dstd =
      tr.tcfg.standardize ? standardized(ds, tr.model.mu, tr.model.sd) : ds;
  detail::run_epochs(tr, dstd, target_epochs);
}

// ---------------------------------------------------------------------------
// Inference for a new sequence under a frozen model
// ---------------------------------------------------------------------------

struct NewSeqInference {
  VariationalParams phi;          // n = 1
  std::vector<StateBelief> path;  // pi_1 .. pi_T from the posterior means
  std::vector<double> curve;
};

/// State-posterior chain evaluated at the weight posterior means of one
/// sequence. Deterministic; used for segmentation readout and forecasting.
inline std::vector<StateBelief> state_path_from_means(const GenerativeParams& th,
                                                      const VariationalParams& phi, int seq) {
  const int t_len = phi.t;
  std::vector<StateBelief> path;
  path.reserve(t_len);
  std::vector<double> logits(phi.s);
  for (int j = 0; j < phi.s; ++j) logits[j] = phi.s0_logits.at(seq, j);
  StateBelief pi(softmax(logits));
  for (int t = 1; t <= t_len; ++t) {
    std::vector<std::vector<double>> lagged;
    for (int l : th.cfg.lags) lagged.push_back(phi.w_mean_at(seq, t - l));
    pi = state_posterior(pi, phi.w_mean_at(seq, t), lagged, th);
    path.push_back(pi);
  }
  return path;
}

/// Optimize the variational parameters of one new sequence with theta and F
/// frozen. `x` and `mask` are in model (standardized) space.
inline NewSeqInference infer_new_sequence(const Tensor& x, const Tensor& mask,
                                          const GenerativeParams& theta, const Tensor& f,
                                          int steps, const TrainConfig& tcfg) {
  if (x.ndim() != 2 || !x.same_shape(mask)) throw shape_error("infer_new_sequence: bad input");
  const int t_len = static_cast<int>(x.rows());
  Dataset ds;
  ds.x = Tensor({1, x.rows(), x.cols()}, x.v);
  ds.mask = Tensor({1, x.rows(), x.cols()}, mask.v);
  ds.zero_masked();

  NewSeqInference out;
  out.phi = VariationalParams::init(1, t_len, theta.cfg, tcfg);

  GenerativeParams th = theta;  // staged as constants (train_theta = false)
  detail::ParamSet ps;
  out.phi.for_each_tensor([&](const std::string& n, Tensor& t) {
    if (n == "phi.w_mean" || n == "phi.w_logvar" || n == "phi.s0_logits") ps.add(n, t);
  });
  AdamState opt;
  opt.cfg = {tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps};
  opt.init(ps.tensors);

  Batch batch;
  batch.data = &ds;
  batch.seqs = {0};
  batch.scale = 1.0;
  for (int step = 0; step < steps; ++step) {
    detail::ElboOptions opt_e;
    opt_e.beta = 1.0;
    opt_e.seed = derive_seed(tcfg.seed, 0x1F3A, static_cast<std::uint64_t>(step));
    opt_e.mc_samples = tcfg.mc_samples;
    opt_e.train_theta = false;
    opt_e.train_phi = true;
    opt_e.fixed_f = &f;
    Tape tp;
    detail::ElboNodes en = detail::build_elbo(tp, batch, th, out.phi, opt_e);
    tp.backward_inplace(tp.mul_scalar(en.total, -1.0));
    std::vector<Tensor> grads;
    for (const Tensor* t : ps.tensors) grads.push_back(Tensor::zeros(t->shape));
    for (const auto& [name, node] : en.bound) {
      auto it = ps.index.find(name);
      if (it == ps.index.end()) continue;
      grads[it->second] = tp.leaf_grad(node);
    }
    adam_step(ps.tensors, grads, opt);
    out.curve.push_back(en.bd.total);
  }
  out.path = state_path_from_means(theta, out.phi, 0);
  return out;
}

}  // namespace dsarf
