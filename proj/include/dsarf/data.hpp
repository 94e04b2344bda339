#pragma once

#include <utility>
#include <vector>

#include "tensor.hpp"

namespace dsarf {

/// In-memory corpus: N sequences x T time steps x D locations plus an
/// observation mask (1 = observed). Masked cells of `x` are kept at zero so
/// that unobserved file contents can never influence arithmetic.
struct Dataset {
  Tensor x;     // {N, T, D}
  Tensor mask;  // {N, T, D}
  int k_true = -1;
  int s_true = -1;

  int n() const { return static_cast<int>(x.shape[0]); }
  int t() const { return static_cast<int>(x.shape[1]); }
  int d() const { return static_cast<int>(x.shape[2]); }

  static Dataset dense(Tensor obs) {
    Dataset ds;
    ds.mask = Tensor::full(obs.shape, 1.0);
    ds.x = std::move(obs);
    return ds;
  }

  double missing_fraction() const {
    double miss = 0.0;
    for (double m : mask.v) miss += (m == 0.0) ? 1.0 : 0.0;
    return mask.v.empty() ? 0.0 : miss / mask.v.size();
  }

  void zero_masked() {
    for (std::size_t i = 0; i < x.v.size(); ++i)
      if (mask.v[i] == 0.0) x.v[i] = 0.0;
  }

  void validate() const {
    if (x.ndim() != 3 || !x.same_shape(mask)) throw shape_error("dataset: bad tensor shapes");
    for (double m : mask.v)
      if (m != 0.0 && m != 1.0) throw shape_error("dataset: mask entries must be 0 or 1");
  }

  /// Single sequence view as (T x D) observation and mask matrices.
  std::pair<Tensor, Tensor> sequence(int seq) const {
    const auto t_len = x.shape[1], d_dim = x.shape[2];
    Tensor xs({t_len, d_dim}), ms({t_len, d_dim});
    const std::size_t base = static_cast<std::size_t>(seq) * t_len * d_dim;
    std::copy_n(x.v.data() + base, t_len * d_dim, xs.v.data());
    std::copy_n(mask.v.data() + base, t_len * d_dim, ms.v.data());
    return {std::move(xs), std::move(ms)};
  }
};

/// Split off the trailing `n_test` sequences (train, test).
inline std::pair<Dataset, Dataset> split_trailing_seqs(const Dataset& ds, int n_test) {
  if (n_test < 0 || n_test >= ds.n()) throw config_error("split: bad holdout sequence count");
  const auto t_len = ds.x.shape[1], d_dim = ds.x.shape[2];
  const int n_train = ds.n() - n_test;
  Dataset tr, te;
  tr.x = Tensor({static_cast<std::size_t>(n_train), t_len, d_dim});
  tr.mask = Tensor({static_cast<std::size_t>(n_train), t_len, d_dim});
  te.x = Tensor({static_cast<std::size_t>(n_test), t_len, d_dim});
  te.mask = Tensor({static_cast<std::size_t>(n_test), t_len, d_dim});
  const std::size_t per = t_len * d_dim;
  std::copy_n(ds.x.v.data(), per * n_train, tr.x.v.data());
  std::copy_n(ds.mask.v.data(), per * n_train, tr.mask.v.data());
  std::copy_n(ds.x.v.data() + per * n_train, per * n_test, te.x.v.data());
  std::copy_n(ds.mask.v.data() + per * n_train, per * n_test, te.mask.v.data());
  tr.k_true = te.k_true = ds.k_true;
  tr.s_true = te.s_true = ds.s_true;
  return {std::move(tr), std::move(te)};
}

/// Split each sequence at time `t_split`: first part train, rest test.
inline std::pair<Dataset, Dataset> split_trailing_time(const Dataset& ds, int t_test) {
  if (t_test < 1 || t_test >= ds.t()) throw config_error("split: bad holdout length");
  const int n = ds.n(), t_len = ds.t(), d_dim = ds.d();
  const int t_train = t_len - t_test;
  Dataset tr, te;
  tr.x = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(t_train),
                 static_cast<std::size_t>(d_dim)});
  tr.mask = Tensor(tr.x.shape);
  te.x = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(t_test),
                 static_cast<std::size_t>(d_dim)});
  te.mask = Tensor(te.x.shape);
  for (int s = 0; s < n; ++s) {
    for (int t = 0; t < t_train; ++t)
      for (int d = 0; d < d_dim; ++d) {
        tr.x.at3(s, t, d) = ds.x.at3(s, t, d);
        tr.mask.at3(s, t, d) = ds.mask.at3(s, t, d);
      }
    for (int t = 0; t < t_test; ++t)
      for (int d = 0; d < d_dim; ++d) {
        te.x.at3(s, t, d) = ds.x.at3(s, t_train + t, d);
        te.mask.at3(s, t, d) = ds.mask.at3(s, t_train + t, d);
      }
  }
  tr.k_true = te.k_true = ds.k_true;
  tr.s_true = te.s_true = ds.s_true;
  return {std::move(tr), std::move(te)};
}

/// Per-dimension mean/scale over observed cells.
inline void observed_stats(const Dataset& ds, std::vector<double>& mu, std::vector<double>& sd) {
  const int n = ds.n(), t_len = ds.t(), d_dim = ds.d();
  mu.assign(d_dim, 0.0);
  sd.assign(d_dim, 1.0);
  std::vector<double> count(d_dim, 0.0);
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < t_len; ++t)
      for (int d = 0; d < d_dim; ++d)
        if (ds.mask.at3(s, t, d) != 0.0) {
          mu[d] += ds.x.at3(s, t, d);
          count[d] += 1.0;
        }
  for (int d = 0; d < d_dim; ++d) {
    if (count[d] == 0.0) throw numeric_error("standardize: a dimension has no observed values");
    mu[d] /= count[d];
  }
  std::vector<double> ss(d_dim, 0.0);
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < t_len; ++t)
      for (int d = 0; d < d_dim; ++d)
        if (ds.mask.at3(s, t, d) != 0.0) {
          const double r = ds.x.at3(s, t, d) - mu[d];
          ss[d] += r * r;
        }
  for (int d = 0; d < d_dim; ++d) sd[d] = std::max(std::sqrt(ss[d] / count[d]), 1e-8);
}

inline Dataset standardized(const Dataset& ds, const std::vector<double>& mu,
                            const std::vector<double>& sd) {
  Dataset out = ds;
  const int n = ds.n(), t_len = ds.t(), d_dim = ds.d();
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < t_len; ++t)
      for (int d = 0; d < d_dim; ++d)
        out.x.at3(s, t, d) =
            ds.mask.at3(s, t, d) != 0.0 ? (ds.x.at3(s, t, d) - mu[d]) / sd[d] : 0.0;
  return out;
}

}  // namespace dsarf
