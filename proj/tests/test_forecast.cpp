#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsarf/forecast.hpp"
#include "dsarf/random.hpp"
#include "test_util.hpp"

using namespace dsarf;

namespace {
// independent 3x3 (or smaller) linear solve via Cramer's rule for the oracle
double det3(const double m[3][3], int k) {
  if (k == 1) return m[0][0];
  if (k == 2) return m[0][0] * m[1][1] - m[0][1] * m[1][0];
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

struct OraclePosterior {
  std::vector<double> mean, var;
};

OraclePosterior conjugate_oracle(const GaussianDiag& prior, const Tensor& f,
                                 const std::vector<double>& x, const std::vector<double>& mask,
                                 double sigma0) {
  const int k = static_cast<int>(prior.size());
  const int d = static_cast<int>(f.cols());
  double lam[3][3] = {{0}};
  double rhs[3] = {0};
  for (int i = 0; i < k; ++i) {
    lam[i][i] = std::exp(-prior.logvar[i]);
    rhs[i] = lam[i][i] * prior.mean[i];
  }
  for (int dd = 0; dd < d; ++dd) {
    if (mask[dd] == 0.0) continue;
    for (int i = 0; i < k; ++i) {
      rhs[i] += f.at(i, dd) * x[dd] / (sigma0 * sigma0);
      for (int j = 0; j < k; ++j) lam[i][j] += f.at(i, dd) * f.at(j, dd) / (sigma0 * sigma0);
    }
  }
  const double dt = det3(lam, k);
  OraclePosterior out;
  out.mean.resize(k);
  out.var.resize(k);
  // mean via Cramer's rule
  for (int i = 0; i < k; ++i) {
    double m[3][3];
    std::copy(&lam[0][0], &lam[0][0] + 9, &m[0][0]);
    for (int r = 0; r < k; ++r) m[r][i] = rhs[r];
    out.mean[i] = det3(m, k) / dt;
  }
  // marginal variance = cofactor / det
  for (int i = 0; i < k; ++i) {
    double m[3][3] = {{0}};
    int rr = 0;
    for (int r = 0; r < k; ++r) {
      if (r == i) continue;
      int cc = 0;
      for (int c = 0; c < k; ++c) {
        if (c == i) continue;
        m[rr][cc++] = lam[r][c];
      }
      ++rr;
    }
    out.var[i] = (k == 1 ? 1.0 : det3(m, k - 1)) / dt;
  }
  return out;
}

TrainedModel tiny_model(std::uint64_t seed, int t_len = 10) {
  ModelConfig cfg;
  cfg.k = 2;
  cfg.s = 2;
  cfg.d = 3;
  cfg.lags = {1, 2};
  cfg.hidden = 4;
  cfg.z_dim = 2;
  cfg.sigma0 = 0.2;
  TrainedModel m;
  m.cfg = cfg;
  m.theta = GenerativeParams::init(cfg, seed);
  TrainConfig tc;
  tc.seed = seed + 1;
  m.phi = VariationalParams::init(1, t_len, cfg, tc);
  Rng rng(seed + 2);
  for (auto& x : m.phi.f_mean.v) x = rng.uniform(-1, 1);
  for (auto& x : m.phi.w_mean.v) x = rng.uniform(-0.5, 0.5);
  return m;
}

RollState tiny_init(const TrainedModel& m, std::uint64_t seed) {
  RollState rs;
  Rng rng(seed);
  for (int i = 0; i < m.cfg.max_lag(); ++i) {
    std::vector<double> w(m.cfg.k);
    for (auto& x : w) x = rng.uniform(-0.5, 0.5);
    rs.w_hist.push_back(std::move(w));
  }
  rs.pi = StateBelief::uniform(m.cfg.s);
  return rs;
}
}  // namespace

TEST_CASE("conjugate weight update") {
  GaussianDiag prior({0.3, -0.8}, {std::log(0.7), std::log(1.3)});
  Tensor f({2, 3}, {0.5, -1.0, 0.3, 0.8, 0.2, -0.6});

  SECTION("an uninformative likelihood returns the prior") {
    std::vector<double> x = {1.0, -2.0, 0.5}, mask = {1, 1, 1};
    GaussianDiag post = conjugate_weight_update(prior, f, x, mask, 1e6);
    REQUIRE(testutil::max_abs_diff(post.mean, prior.mean) < 1e-6);
    REQUIRE(testutil::max_abs_diff(post.logvar, prior.logvar) < 1e-6);
  }
  SECTION("an all-masked row returns the prior exactly") {
    std::vector<double> x = {1.0, -2.0, 0.5}, mask = {0, 0, 0};
    GaussianDiag post = conjugate_weight_update(prior, f, x, mask, 0.1);
    REQUIRE(post.mean == prior.mean);
    REQUIRE(post.logvar == prior.logvar);
  }
  SECTION("identity factors with a flat prior recover the observation") {
    GaussianDiag flat({0.0, 0.0}, {std::log(1e6), std::log(1e6)});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    std::vector<double> x = {3.0, -1.0}, mask = {1, 1};
    GaussianDiag post = conjugate_weight_update(flat, eye, x, mask, 0.1);
    REQUIRE(post.mean[0] == Catch::Approx(3.0).margin(1e-4));
    REQUIRE(post.mean[1] == Catch::Approx(-1.0).margin(1e-4));
  }
  SECTION("agrees with direct Gaussian algebra to 1e-8 for K <= 3") {
    Rng rng(404);
    for (int k = 1; k <= 3; ++k) {
      for (int rep = 0; rep < 20; ++rep) {
        GaussianDiag pr;
        for (int i = 0; i < k; ++i) {
          pr.mean.push_back(rng.uniform(-2, 2));
          pr.logvar.push_back(rng.uniform(-1.5, 1.5));
        }
        const int d = 4;
        Tensor ff({(std::size_t)k, (std::size_t)d});
        for (auto& x : ff.v) x = rng.uniform(-1, 1);
        std::vector<double> x(d), mask(d);
        for (auto& xi : x) xi = rng.uniform(-3, 3);
        for (auto& mi : mask) mi = rng.uniform() < 0.7 ? 1.0 : 0.0;
        const double s0 = rng.uniform(0.05, 0.5);
        GaussianDiag got = conjugate_weight_update(pr, ff, x, mask, s0);
        OraclePosterior want = conjugate_oracle(pr, ff, x, mask, s0);
        bool observed = false;
        for (double mi : mask) observed |= mi != 0.0;
        if (!observed) continue;
        for (int i = 0; i < k; ++i) {
          REQUIRE(std::abs(got.mean[i] - want.mean[i]) < 1e-8);
          REQUIRE(std::abs(std::exp(got.logvar[i]) - want.var[i]) < 1e-8);
        }
      }
    }
  }
  SECTION("invalid arguments are rejected") {
    std::vector<double> x = {1.0, -2.0, 0.5}, mask = {1, 1, 1};
    REQUIRE_THROWS_AS(conjugate_weight_update(prior, f, x, mask, 0.0), config_error);
    std::vector<double> short_x = {1.0};
    REQUIRE_THROWS_AS(conjugate_weight_update(prior, f, short_x, mask, 0.1), shape_error);
  }
}

TEST_CASE("nrmse") {
  Tensor truth({1, 2}, {3.0, 4.0});
  SECTION("exact prediction gives zero") { REQUIRE(nrmse(truth, truth) == 0.0); }
  SECTION("zero prediction gives 100") {
    Tensor zero({1, 2}, {0.0, 0.0});
    REQUIRE(nrmse(zero, truth) == Catch::Approx(100.0).margin(1e-12));
  }
  SECTION("(3,0) against (3,4) gives 80") {
    Tensor pred({1, 2}, {3.0, 0.0});
    REQUIRE(nrmse(pred, truth) == Catch::Approx(80.0).margin(1e-12));
  }
  SECTION("scale equivariance") {
    Rng rng(31);
    Tensor p({3, 4}), t({3, 4});
    for (auto& x : p.v) x = rng.uniform(-2, 2);
    for (auto& x : t.v) x = rng.uniform(-2, 2);
    const double base = nrmse(p, t);
    for (double c : {0.5, -3.0, 100.0}) {
      Tensor ps = p, ts = t;
      for (auto& x : ps.v) x *= c;
      for (auto& x : ts.v) x *= c;
      REQUIRE(nrmse(ps, ts) == Catch::Approx(base).margin(1e-9));
    }
  }
  SECTION("masked cells are excluded") {
    Tensor pred({1, 2}, {3.0, 999.0});
    Tensor mask({1, 2}, {1.0, 0.0});
    REQUIRE(nrmse(pred, truth, &mask) == 0.0);
  }
  SECTION("degenerate inputs are rejected") {
    Tensor zero_mask = Tensor::zeros({1, 2});
    REQUIRE_THROWS_AS(nrmse(truth, truth, &zero_mask), numeric_error);
    Tensor zeros({1, 2}, {0.0, 0.0});
    REQUIRE_THROWS_AS(nrmse(zeros, zeros), numeric_error);
  }
}

TEST_CASE("state accuracy") {
  SECTION("identical sequences score 100") {
    std::vector<int> a = {1, 2, 1, 2, 2};
    REQUIRE(state_accuracy(a, a, 2).accuracy_pct == 100.0);
  }
  SECTION("a label swap still scores 100") {
    std::vector<int> ref = {1, 2, 1, 2, 2};
    std::vector<int> inf = {2, 1, 2, 1, 1};
    auto al = state_accuracy(inf, ref, 2);
    REQUIRE(al.accuracy_pct == 100.0);
    REQUIRE(al.perm == std::vector<int>{2, 1});
  }
  SECTION("one mismatch in four scores 75") {
    std::vector<int> ref = {1, 1, 2, 2};
    std::vector<int> inf = {1, 2, 2, 2};
    REQUIRE(state_accuracy(inf, ref, 2).accuracy_pct == 75.0);
  }
  SECTION("invariant under any relabeling of the inferred sequence") {
    Rng rng(71);
    std::vector<int> ref(40), inf(40);
    for (auto& x : ref) x = 1 + static_cast<int>(rng.next_u64() % 3);
    for (auto& x : inf) x = 1 + static_cast<int>(rng.next_u64() % 3);
    const double base = state_accuracy(inf, ref, 3).accuracy_pct;
    const int relabel[3] = {3, 1, 2};
    std::vector<int> shuffled(40);
    for (int i = 0; i < 40; ++i) shuffled[i] = relabel[inf[i] - 1];
    REQUIRE(state_accuracy(shuffled, ref, 3).accuracy_pct == base);
  }
  SECTION("S above 8 is rejected") {
    std::vector<int> a = {1};
    REQUIRE_THROWS_AS(state_accuracy(a, a, 9), config_error);
  }
}

TEST_CASE("rolling without assimilation degenerates to the long-term forecast") {
  TrainedModel m = tiny_model(1001);
  RollState init = tiny_init(m, 5);
  const int h = 6;
  Tensor y({(std::size_t)h, 3});
  Rng rng(6);
  for (auto& x : y.v) x = rng.uniform(-1, 1);
  Tensor mask = Tensor::full(y.shape, 1.0);

  ForecastOptions opts;
  opts.assimilate = false;
  opts.seed = 9;
  ForecastResult rolled = short_term_rolling(m, y, mask, &init, opts);

  ForecastOptions lopts;
  lopts.seed = 9;
  ForecastResult freerun = long_term(m, init, h, lopts);

  REQUIRE(rolled.pred.v == freerun.pred.v);
  REQUIRE(rolled.states.size() == freerun.states.size());
  for (std::size_t i = 0; i < rolled.states.size(); ++i)
    REQUIRE(rolled.states[i].p == freerun.states[i].p);
}

TEST_CASE("long-term forecast") {
  TrainedModel m = tiny_model(2002);
  RollState init = tiny_init(m, 15);

  SECTION("single noise-suppressed rollout is deterministic with zero spread") {
    ForecastOptions opts;
    opts.n_rollouts = 1;
    opts.suppress_noise = true;
    ForecastResult a = long_term(m, init, 8, opts);
    ForecastResult b = long_term(m, init, 8, opts);
    REQUIRE(a.pred.v == b.pred.v);
    for (double s : a.stddev.v) REQUIRE(s == 0.0);
  }
  SECTION("sampled rollouts keep the state path on the simplex") {
    ForecastOptions opts;
    opts.n_rollouts = 7;
    opts.seed = 21;
    ForecastResult r = long_term(m, init, 12, opts);
    REQUIRE(r.states.size() == 12);
    for (const auto& pi : r.states) pi.validate();
    for (double s : r.stddev.v) REQUIRE(s >= 0.0);
    REQUIRE(r.pred.all_finite());
  }
  SECTION("horizon below one is rejected") {
    REQUIRE_THROWS_AS(long_term(m, init, 0, {}), config_error);
  }
  SECTION("short history is rejected") {
    RollState bad;
    bad.w_hist.push_back({0.0, 0.0});
    bad.pi = StateBelief::uniform(2);
    REQUIRE_THROWS_AS(long_term(m, bad, 4, {}), config_error);
  }
}

TEST_CASE("rolling forecast with prefix initialization") {
  TrainedModel m = tiny_model(3003);
  const int t_len = 12;
  Tensor y({(std::size_t)t_len, 3});
  Rng rng(13);
  for (auto& x : y.v) x = rng.uniform(-1, 1);
  Tensor mask = Tensor::full(y.shape, 1.0);
  ForecastResult r = short_term_rolling(m, y, mask, nullptr, {});
  REQUIRE(r.warmup == m.cfg.max_lag());
  REQUIRE(r.pred.rows() == y.rows());
  REQUIRE(r.states.size() == y.rows());
  REQUIRE(std::isfinite(r.nrmse_pct));
  for (const auto& pi : r.states) pi.validate();
}

TEST_CASE("repeat-last-period baseline") {
  Tensor hist({6, 2}, {1, 10, 2, 20, 3, 30, 4, 40, 5, 50, 6, 60});
  Tensor tiled = repeat_last_period(hist, 3, 5);
  REQUIRE(tiled.at(0, 0) == 4.0);
  REQUIRE(tiled.at(1, 0) == 5.0);
  REQUIRE(tiled.at(2, 1) == 60.0);
  REQUIRE(tiled.at(3, 0) == 4.0);
  REQUIRE(tiled.at(4, 1) == 50.0);
  REQUIRE_THROWS_AS(repeat_last_period(hist, 9, 3), config_error);
}
