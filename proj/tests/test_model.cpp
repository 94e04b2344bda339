#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "dsarf/model.hpp"
#include "dsarf/random.hpp"
#include "test_util.hpp"

using namespace dsarf;

namespace {
ModelConfig small_cfg(int k, int s, int d, std::vector<int> lags, int hidden = 4) {
  ModelConfig cfg;
  cfg.k = k;
  cfg.s = s;
  cfg.d = d;
  cfg.lags = std::move(lags);
  cfg.hidden = hidden;
  cfg.z_dim = 2;
  return cfg;
}

// +-1e3 saturates the sigmoid to exactly 1 or 0 in double precision
void pin_gate(StateParams& sp, double logit) {
  std::fill(sp.gate_w2.v.begin(), sp.gate_w2.v.end(), 0.0);
  std::fill(sp.gate_b2.v.begin(), sp.gate_b2.v.end(), logit);
}

// straight-line evaluation of the multi-head MLP mean path
std::vector<double> mlp_mean_path(const StateParams& sp, const ModelConfig& cfg,
                                  const std::vector<std::vector<double>>& lagged) {
  std::vector<double> h(cfg.hidden, 0.0);
  for (std::size_t li = 0; li < lagged.size(); ++li)
    for (int j = 0; j < cfg.hidden; ++j) {
      double a = sp.head_b[li].v[j];
      for (int i = 0; i < cfg.k; ++i) a += lagged[li][i] * sp.head_w[li].at(i, j);
      h[j] += std::tanh(a);
    }
  std::vector<double> mean(cfg.k);
  for (int j = 0; j < cfg.k; ++j) {
    double a = sp.mean_b.v[j];
    for (int i = 0; i < cfg.hidden; ++i) a += h[i] * sp.mean_w.at(i, j);
    mean[j] = a;
  }
  return mean;
}

std::vector<double> var_path(const StateParams& sp, const ModelConfig& cfg,
                             const std::vector<std::vector<double>>& lagged) {
  std::vector<double> lin(cfg.k);
  for (int j = 0; j < cfg.k; ++j) lin[j] = sp.var_b.v[j];
  for (std::size_t li = 0; li < lagged.size(); ++li)
    for (int j = 0; j < cfg.k; ++j)
      for (int i = 0; i < cfg.k; ++i) lin[j] += lagged[li][i] * sp.var_a[li].at(i, j);
  return lin;
}
}  // namespace

TEST_CASE("transition prior") {
  SECTION("strong diagonal logits act as identity on simplex corners") {
    auto th = GenerativeParams::init(small_cfg(1, 2, 2, {1}), 1);
    th.trans_logits = Tensor({2, 2}, {50.0, 0.0, 0.0, 50.0});
    auto out = transition_prior(StateBelief({1.0, 0.0}), th);
    REQUIRE(out.p[0] > 1.0 - 1e-9);
    REQUIRE(out.p[1] < 1e-9);
  }
  SECTION("equal columns map any belief to the same output") {
    auto th = GenerativeParams::init(small_cfg(1, 3, 2, {1}), 2);
    th.trans_logits = Tensor({3, 3}, {0.4, 0.4, 0.4, -1.0, -1.0, -1.0, 2.2, 2.2, 2.2});
    auto expected = softmax(std::vector<double>{0.4, -1.0, 2.2});
    auto out = transition_prior(StateBelief({0.2, 0.5, 0.3}), th);
    REQUIRE(testutil::max_abs_diff(out.p, expected) < 1e-12);
    auto out2 = transition_prior(StateBelief({1.0, 0.0, 0.0}), th);
    REQUIRE(testutil::max_abs_diff(out2.p, expected) < 1e-12);
    th.trans_logits = Tensor::zeros({3, 3});
    auto uni = transition_prior(StateBelief({0.7, 0.1, 0.2}), th);
    for (double p : uni.p) REQUIRE(p == Catch::Approx(1.0 / 3).margin(1e-14));
  }
  SECTION("logits (0, ln 3) give (0.25, 0.75)") {
    auto th = GenerativeParams::init(small_cfg(1, 2, 2, {1}), 3);
    const double l3 = std::log(3.0);
    th.trans_logits = Tensor({2, 2}, {0.0, 0.0, l3, l3});
    auto out = transition_prior(StateBelief({0.6, 0.4}), th);
    REQUIRE(out.p[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(out.p[1] == Catch::Approx(0.75).margin(1e-12));
  }
  SECTION("output is on the simplex for random inputs") {
    auto th = GenerativeParams::init(small_cfg(1, 4, 2, {1}), 4);
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
      for (auto& x : th.trans_logits.v) x = rng.uniform(-3, 3);
      std::vector<double> p(4);
      double z = 0;
      for (auto& x : p) {
        x = rng.uniform(0.01, 1.0);
        z += x;
      }
      for (auto& x : p) x /= z;
      auto out = transition_prior(StateBelief(p), th);
      out.validate();
    }
  }
}

TEST_CASE("temporal prior mean paths") {
  SECTION("gate shut, identity VAR, single lag: mean is w_{t-1} exactly") {
    ModelConfig cfg = small_cfg(2, 1, 2, {1});
    auto th = GenerativeParams::init(cfg, 21);
    StateParams& sp = th.states[0];
    pin_gate(sp, -1e3);
    sp.var_a[0] = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
    std::fill(sp.var_b.v.begin(), sp.var_b.v.end(), 0.0);
    std::vector<double> w = {0.37, -1.94};
    GaussianDiag g = temporal_prior({w}, 0, th);
    REQUIRE(g.mean == w);
  }
  SECTION("gate open: mean equals the MLP head output exactly") {
    ModelConfig cfg = small_cfg(2, 2, 2, {1, 2});
    auto th = GenerativeParams::init(cfg, 22);
    pin_gate(th.states[1], 1e3);
    std::vector<std::vector<double>> lagged = {{0.4, -0.1}, {1.2, 0.8}};
    GaussianDiag g = temporal_prior(lagged, 1, th);
    auto want = mlp_mean_path(th.states[1], cfg, lagged);
    REQUIRE(testutil::max_abs_diff(g.mean, want) < 1e-15);
  }
  SECTION("gate at one half blends the two paths equally") {
    ModelConfig cfg = small_cfg(2, 1, 2, {1, 3});
    auto th = GenerativeParams::init(cfg, 23);
    pin_gate(th.states[0], 0.0);  // sigmoid(0) = 1/2
    std::vector<std::vector<double>> lagged = {{-0.6, 0.2}, {0.9, -1.1}};
    GaussianDiag g = temporal_prior(lagged, 0, th);
    auto mlp = mlp_mean_path(th.states[0], cfg, lagged);
    auto lin = var_path(th.states[0], cfg, lagged);
    for (int j = 0; j < cfg.k; ++j)
      REQUIRE(g.mean[j] == Catch::Approx(0.5 * (mlp[j] + lin[j])).margin(1e-14));
  }
  SECTION("gate shut with zero bias: superposition per lag slot") {
    ModelConfig cfg = small_cfg(2, 1, 2, {1, 2});
    auto th = GenerativeParams::init(cfg, 24);
    pin_gate(th.states[0], -1e3);
    std::fill(th.states[0].var_b.v.begin(), th.states[0].var_b.v.end(), 0.0);
    Rng rng(31);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> wa = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      std::vector<double> wb = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      std::vector<double> wf = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
      std::vector<double> mix(2);
      for (int j = 0; j < 2; ++j) mix[j] = a * wa[j] + b * wb[j];
      auto fm = temporal_prior({mix, wf}, 0, th).mean;
      auto fa = temporal_prior({wa, wf}, 0, th).mean;
      auto fb = temporal_prior({wb, wf}, 0, th).mean;
      auto f0 = temporal_prior({{0.0, 0.0}, wf}, 0, th).mean;
      for (int j = 0; j < 2; ++j) {
        const double lhs = fm[j] - f0[j];
        const double rhs = a * (fa[j] - f0[j]) + b * (fb[j] - f0[j]);
        REQUIRE(lhs == Catch::Approx(rhs).margin(1e-12));
      }
    }
  }
  SECTION("variance is strictly positive and finite on random inputs") {
    ModelConfig cfg = small_cfg(3, 2, 2, {1, 2});
    auto th = GenerativeParams::init(cfg, 25);
    Rng rng(32);
    for (int rep = 0; rep < 30; ++rep) {
      std::vector<std::vector<double>> lagged = {
          {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)},
          {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)}};
      GaussianDiag g = temporal_prior(lagged, rep % 2, th);
      for (double lv : g.logvar) {
        REQUIRE(std::isfinite(lv));
        REQUIRE(std::exp(lv) > 0.0);
      }
    }
  }
  SECTION("lag count mismatch is rejected") {
    auto th = GenerativeParams::init(small_cfg(2, 1, 2, {1, 2}), 26);
    REQUIRE_THROWS_AS(temporal_prior({{0.0, 0.0}}, 0, th), shape_error);
  }
}

TEST_CASE("spatial decoder") {
  SECTION("zero weights: mean is the bias everywhere") {
    ModelConfig cfg = small_cfg(2, 1, 3, {1});
    auto th = GenerativeParams::init(cfg, 41);
    std::fill(th.decoder.mean_w.v.begin(), th.decoder.mean_w.v.end(), 0.0);
    std::fill(th.decoder.mean_b.v.begin(), th.decoder.mean_b.v.end(), 0.77);
    GaussianDiag g = spatial_decoder({0.5, -0.5}, th);
    REQUIRE(g.size() == 6);
    for (double m : g.mean) REQUIRE(m == Catch::Approx(0.77).margin(1e-15));
  }
  SECTION("distinct inputs give distinct means") {
    auto th = GenerativeParams::init(small_cfg(2, 1, 3, {1}), 42);
    auto a = spatial_decoder({0.1, 0.2}, th);
    auto b = spatial_decoder({-1.4, 0.9}, th);
    REQUIRE(testutil::max_abs_diff(a.mean, b.mean) > 1e-6);
  }
  SECTION("regression snapshot at a fixed seed") {
    ModelConfig cfg = small_cfg(2, 2, 3, {1});
    auto th = GenerativeParams::init(cfg, 424242);
    GaussianDiag g = spatial_decoder({0.3, -0.7}, th);
    const std::vector<double> mean = {
        -0.75839832692635245, -0.10927965045661536, 0.33469970448704034,
        -0.28941508760501733, 0.29904269467943145,  -0.15272930570228443};
    const std::vector<double> logvar = {
        -0.32747762068504177, -0.54293544499403068, 0.032700415517880999,
        -0.1024367284565533,  0.45383320722653614,  0.6804346298303996};
    REQUIRE(testutil::max_abs_diff(g.mean, mean) < 1e-14);
    REQUIRE(testutil::max_abs_diff(g.logvar, logvar) < 1e-14);
  }
}

TEST_CASE("masked observation log likelihood") {
  const double sigma0 = 0.25;
  Tensor w({4, 2}, {0.5, -1, 0.2, 0.8, 1.5, 0.1, -0.7, 0.9});
  Tensor f({2, 3}, {0.3, -0.6, 1.1, 0.7, 0.2, -0.4});
  Tensor x({4, 3});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t d = 0; d < 3; ++d) {
      double p = 0;
      for (std::size_t k = 0; k < 2; ++k) p += w.at(t, k) * f.at(k, d);
      x.at(t, d) = p;
    }
  Tensor mask = Tensor::full({4, 3}, 1.0);
  mask.at(1, 2) = 0.0;
  mask.at(3, 0) = 0.0;

  SECTION("exact reconstruction gives M times the normalizing constant") {
    const double ll = observation_loglik(x, mask, w, f, sigma0);
    const double expect = 10.0 * (-0.5 * std::log(2.0 * std::numbers::pi * sigma0 * sigma0));
    REQUIRE(ll == Catch::Approx(expect).margin(1e-12));
  }
  SECTION("an all-masked sequence contributes exactly zero") {
    Tensor none = Tensor::zeros({4, 3});
    REQUIRE(observation_loglik(x, none, w, f, sigma0) == 0.0);
  }
  SECTION("masked entries are inert bit for bit") {
    const double before = observation_loglik(x, mask, w, f, sigma0);
    Tensor x2 = x;
    x2.at(1, 2) = 1e9;
    x2.at(3, 0) = -123.456;
    REQUIRE(observation_loglik(x2, mask, w, f, sigma0) == before);
  }
  SECTION("moving an observed value off its mean strictly lowers the value") {
    double prev = observation_loglik(x, mask, w, f, sigma0);
    Tensor x2 = x;
    for (double step : {0.1, 0.5, 2.0, 10.0}) {
      x2.at(0, 0) = x.at(0, 0) + step;
      const double ll = observation_loglik(x2, mask, w, f, sigma0);
      REQUIRE(ll < prev);
      prev = ll;
    }
  }
  SECTION("invalid sigma0 is rejected") {
    REQUIRE_THROWS_AS(observation_loglik(x, mask, w, f, 0.0), config_error);
  }
}

TEST_CASE("model config validation") {
  ModelConfig cfg = small_cfg(2, 2, 3, {1, 2});
  REQUIRE_NOTHROW(cfg.validate());
  cfg.lags = {2, 1};
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg.lags = {1, 1};
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg.lags = {};
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
  cfg.lags = {1};
  cfg.sigma0 = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), config_error);
}
