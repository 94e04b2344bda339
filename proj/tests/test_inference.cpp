#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "dsarf/inference.hpp"
#include "elbo_oracle.hpp"
#include "test_util.hpp"

using namespace dsarf;

TEST_CASE("diagonal gaussian KL") {
  SECTION("identical distributions give zero") {
    GaussianDiag g({0.3, -1.2}, {0.1, -0.5});
    REQUIRE(kl_gaussian_diag(g, g) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("N(1,1) vs N(0,1) in 1-D is 0.5") {
    GaussianDiag q({1.0}, {0.0}), p({0.0}, {0.0});
    REQUIRE(kl_gaussian_diag(q, p) == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("diagonal KL is the sum of per-coordinate KLs") {
    Rng rng(5);
    GaussianDiag q, p;
    for (int i = 0; i < 6; ++i) {
      q.mean.push_back(rng.uniform(-2, 2));
      q.logvar.push_back(rng.uniform(-1, 1));
      p.mean.push_back(rng.uniform(-2, 2));
      p.logvar.push_back(rng.uniform(-1, 1));
    }
    double sum = 0.0;
    for (int i = 0; i < 6; ++i)
      sum += kl_gaussian_diag(GaussianDiag({q.mean[i]}, {q.logvar[i]}),
                              GaussianDiag({p.mean[i]}, {p.logvar[i]}));
    REQUIRE(kl_gaussian_diag(q, p) == Catch::Approx(sum).margin(1e-12));
  }
  SECTION("nonnegative on random inputs") {
    Rng rng(17);
    for (int rep = 0; rep < 200; ++rep) {
      GaussianDiag q, p;
      for (int i = 0; i < 3; ++i) {
        q.mean.push_back(rng.uniform(-3, 3));
        q.logvar.push_back(rng.uniform(-2, 2));
        p.mean.push_back(rng.uniform(-3, 3));
        p.logvar.push_back(rng.uniform(-2, 2));
      }
      REQUIRE(kl_gaussian_diag(q, p) >= -1e-9);
    }
  }
}

TEST_CASE("categorical KL") {
  SECTION("identical beliefs give zero") {
    StateBelief q({0.2, 0.3, 0.5});
    REQUIRE(kl_categorical(q, q) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("(0.5,0.5) vs (0.25,0.75)") {
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    const double got = kl_categorical(StateBelief({0.5, 0.5}), StateBelief({0.25, 0.75}));
    REQUIRE(got == Catch::Approx(expected).margin(1e-12));
    REQUIRE(std::abs(got - 0.14384) < 1e-5);
  }
  SECTION("degenerate vs uniform is ln 2") {
    const double got = kl_categorical(StateBelief({1.0, 0.0}), StateBelief({0.5, 0.5}));
    REQUIRE(got == Catch::Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("nonnegative up to clamp error") {
    Rng rng(23);
    for (int rep = 0; rep < 200; ++rep) {
      std::vector<double> a(4), b(4);
      for (auto& x : a) x = rng.uniform(0.0, 5.0);
      for (auto& x : b) x = rng.uniform(0.0, 5.0);
      double za = std::accumulate(a.begin(), a.end(), 0.0);
      double zb = std::accumulate(b.begin(), b.end(), 0.0);
      for (auto& x : a) x /= za;
      for (auto& x : b) x /= zb;
      REQUIRE(kl_categorical(StateBelief(a), StateBelief(b)) >= -1e-9);
    }
  }
}

TEST_CASE("reparameterized sampling") {
  GaussianDiag g({0.5, -1.0, 2.0}, {0.2, -0.4, 0.0});
  SECTION("zero noise returns the mean") {
    std::vector<double> zero(3, 0.0);
    REQUIRE(reparam_sample(g, zero) == g.mean);
  }
  SECTION("unit variance adds the noise") {
    GaussianDiag u({1.0, 2.0}, {0.0, 0.0});
    std::vector<double> n = {0.3, -0.7};
    auto s = reparam_sample(u, n);
    REQUIRE(s[0] == Catch::Approx(1.3).margin(1e-15));
    REQUIRE(s[1] == Catch::Approx(1.3).margin(1e-15));
  }
  SECTION("gradients w.r.t. mean and logvar") {
    std::vector<double> noise = {0.7, -0.2, 1.1};
    auto f = [&](const std::vector<double>& params) {
      GaussianDiag gg({params[0], params[1], params[2]}, {params[3], params[4], params[5]});
      auto s = reparam_sample(gg, noise);
      return std::accumulate(s.begin(), s.end(), 0.0);
    };
    std::vector<double> x = {0.5, -1.0, 2.0, 0.2, -0.4, 0.0};
    auto fd = testutil::central_diff(f, x);
    for (int i = 0; i < 3; ++i) REQUIRE(fd[i] == Catch::Approx(1.0).margin(1e-6));
    for (int i = 0; i < 3; ++i) {
      const double analytic = 0.5 * std::exp(0.5 * x[3 + i]) * noise[i];
      REQUIRE(testutil::rel_err(fd[3 + i], analytic) < 1e-4);
    }
  }
}

TEST_CASE("state posterior") {
  SECTION("single state is certain") {
    ModelConfig cfg;
    cfg.k = 2;
    cfg.s = 1;
    cfg.d = 3;
    cfg.lags = {1};
    auto th = GenerativeParams::init(cfg, 7);
    std::vector<double> w = {0.1, -0.2};
    auto pi = state_posterior(StateBelief({1.0}), w, {{0.0, 0.0}}, th);
    REQUIRE(pi.size() == 1);
    REQUIRE(pi.p[0] == Catch::Approx(1.0).margin(1e-15));
  }
  SECTION("bayes arithmetic: prior (.5,.5), likelihood (.2,.6) -> (.25,.75)") {
    auto pi = posterior_from_logdensity(StateBelief({0.5, 0.5}),
                                        std::vector<double>{std::log(0.2), std::log(0.6)});
    REQUIRE(pi.p[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(pi.p[1] == Catch::Approx(0.75).margin(1e-12));
  }
  SECTION("equal densities reproduce the transition prior") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> probs(3);
      for (auto& x : probs) x = rng.uniform(0.05, 1.0);
      double z = std::accumulate(probs.begin(), probs.end(), 0.0);
      for (auto& x : probs) x /= z;
      StateBelief prior(probs);
      const double c = rng.uniform(-5.0, 5.0);
      auto post = posterior_from_logdensity(prior, std::vector<double>{c, c, c});
      REQUIRE(testutil::max_abs_diff(post.p, prior.p) < 1e-12);
      post.validate();
    }
  }
  SECTION("identical per-state parameters give a uniform posterior") {
    ModelConfig cfg;
    cfg.k = 1;
    cfg.s = 2;
    cfg.d = 2;
    cfg.lags = {1};
    auto th = GenerativeParams::init(cfg, 11);
    th.states[1] = th.states[0];  // equal likelihoods for every w
    th.trans_logits = Tensor::zeros({2, 2});
    std::vector<double> w = {0.4};
    auto pi = state_posterior(StateBelief({0.9, 0.1}), w, {{-0.3}}, th);
    REQUIRE(pi.p[0] == Catch::Approx(0.5).margin(1e-12));
  }
}

TEST_CASE("KL annealing schedule") {
  TrainConfig cfg;
  REQUIRE(anneal(0, cfg) == Catch::Approx(0.01).margin(1e-15));
  REQUIRE(anneal(100, cfg) == 1.0);
  REQUIRE(anneal(250, cfg) == 1.0);
  REQUIRE(anneal(50, cfg) == Catch::Approx(0.505).margin(1e-12));
}

namespace {

struct Instance {
  Dataset ds;
  GenerativeParams theta;
  VariationalParams phi;
};

Instance make_instance(int n, int t, int d, int k, int s, std::vector<int> lags,
                       std::uint64_t seed, double missing_prob = 0.15) {
  ModelConfig cfg;
  cfg.k = k;
  cfg.s = s;
  cfg.d = d;
  cfg.lags = std::move(lags);
  cfg.hidden = 3;
  cfg.z_dim = 2;
  cfg.sigma0 = 0.3;
  Instance inst;
  Rng rng(derive_seed(seed, 900));
  inst.ds.x = Tensor({(std::size_t)n, (std::size_t)t, (std::size_t)d});
  inst.ds.mask = Tensor::full(inst.ds.x.shape, 1.0);
  for (auto& x : inst.ds.x.v) x = rng.uniform(-1.5, 1.5);
  for (auto& m : inst.ds.mask.v)
    if (rng.uniform() < missing_prob) m = 0.0;
  inst.ds.zero_masked();
  inst.theta = GenerativeParams::init(cfg, derive_seed(seed, 901));
  TrainConfig tc;
  tc.seed = derive_seed(seed, 902);
  inst.phi = VariationalParams::init(n, t, cfg, tc);
  // roughen the variational parameters so no term degenerates
  Rng r2(derive_seed(seed, 903));
  for (auto& x : inst.phi.w_mean.v) x = r2.uniform(-0.8, 0.8);
  for (auto& x : inst.phi.w_logvar.v) x = r2.uniform(-2.0, -0.5);
  for (auto& x : inst.phi.s0_logits.v) x = r2.uniform(-1.0, 1.0);
  for (auto& x : inst.phi.z_mean.v) x = r2.uniform(-0.8, 0.8);
  for (auto& x : inst.phi.z_logvar.v) x = r2.uniform(-2.0, -0.5);
  for (auto& x : inst.phi.f_mean.v) x = r2.uniform(-0.8, 0.8);
  for (auto& x : inst.phi.f_logvar.v) x = r2.uniform(-2.0, -0.5);
  return inst;
}

std::vector<Tensor*> all_tensors(GenerativeParams& th, VariationalParams& phi) {
  std::vector<Tensor*> out;
  th.for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
  phi.for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace

TEST_CASE("elbo matches the straight-line oracle") {
  SECTION("fixed tiny instance N=1 T=4 D=3 K=2 S=2 lags {1}") {
    Instance inst = make_instance(1, 4, 3, 2, 2, {1}, 42);
    Batch b{&inst.ds, {0}, 1.0};
    const double beta = 0.7;
    const std::uint64_t seed = 1234;
    ElboBreakdown got = elbo(b, inst.theta, inst.phi, beta, seed);
    oracle::Terms want = oracle::eval(inst.ds, {0}, 1.0, inst.theta, inst.phi, beta, seed);
    REQUIRE(std::abs(got.reconstruction - want.rec) < 1e-10);
    REQUIRE(std::abs(got.initial_prior - want.init) < 1e-10);
    REQUIRE(std::abs(got.state_kl - want.state) < 1e-10);
    REQUIRE(std::abs(got.weight_kl - want.weight) < 1e-10);
    REQUIRE(std::abs(got.factor - want.factor) < 1e-10);
    REQUIRE(std::abs(got.total - want.total()) < 1e-10);
  }
  SECTION("batched instance with scale and sparse lags") {
    Instance inst = make_instance(3, 6, 2, 2, 3, {1, 3}, 43);
    Batch b{&inst.ds, {0, 2}, 1.5};
    ElboBreakdown got = elbo(b, inst.theta, inst.phi, 0.35, 99);
    oracle::Terms want = oracle::eval(inst.ds, {0, 2}, 1.5, inst.theta, inst.phi, 0.35, 99);
    REQUIRE(std::abs(got.total - want.total()) < 1e-10);
    REQUIRE(std::abs(got.weight_kl - want.weight) < 1e-10);
    REQUIRE(std::abs(got.state_kl - want.state) < 1e-10);
  }
}

TEST_CASE("elbo breakdown properties") {
  Instance inst = make_instance(2, 5, 3, 2, 2, {1, 2}, 77);
  Batch b{&inst.ds, {0, 1}, 1.0};
  SECTION("components sum to the total") {
    ElboBreakdown bd = elbo(b, inst.theta, inst.phi, 0.6, 5);
    const double sum =
        bd.reconstruction + bd.initial_prior + bd.state_kl + bd.weight_kl + bd.factor;
    REQUIRE(std::abs(sum - bd.total) < 1e-9);
  }
  SECTION("beta = 0 leaves only the reconstruction term") {
    ElboBreakdown bd = elbo(b, inst.theta, inst.phi, 0.0, 5);
    REQUIRE(bd.total == bd.reconstruction);
    REQUIRE(bd.initial_prior == 0.0);
    REQUIRE(bd.state_kl == 0.0);
    REQUIRE(bd.weight_kl == 0.0);
    REQUIRE(bd.factor == 0.0);
  }
  SECTION("priors matching the posteriors zero every KL term") {
    Instance id = make_instance(2, 5, 3, 2, 2, {1, 2}, 78, 0.0);
    // all generative nets to zero: every temporal prior becomes N(0, I)
    id.theta.for_each_tensor([](const std::string&, Tensor& t) {
      std::fill(t.v.begin(), t.v.end(), 0.0);
    });
    id.phi.for_each_tensor([](const std::string&, Tensor& t) {
      std::fill(t.v.begin(), t.v.end(), 0.0);
    });
    ElboBreakdown bd = elbo(Batch{&id.ds, {0, 1}, 1.0}, id.theta, id.phi, 0.9, 5);
    REQUIRE(std::abs(bd.initial_prior) < 1e-12);
    REQUIRE(std::abs(bd.state_kl) < 1e-12);
    REQUIRE(std::abs(bd.weight_kl) < 1e-12);
    REQUIRE(std::abs(bd.factor) < 1e-12);
    REQUIRE(bd.total == Catch::Approx(bd.reconstruction).margin(1e-12));
  }
  SECTION("non-finite input is reported with the failing term") {
    Instance bad = make_instance(1, 4, 2, 1, 2, {1}, 79);
    bad.ds.x.v[5] = 1e200;  // explodes the squared residual
    REQUIRE_THROWS_WITH(elbo(Batch{&bad.ds, {0}, 1.0}, bad.theta, bad.phi, 1.0, 5),
                        Catch::Matchers::ContainsSubstring("reconstruction"));
  }
}

TEST_CASE("full elbo gradients match central finite differences") {
  for (std::uint64_t seed : {301ULL, 302ULL, 303ULL}) {
    Instance inst = make_instance(2, 4, 2, 2, 2, {1, 2}, seed);
    Batch b{&inst.ds, {0, 1}, 1.0};
    const double beta = 0.8;
    const std::uint64_t eseed = derive_seed(seed, 1);

    Tape tp;
    detail::ElboOptions opt;
    opt.beta = beta;
    opt.seed = eseed;
    detail::ElboNodes en = detail::build_elbo(tp, b, inst.theta, inst.phi, opt);
    tp.backward_inplace(en.total);
    std::map<std::string, Tensor> ad;
    for (const auto& [name, node] : en.bound) ad[name] = tp.leaf_grad(node);

    auto tensors = all_tensors(inst.theta, inst.phi);
    std::vector<std::string> names;
    inst.theta.for_each_tensor([&](const std::string& n, Tensor&) { names.push_back(n); });
    inst.phi.for_each_tensor([&](const std::string& n, Tensor&) { names.push_back(n); });

    double worst = 0.0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
      Tensor& t = *tensors[ti];
      const Tensor& g = ad.at(names[ti]);
      for (std::size_t j = 0; j < t.v.size(); ++j) {
        const double x0 = t.v[j];
        const double h = 1e-5;
        t.v[j] = x0 + h;
        const double fp = elbo(b, inst.theta, inst.phi, beta, eseed).total;
        t.v[j] = x0 - h;
        const double fm = elbo(b, inst.theta, inst.phi, beta, eseed).total;
        t.v[j] = x0;
        worst = std::max(worst, testutil::rel_err((fp - fm) / (2 * h), g.v[j]));
      }
    }
    REQUIRE(worst < 1e-4);
  }
}

namespace {
Dataset smooth_dataset(int n, int t, int d, std::uint64_t seed) {
  Dataset ds;
  ds.x = Tensor({(std::size_t)n, (std::size_t)t, (std::size_t)d});
  ds.mask = Tensor::full(ds.x.shape, 1.0);
  Rng rng(seed);
  std::vector<double> phase(n);
  for (auto& p : phase) p = rng.uniform(0, 6.28);
  for (int s = 0; s < n; ++s)
    for (int tt = 0; tt < t; ++tt)
      for (int dd = 0; dd < d; ++dd)
        ds.x.at3(s, tt, dd) = std::sin(0.3 * tt + phase[s] + dd) +
                              0.7 * std::cos(0.11 * tt + dd * dd) + 0.05 * rng.normal();
  return ds;
}
}  // namespace

TEST_CASE("training improves the objective and is deterministic") {
  Dataset ds = smooth_dataset(6, 30, 4, 55);
  ModelConfig mcfg;
  mcfg.k = 2;
  mcfg.s = 2;
  mcfg.lags = {1};
  mcfg.hidden = 8;
  TrainConfig tcfg;
  tcfg.epochs = 30;
  tcfg.seed = 3;
  tcfg.anneal_epochs = 10;

  TrainResult a = train(ds, mcfg, tcfg);
  REQUIRE(a.model.curve.size() == 30);
  REQUIRE(a.model.curve.back() > a.model.curve.front());

  TrainResult b = train(ds, mcfg, tcfg);
  REQUIRE(a.model.curve == b.model.curve);
  REQUIRE(a.model.theta.trans_logits.v == b.model.theta.trans_logits.v);
  REQUIRE(a.model.phi.w_mean.v == b.model.phi.w_mean.v);
}

TEST_CASE("masked cells never influence parameter updates") {
  Dataset clean = smooth_dataset(3, 20, 3, 66);
  Rng rng(8);
  for (auto& m : clean.mask.v)
    if (rng.uniform() < 0.4) m = 0.0;
  Dataset junk = clean;
  Rng rj(9);
  for (std::size_t i = 0; i < junk.x.v.size(); ++i)
    if (junk.mask.v[i] == 0.0) junk.x.v[i] = rj.uniform(-1e6, 1e6);
  clean.zero_masked();
  // `junk` keeps arbitrary values in its masked cells on purpose

  ModelConfig mcfg;
  mcfg.k = 2;
  mcfg.s = 2;
  mcfg.lags = {1};
  mcfg.hidden = 6;
  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.seed = 12;

  TrainResult a = train(clean, mcfg, tcfg);
  TrainResult b = train(junk, mcfg, tcfg);
  bool equal = true;
  a.model.theta.for_each_tensor([&](const std::string& name, Tensor& t) {
    Tensor* other = nullptr;
    b.model.theta.for_each_tensor([&](const std::string& n2, Tensor& t2) {
      if (n2 == name) other = &t2;
    });
    if (t.v != other->v) equal = false;
  });
  REQUIRE(equal);
  REQUIRE(a.model.phi.w_mean.v == b.model.phi.w_mean.v);
  REQUIRE(a.model.curve == b.model.curve);
}

TEST_CASE("new-sequence inference contract") {
  Instance inst = make_instance(1, 8, 3, 2, 2, {1}, 500, 0.0);
  Tensor f({2, 3}, {0.4, -0.2, 0.8, 0.1, 0.9, -0.5});
  Tensor x({8, 3});
  Tensor mask = Tensor::full(x.shape, 1.0);
  Rng rng(77);
  for (auto& v : x.v) v = rng.uniform(-1, 1);

  TrainConfig tcfg;
  tcfg.seed = 21;
  const Tensor theta_before = inst.theta.trans_logits;
  const Tensor f_before = f;

  SECTION("zero steps return the initialized variational parameters") {
    NewSeqInference r = infer_new_sequence(x, mask, inst.theta, f, 0, tcfg);
    VariationalParams expect = VariationalParams::init(1, 8, inst.theta.cfg, tcfg);
    REQUIRE(r.phi.w_mean.v == expect.w_mean.v);
    REQUIRE(r.phi.w_logvar.v == expect.w_logvar.v);
    REQUIRE(r.phi.s0_logits.v == expect.s0_logits.v);
    REQUIRE(r.path.size() == 8);
  }
  SECTION("theta and F stay bit-identical while the objective improves") {
    NewSeqInference r = infer_new_sequence(x, mask, inst.theta, f, 40, tcfg);
    REQUIRE(inst.theta.trans_logits.v == theta_before.v);
    REQUIRE(f.v == f_before.v);
    REQUIRE(r.curve.back() > r.curve.front());
    for (const auto& pi : r.path) pi.validate();
  }
}
