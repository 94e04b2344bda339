#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "data.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace dsarf {

struct SyntheticBundle {
  Dataset data;                               // observations, fully observed
  Tensor true_weights;                        // {N, T, K_true}
  std::vector<std::vector<int>> true_states;  // per sequence, labels in {1..S}
  Tensor true_factors;                        // {K_true, D}
  std::uint64_t seed = 0;
  std::string system;
};

template <std::size_t N, class F>
std::array<double, N> rk4_step(const std::array<double, N>& y, double dt, F&& deriv) {
  auto scale_add = [](const std::array<double, N>& a, const std::array<double, N>& b, double c) {
    std::array<double, N> r;
    for (std::size_t i = 0; i < N; ++i) r[i] = a[i] + c * b[i];
    return r;
  };
  const auto k1 = deriv(y);
  const auto k2 = deriv(scale_add(y, k1, dt / 2));
  const auto k3 = deriv(scale_add(y, k2, dt / 2));
  const auto k4 = deriv(scale_add(y, k3, dt));
  std::array<double, N> out;
  for (std::size_t i = 0; i < N; ++i)
    out[i] = y[i] + dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  return out;
}

/// Projects a latent trajectory (T x K) to D dimensions: X = W F + noise,
/// F drawn once from U(-1, 1) unless overridden.
inline std::pair<Tensor, Tensor> project(const Tensor& latent, int d, double noise_std,
                                         std::uint64_t seed, const Tensor* f_override = nullptr) {
  const std::size_t t_len = latent.rows(), k = latent.cols();
  if (d < static_cast<int>(k)) throw config_error("project: D must be >= the latent dimension");
  Tensor f({k, static_cast<std::size_t>(d)});
  if (f_override) {
    if (!f_override->same_shape(f)) throw shape_error("project: override factor shape");
    f = *f_override;
  } else {
    Rng rng(derive_seed(seed, 0xFAC7));
    for (auto& x : f.v) x = rng.uniform(-1.0, 1.0);
  }
  Tensor x({t_len, static_cast<std::size_t>(d)});
  Rng noise(derive_seed(seed, 0x0B5E));
  for (std::size_t t = 0; t < t_len; ++t)
    for (int dd = 0; dd < d; ++dd) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += latent.at(t, j) * f.at(j, dd);
      x.at(t, dd) = s + (noise_std > 0.0 ? noise_std * noise.normal() : 0.0);
    }
  return {std::move(x), std::move(f)};
}

// ---------------------------------------------------------------------------
// Toy switching nonlinear VAR
// ---------------------------------------------------------------------------

/// Two-regime nonlinear VAR in K=2 latents with sticky Markov switching:
///   regime 1: w_t = 0.9 w_{t-1} + tanh(0.5 w_{t-2}) + 3 sin(w_{t-3}) + eps
///   regime 2: w_t = 0.9 w_{t-1} + tanh(0.2 w_{t-2}) +   sin(w_{t-3}) + eps
/// with eps ~ N(0, I), self-transition 0.95, uniform initial state, and
/// observations X = W F + nu, F ~ U(-1, 1), nu ~ N(0, 0.1^2 I).
inline SyntheticBundle gen_toy(int n = 200, int t = 200, int d = 10, std::uint64_t seed = 1) {
  if (n < 1 || t < 1) throw config_error("gen_toy: N and T must be >= 1");
  const int k = 2;
  SyntheticBundle out;
  out.seed = seed;
  out.system = "toy";
  out.true_weights = Tensor({(std::size_t)n, (std::size_t)t, (std::size_t)k});
  out.true_states.assign(n, std::vector<int>(t, 1));
  Tensor all_w({(std::size_t)n * t, (std::size_t)k});

  for (int seq = 0; seq < n; ++seq) {
    Rng rs(derive_seed(seed, 0x57A7E, seq));
    Rng rw(derive_seed(seed, 0x30153, seq));
    int state = rs.uniform() < 0.5 ? 0 : 1;
    std::vector<std::array<double, 2>> w(t);
    for (int tt = 0; tt < t; ++tt) {
      if (tt > 0) state = rs.uniform() < 0.95 ? state : 1 - state;
      out.true_states[seq][tt] = state + 1;
      if (tt < 3) {
        w[tt] = {rw.normal(), rw.normal()};
      } else {
        const double c = state == 0 ? 0.5 : 0.2;
        const double a = state == 0 ? 3.0 : 1.0;
        for (int j = 0; j < 2; ++j)
          w[tt][j] = 0.9 * w[tt - 1][j] + std::tanh(c * w[tt - 2][j]) +
                     a * std::sin(w[tt - 3][j]) + rw.normal();
      }
      for (int j = 0; j < 2; ++j) {
        out.true_weights.at3(seq, tt, j) = w[tt][j];
        all_w.at(static_cast<std::size_t>(seq) * t + tt, j) = w[tt][j];
      }
    }
  }

  auto [x_all, f] = project(all_w, d, 0.1, seed);
  out.true_factors = f;
  out.data = Dataset::dense(Tensor({(std::size_t)n, (std::size_t)t, (std::size_t)d}, x_all.v));
  out.data.k_true = k;
  out.data.s_true = 2;
  return out;
}

// ---------------------------------------------------------------------------
// Lorenz attractor
// ---------------------------------------------------------------------------

struct LorenzResult {
  Tensor traj;              // T x 3
  std::vector<int> labels;  // lobe labels from sign(w1), in {1, 2}
};

inline LorenzResult simulate_lorenz(int t, double dt = 0.01, double alpha = 10.0,
                                    double beta = 28.0, double gamma = 8.0 / 3.0,
                                    std::array<double, 3> w0 = {1.0, 1.0, 1.0}) {
  if (dt <= 0.0) throw config_error("lorenz: dt must be > 0");
  LorenzResult out;
  out.traj = Tensor({(std::size_t)t, 3});
  out.labels.resize(t);
  auto field = [&](const std::array<double, 3>& w) {
    return std::array<double, 3>{alpha * (w[1] - w[0]), w[0] * (beta - w[2]) - w[1],
                                 w[0] * w[1] - gamma * w[2]};
  };
  std::array<double, 3> w = w0;
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < 3; ++j) out.traj.at(i, j) = w[j];
    out.labels[i] = w[0] >= 0.0 ? 1 : 2;
    w = rk4_step(w, dt, field);
    for (double x : w)
      if (std::abs(x) > 1e6) throw numeric_error("lorenz: trajectory diverged");
  }
  return out;
}

inline SyntheticBundle gen_lorenz(int t = 2000, int d = 10, std::uint64_t seed = 1,
                                  double noise_std = 0.0, double dt = 0.01) {
  LorenzResult lr = simulate_lorenz(t, dt);
  SyntheticBundle out;
  out.seed = seed;
  out.system = "lorenz";
  auto [x, f] = project(lr.traj, d, noise_std, seed);
  out.true_factors = f;
  out.true_weights = Tensor({1, (std::size_t)t, 3}, lr.traj.v);
  out.true_states.push_back(lr.labels);
  out.data = Dataset::dense(Tensor({1, (std::size_t)t, (std::size_t)d}, x.v));
  out.data.k_true = 3;
  out.data.s_true = 2;
  return out;
}

// ---------------------------------------------------------------------------
// Double pendulum (unit masses and lengths)
// ---------------------------------------------------------------------------

struct PendulumResult {
  Tensor state;   // T x 4: theta1, theta2, omega1, omega2
  Tensor coords;  // T x 4: x1, y1, x2, y2 endpoint positions
};

/// Coupled equations solved for the two angular accelerations each step:
///   2 a1 + a2 cos(d) + w2^2 sin(d) + 2 g sin(theta1) = 0
///     a2 + a1 cos(d) - w1^2 sin(d) +   g sin(theta2) = 0,  d = theta1 - theta2.
inline PendulumResult simulate_double_pendulum(long t, double dt = 1e-3, double g = 9.81,
                                               double theta1 = 2.5, double theta2 = 2.0,
                                               double omega1 = 0.0, double omega2 = 0.0,
                                               int stride = 1) {
  if (dt <= 0.0) throw config_error("pendulum: dt must be > 0");
  if (stride < 1) throw config_error("pendulum: stride must be >= 1");
  PendulumResult out;
  out.state = Tensor({(std::size_t)t, 4});
  out.coords = Tensor({(std::size_t)t, 4});
  auto field = [&](const std::array<double, 4>& y) {
    const double dlt = y[0] - y[1];
    const double c = std::cos(dlt), s = std::sin(dlt);
    const double det = 2.0 - c * c;
    if (std::abs(det) < 1e-12) throw numeric_error("pendulum: singular acceleration system");
    const double b1 = -y[3] * y[3] * s - 2.0 * g * std::sin(y[0]);
    const double b2 = y[2] * y[2] * s - g * std::sin(y[1]);
    return std::array<double, 4>{y[2], y[3], (b1 - c * b2) / det, (2.0 * b2 - c * b1) / det};
  };
  std::array<double, 4> y = {theta1, theta2, omega1, omega2};
  for (long i = 0; i < t; ++i) {
    out.state.at(i, 0) = y[0];
    out.state.at(i, 1) = y[1];
    out.state.at(i, 2) = y[2];
    out.state.at(i, 3) = y[3];
    out.coords.at(i, 0) = std::sin(y[0]);
    out.coords.at(i, 1) = -std::cos(y[0]);
    out.coords.at(i, 2) = std::sin(y[0]) + std::sin(y[1]);
    out.coords.at(i, 3) = -std::cos(y[0]) - std::cos(y[1]);
    for (int sub = 0; sub < stride; ++sub) y = rk4_step(y, dt, field);
  }
  return out;
}

/// Total mechanical energy of the unit double pendulum.
inline double pendulum_energy(double th1, double th2, double w1, double w2, double g = 9.81) {
  const double kin = w1 * w1 + 0.5 * w2 * w2 + w1 * w2 * std::cos(th1 - th2);
  const double pot = -g * (2.0 * std::cos(th1) + std::cos(th2));
  return kin + pot;
}

inline SyntheticBundle gen_pendulum(int t = 20000, int d = 10, std::uint64_t seed = 1,
                                    double noise_std = 0.0, double dt = 1e-3, int stride = 10) {
  PendulumResult pr = simulate_double_pendulum(t, dt, 9.81, 2.5, 2.0, 0.0, 0.0, stride);
  SyntheticBundle out;
  out.seed = seed;
  out.system = "pendulum";
  auto [x, f] = project(pr.coords, d, noise_std, seed);
  out.true_factors = f;
  out.true_weights = Tensor({1, (std::size_t)t, 4}, pr.coords.v);
  // coarse reference segmentation along the first deflection angle
  std::vector<int> labels(t);
  for (int i = 0; i < t; ++i) {
    const double a = std::remainder(pr.state.at(i, 0), 2.0 * std::numbers::pi);
    labels[i] = a < -0.8 ? 1 : (a > 0.8 ? 3 : 2);
  }
  out.true_states.push_back(std::move(labels));
  out.data = Dataset::dense(Tensor({1, (std::size_t)t, (std::size_t)d}, x.v));
  out.data.k_true = 4;
  out.data.s_true = 3;
  return out;
}

// ---------------------------------------------------------------------------
// Seasonal benchmark for long-horizon forecasting
// ---------------------------------------------------------------------------

/// Periodic two-factor latent signal observed through a random projection
/// with additive noise; period-aware lag sets can reproduce it exactly.
inline SyntheticBundle gen_seasonal(int t = 480, int d = 8, int period = 24,
                                    std::uint64_t seed = 1, double noise_std = 0.3) {
  SyntheticBundle out;
  out.seed = seed;
  out.system = "seasonal";
  const int k = 2;
  Tensor w({(std::size_t)t, (std::size_t)k});
  const double tau = 2.0 * std::numbers::pi / period;
  for (int tt = 0; tt < t; ++tt) {
    w.at(tt, 0) = 2.0 * std::sin(tau * tt) + 0.4 * std::sin(2.0 * tau * tt + 1.0);
    w.at(tt, 1) = 1.5 * std::cos(tau * tt + 0.5) + 0.3 * std::sin(3.0 * tau * tt + 0.2);
  }
  auto [x, f] = project(w, d, noise_std, seed);
  out.true_factors = f;
  out.true_weights = Tensor({1, (std::size_t)t, (std::size_t)k}, w.v);
  out.true_states.emplace_back(t, 1);
  out.data = Dataset::dense(Tensor({1, (std::size_t)t, (std::size_t)d}, x.v));
  out.data.k_true = k;
  out.data.s_true = 1;
  return out;
}

inline SyntheticBundle gen_system(const std::string& name, std::uint64_t seed) {
  if (name == "toy") return gen_toy(200, 200, 10, seed);
  if (name == "lorenz") return gen_lorenz(2000, 10, seed);
  if (name == "pendulum") return gen_pendulum(20000, 10, seed);
  if (name == "seasonal") return gen_seasonal(480, 8, 24, seed);
  throw config_error("unknown synthetic system: " + name);
}

}  // namespace dsarf
