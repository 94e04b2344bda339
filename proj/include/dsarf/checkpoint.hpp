#pragma once

#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "inference.hpp"
#include "tensor.hpp"

namespace dsarf {

/// Train/test split applied by the command-line workflows; at most one of the
/// three fields is nonzero.
struct SplitSpec {
  int holdout_seqs = 0;      // trailing sequences held out
  int holdout_steps = 0;     // trailing time steps held out
  double holdout_frac = 0.0; // trailing time fraction held out

  int test_steps(int t_total) const {
    if (holdout_steps > 0) return holdout_steps;
    if (holdout_frac > 0.0) return static_cast<int>(t_total * holdout_frac + 0.5);
    return 0;
  }
  bool by_time() const { return holdout_steps > 0 || holdout_frac > 0.0; }
  bool active() const { return by_time() || holdout_seqs > 0; }
};

/// Everything needed to resume training or forecast later: model config,
/// generative and variational tensors, optimizer state, RNG seed, epoch
/// counter, standardization stats, training curve, and the split.
struct Checkpoint {
  TrainResult tr;
  SplitSpec split;
};

namespace detail {

inline constexpr std::uint32_t kCkptMagic = 0x44535246;  // "DSRF"
inline constexpr std::uint32_t kCkptVersion = 1;

enum class EntryKind : std::uint8_t { TensorF64 = 0, U64 = 1 };

struct Writer {
  std::string buf;
  void raw(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t x) { raw(&x, 1); }
  void u32(std::uint32_t x) { raw(&x, 4); }
  void u64(std::uint64_t x) { raw(&x, 8); }
  void f64(double x) { raw(&x, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  void raw(void* p, std::size_t n) {
    if (pos + n > buf.size()) throw io_error("checkpoint: truncated file");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() {
    std::uint8_t x;
    raw(&x, 1);
    return x;
  }
  std::uint32_t u32() {
    std::uint32_t x;
    raw(&x, 4);
    return x;
  }
  std::uint64_t u64() {
    std::uint64_t x;
    raw(&x, 8);
    return x;
  }
  double f64() {
    double x;
    raw(&x, 8);
    return x;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
};

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

struct EntryMap {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::uint64_t> scalars;

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw io_error("checkpoint: missing tensor " + name);
    return it->second;
  }
  std::uint64_t scalar(const std::string& name) const {
    auto it = scalars.find(name);
    if (it == scalars.end()) throw io_error("checkpoint: missing value " + name);
    return it->second;
  }
  double real(const std::string& name) const {
    const Tensor& t = tensor(name);
    return t.v.at(0);
  }
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  using namespace detail;
  Checkpoint c = ck;  // the tensor traversal interface is non-const
  const ModelConfig& cfg = c.tr.model.cfg;
  const TrainConfig& tc = c.tr.tcfg;

  std::deque<Tensor> extra;  // owns synthesized scalar/vector entries
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  std::vector<std::pair<std::string, std::uint64_t>> scalars;
  auto real = [&](const std::string& n, double x) {
    extra.push_back(Tensor({1, 1}, {x}));
    tensors.emplace_back(n, &extra.back());
  };
  auto vec = [&](const std::string& n, const std::vector<double>& v) {
    Tensor t({v.size()});
    t.v = v;
    extra.push_back(std::move(t));
    tensors.emplace_back(n, &extra.back());
  };

  scalars = {{"cfg.k", (std::uint64_t)cfg.k},
             {"cfg.s", (std::uint64_t)cfg.s},
             {"cfg.d", (std::uint64_t)cfg.d},
             {"cfg.z_dim", (std::uint64_t)cfg.z_dim},
             {"cfg.hidden", (std::uint64_t)cfg.hidden},
             {"cfg.act", (std::uint64_t)(cfg.act == Activation::Tanh ? 0 : 1)},
             {"tcfg.epochs", (std::uint64_t)tc.epochs},
             {"tcfg.anneal_epochs", (std::uint64_t)tc.anneal_epochs},
             {"tcfg.mc_samples", (std::uint64_t)tc.mc_samples},
             {"tcfg.batch_size", (std::uint64_t)tc.batch_size},
             {"tcfg.seed", tc.seed},
             {"tcfg.standardize", (std::uint64_t)(tc.standardize ? 1 : 0)},
             {"phi.n", (std::uint64_t)c.tr.model.phi.n},
             {"phi.t", (std::uint64_t)c.tr.model.phi.t},
             {"train.epoch", (std::uint64_t)c.tr.state.epoch},
             {"train.seed", c.tr.state.seed},
             {"adam.step", (std::uint64_t)c.tr.state.opt.step},
             {"split.holdout_seqs", (std::uint64_t)c.split.holdout_seqs},
             {"split.holdout_steps", (std::uint64_t)c.split.holdout_steps}};

  std::vector<double> lag_vals(cfg.lags.begin(), cfg.lags.end());
  vec("cfg.lags", lag_vals);
  real("cfg.sigma0", cfg.sigma0);
  real("tcfg.lr", tc.lr);
  real("tcfg.anneal_start", tc.anneal_start);
  real("tcfg.w_init_std", tc.w_init_std);
  real("tcfg.logvar_init", tc.logvar_init);
  real("tcfg.adam_beta1", tc.adam_beta1);
  real("tcfg.adam_beta2", tc.adam_beta2);
  real("tcfg.adam_eps", tc.adam_eps);
  real("split.holdout_frac", c.split.holdout_frac);
  vec("model.mu", c.tr.model.mu);
  vec("model.sd", c.tr.model.sd);
  vec("model.curve", c.tr.model.curve);

  c.tr.model.theta.for_each_tensor(
      [&](const std::string& n, Tensor& t) { tensors.emplace_back(n, &t); });
  c.tr.model.phi.for_each_tensor(
      [&](const std::string& n, Tensor& t) { tensors.emplace_back(n, &t); });

  // optimizer moments keyed by parameter name
  if (!c.tr.state.opt.m.empty()) {
    detail::ParamSet ps = detail::collect_params(c.tr.model.theta, &c.tr.model.phi);
    if (ps.names.size() != c.tr.state.opt.m.size())
      throw io_error("checkpoint: optimizer state does not match the parameter set");
    for (std::size_t i = 0; i < ps.names.size(); ++i) {
      tensors.emplace_back("adam.m." + ps.names[i], &c.tr.state.opt.m[i]);
      tensors.emplace_back("adam.v." + ps.names[i], &c.tr.state.opt.v[i]);
    }
  }

  Writer w;
  w.u32(kCkptMagic);
  w.u32(kCkptVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size() + scalars.size()));
  for (const auto& [name, val] : scalars) {
    w.u8(static_cast<std::uint8_t>(EntryKind::U64));
    w.str(name);
    w.u64(val);
  }
  for (const auto& [name, t] : tensors) {
    w.u8(static_cast<std::uint8_t>(EntryKind::TensorF64));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t->shape.size()));
    for (auto dd : t->shape) w.u64(dd);
    for (double x : t->v) w.f64(x);
  }

  w.u64(fnv1a(w.buf));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
  if (!f) throw io_error("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using namespace detail;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw io_error("checkpoint: truncated file");
  const std::string payload = buf.substr(0, buf.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (fnv1a(payload) != stored) throw io_error("checkpoint: checksum mismatch");

  Reader r{payload};
  if (r.u32() != kCkptMagic) throw io_error("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw io_error("checkpoint: unsupported format version " + std::to_string(version));

  EntryMap em;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = static_cast<EntryKind>(r.u8());
    const std::string name = r.str();
    if (kind == EntryKind::U64) {
      em.scalars[name] = r.u64();
    } else {
      const std::uint32_t nd = r.u32();
      std::vector<std::size_t> shape(nd);
      for (auto& dd : shape) dd = r.u64();
      Tensor t(shape);
      for (auto& x : t.v) x = r.f64();
      em.tensors[name] = std::move(t);
    }
  }
  if (r.pos != payload.size()) throw io_error("checkpoint: trailing bytes");

  Checkpoint ck;
  ModelConfig cfg;
  cfg.k = static_cast<int>(em.scalar("cfg.k"));
  cfg.s = static_cast<int>(em.scalar("cfg.s"));
  cfg.d = static_cast<int>(em.scalar("cfg.d"));
  cfg.z_dim = static_cast<int>(em.scalar("cfg.z_dim"));
  cfg.hidden = static_cast<int>(em.scalar("cfg.hidden"));
  cfg.act = em.scalar("cfg.act") == 0 ? Activation::Tanh : Activation::Relu;
  cfg.sigma0 = em.real("cfg.sigma0");
  cfg.lags.clear();
  for (double l : em.tensor("cfg.lags").v) cfg.lags.push_back(static_cast<int>(l));

  TrainConfig tc;
  tc.epochs = static_cast<int>(em.scalar("tcfg.epochs"));
  tc.anneal_epochs = static_cast<int>(em.scalar("tcfg.anneal_epochs"));
  tc.mc_samples = static_cast<int>(em.scalar("tcfg.mc_samples"));
  tc.batch_size = static_cast<int>(em.scalar("tcfg.batch_size"));
  tc.seed = em.scalar("tcfg.seed");
  tc.standardize = em.scalar("tcfg.standardize") != 0;
  tc.lr = em.real("tcfg.lr");
  tc.anneal_start = em.real("tcfg.anneal_start");
  tc.w_init_std = em.real("tcfg.w_init_std");
  tc.logvar_init = em.real("tcfg.logvar_init");
  tc.adam_beta1 = em.real("tcfg.adam_beta1");
  tc.adam_beta2 = em.real("tcfg.adam_beta2");
  tc.adam_eps = em.real("tcfg.adam_eps");

  ck.tr.tcfg = tc;
  ck.tr.model.cfg = cfg;
  ck.tr.model.theta = GenerativeParams::init(cfg, 0);
  const int n = static_cast<int>(em.scalar("phi.n"));
  const int t_len = static_cast<int>(em.scalar("phi.t"));
  ck.tr.model.phi = VariationalParams::init(n, t_len, cfg, tc);
  ck.tr.model.theta.for_each_tensor([&](const std::string& name, Tensor& t) {
    const Tensor& src = em.tensor(name);
    if (!src.same_shape(t)) throw io_error("checkpoint: shape mismatch for " + name);
    t.v = src.v;
  });
  ck.tr.model.phi.for_each_tensor([&](const std::string& name, Tensor& t) {
    const Tensor& src = em.tensor(name);
    if (!src.same_shape(t)) throw io_error("checkpoint: shape mismatch for " + name);
    t.v = src.v;
  });
  if (em.tensor("model.mu").numel() > 0) {
    ck.tr.model.mu = em.tensor("model.mu").v;
    ck.tr.model.sd = em.tensor("model.sd").v;
  }
  ck.tr.model.curve = em.tensor("model.curve").v;

  ck.tr.state.epoch = static_cast<long>(em.scalar("train.epoch"));
  ck.tr.state.seed = em.scalar("train.seed");
  ck.tr.state.opt.cfg = {tc.lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps};
  ck.tr.state.opt.step = static_cast<long>(em.scalar("adam.step"));
  detail::ParamSet ps = detail::collect_params(ck.tr.model.theta, &ck.tr.model.phi);
  if (!ps.names.empty() && em.tensors.count("adam.m." + ps.names.front())) {
    for (const std::string& name : ps.names) {
      ck.tr.state.opt.m.push_back(em.tensor("adam.m." + name));
      ck.tr.state.opt.v.push_back(em.tensor("adam.v." + name));
    }
  }

  ck.split.holdout_seqs = static_cast<int>(em.scalar("split.holdout_seqs"));
  ck.split.holdout_steps = static_cast<int>(em.scalar("split.holdout_steps"));
  ck.split.holdout_frac = em.real("split.holdout_frac");
  return ck;
}

}  // namespace dsarf
