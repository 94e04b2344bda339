#pragma once

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "forecast.hpp"
#include "inference.hpp"
#include "synthgen.hpp"

namespace dsarf::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Flat key=value configuration with unknown-key rejection
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config " + path);
  std::string line;
  long ln = 0;
  while (std::getline(f, line)) {
    ++ln;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(path + ":" + std::to_string(ln) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void apply_overrides(std::map<std::string, std::string>& kv,
                            const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
}

/// Typed view over the key-value map; finish() rejects unconsumed keys.
class Config {
 public:
  explicit Config(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  long get_int(const std::string& key, long def) {
    auto it = take(key);
    return it ? detail::parse_long(*it, "config key " + key) : def;
  }
  double get_real(const std::string& key, double def) {
    auto it = take(key);
    return it ? detail::parse_double(*it, "config key " + key) : def;
  }
  bool get_bool(const std::string& key, bool def) {
    auto it = take(key);
    if (!it) return def;
    if (*it == "1" || *it == "true" || *it == "on") return true;
    if (*it == "0" || *it == "false" || *it == "off") return false;
    throw config_error("config key " + key + ": expected a boolean, got '" + *it + "'");
  }
  std::string get_str(const std::string& key, std::string def) {
    auto it = take(key);
    return it ? *it : def;
  }
  std::vector<int> get_int_list(const std::string& key, std::vector<int> def) {
    auto it = take(key);
    if (!it) return def;
    std::vector<int> out;
    for (const std::string& tok : detail::split_csv_line(*it))
      out.push_back(static_cast<int>(detail::parse_long(tok, "config key " + key)));
    return out;
  }
  void finish() const {
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) throw config_error("unknown config key '" + k + "'");
  }

 private:
  std::optional<std::string> take(const std::string& key) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return std::nullopt;
    return it->second;
  }
  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

inline ModelConfig model_config_from(Config& cfg) {
  ModelConfig m;
  m.k = static_cast<int>(cfg.get_int("k", m.k));
  m.s = static_cast<int>(cfg.get_int("s", m.s));
  m.lags = cfg.get_int_list("lags", m.lags);
  m.z_dim = static_cast<int>(cfg.get_int("z_dim", m.z_dim));
  m.hidden = static_cast<int>(cfg.get_int("hidden", m.hidden));
  m.sigma0 = cfg.get_real("sigma0", m.sigma0);
  const std::string act = cfg.get_str("activation", "tanh");
  if (act == "tanh")
    m.act = Activation::Tanh;
  else if (act == "relu")
    m.act = Activation::Relu;
  else
    throw config_error("activation must be tanh or relu");
  return m;
}

inline TrainConfig train_config_from(Config& cfg) {
  TrainConfig t;
  t.epochs = static_cast<int>(cfg.get_int("epochs", t.epochs));
  t.lr = cfg.get_real("lr", t.lr);
  t.anneal_start = cfg.get_real("anneal_start", t.anneal_start);
  t.anneal_epochs = static_cast<int>(cfg.get_int("anneal_epochs", t.anneal_epochs));
  t.mc_samples = static_cast<int>(cfg.get_int("mc_samples", t.mc_samples));
  t.batch_size = static_cast<int>(cfg.get_int("batch_size", t.batch_size));
  t.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  t.standardize = cfg.get_bool("standardize", t.standardize);
  t.w_init_std = cfg.get_real("w_init_std", t.w_init_std);
  t.logvar_init = cfg.get_real("logvar_init", t.logvar_init);
  t.adam_beta1 = cfg.get_real("adam_beta1", t.adam_beta1);
  t.adam_beta2 = cfg.get_real("adam_beta2", t.adam_beta2);
  t.adam_eps = cfg.get_real("adam_eps", t.adam_eps);
  return t;
}

inline SplitSpec split_from(Config& cfg) {
  SplitSpec s;
  s.holdout_seqs = static_cast<int>(cfg.get_int("holdout_seqs", 0));
  s.holdout_steps = static_cast<int>(cfg.get_int("holdout_steps", 0));
  s.holdout_frac = cfg.get_real("holdout_frac", 0.0);
  const int nonzero = (s.holdout_seqs > 0) + (s.holdout_steps > 0) + (s.holdout_frac > 0.0);
  if (nonzero > 1) throw config_error("choose a single holdout mode");
  return s;
}

inline std::pair<Dataset, Dataset> apply_split(const Dataset& ds, const SplitSpec& split) {
  if (split.holdout_seqs > 0) return split_trailing_seqs(ds, split.holdout_seqs);
  if (split.by_time()) return split_trailing_time(ds, split.test_steps(ds.t()));
  return {ds, Dataset{}};
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string system = "toy";
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  long n = 0, t = 0, d = 0, period = 0;
  double noise = -1.0;
  double dt = 0.0;
};

inline void run_simulate(const SimulateArgs& a) {
  SyntheticBundle b;
  if (a.system == "toy") {
    b = gen_toy(a.n > 0 ? a.n : 200, a.t > 0 ? a.t : 200, a.d > 0 ? a.d : 10, a.seed);
  } else if (a.system == "lorenz") {
    b = gen_lorenz(a.t > 0 ? a.t : 2000, a.d > 0 ? a.d : 10, a.seed,
                   a.noise >= 0 ? a.noise : 0.0, a.dt > 0 ? a.dt : 0.01);
  } else if (a.system == "pendulum") {
    b = gen_pendulum(a.t > 0 ? a.t : 20000, a.d > 0 ? a.d : 10, a.seed,
                     a.noise >= 0 ? a.noise : 0.0, a.dt > 0 ? a.dt : 1e-3);
  } else if (a.system == "seasonal") {
    b = gen_seasonal(a.t > 0 ? a.t : 480, a.d > 0 ? a.d : 8, a.period > 0 ? a.period : 24,
                     a.seed, a.noise >= 0 ? a.noise : 0.3);
  } else {
    throw config_error("unknown system '" + a.system + "'");
  }
  fs::create_directories(a.out_dir);
  save_dataset((fs::path(a.out_dir) / "dataset.csv").string(), b.data);
  save_states_csv((fs::path(a.out_dir) / "truth_states.csv").string(), b.true_states);
  save_weights_csv((fs::path(a.out_dir) / "truth_weights.csv").string(), b.true_weights);
  save_factors_csv((fs::path(a.out_dir) / "truth_factors.csv").string(), b.true_factors);
  std::cout << "wrote " << b.system << " dataset (N=" << b.data.n() << ", T=" << b.data.t()
            << ", D=" << b.data.d() << ") to " << a.out_dir << "\n";
}

struct TrainArgs {
  std::string data, config, out = "model.ckpt", curve, resume;
  std::vector<std::string> sets;
};

inline void run_train(const TrainArgs& a) {
  std::map<std::string, std::string> kv;
  if (!a.config.empty()) kv = read_config_file(a.config);
  apply_overrides(kv, a.sets);
  Config cfg(kv);

  Dataset full = load_dataset(a.data);
  Checkpoint ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    const long target = cfg.get_int("epochs", ck.tr.tcfg.epochs);
    cfg.finish();
    auto [train_ds, test_ds] = apply_split(full, ck.split);
    continue_training(ck.tr, train_ds, target);
    ck.tr.tcfg.epochs = static_cast<int>(target);
  } else {
    ModelConfig mcfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    ck.split = split_from(cfg);
    cfg.finish();
    auto [train_ds, test_ds] = apply_split(full, ck.split);
    ck.tr = train(train_ds, mcfg, tcfg);
  }
  save_checkpoint(a.out, ck);
  if (!a.curve.empty()) save_curve(a.curve, ck.tr.model.curve);
  std::cout << "trained " << ck.tr.state.epoch << " epochs, final elbo "
            << detail::fmt_double(ck.tr.model.curve.empty() ? 0.0 : ck.tr.model.curve.back())
            << ", checkpoint " << a.out << "\n";
}

struct PredictArgs {
  std::string model, data, mode = "short", out_dir = ".";
  std::vector<std::string> sets;
  std::string config;
};

inline void run_predict(const PredictArgs& a) {
  std::map<std::string, std::string> kv;
  if (!a.config.empty()) kv = read_config_file(a.config);
  apply_overrides(kv, a.sets);
  Config cfg(kv);
  ForecastOptions fopts;
  fopts.n_rollouts = static_cast<int>(cfg.get_int("rollouts", fopts.n_rollouts));
  fopts.assimilate = cfg.get_bool("assimilate", true);
  fopts.gradient_refine = cfg.get_str("refine", "none") == "gradient";
  fopts.refine_steps = static_cast<int>(cfg.get_int("refine_steps", fopts.refine_steps));
  fopts.assim_std_floor = cfg.get_real("assim_floor", fopts.assim_std_floor);
  fopts.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  long horizon = cfg.get_int("horizon", 0);
  cfg.finish();

  Checkpoint ck = load_checkpoint(a.model);
  const TrainedModel& m = ck.tr.model;
  Dataset full = load_dataset(a.data);
  auto [train_ds, test_ds] = apply_split(full, ck.split);
  if (!ck.split.active()) throw config_error("checkpoint holds no train/test split to predict on");
  if (train_ds.n() != m.phi.n || train_ds.t() != m.phi.t || train_ds.d() != m.cfg.d)
    throw config_error("dataset does not match the checkpointed model dimensions");

  fs::create_directories(a.out_dir);
  std::ofstream summary(fs::path(a.out_dir) / "summary.txt");
  summary << "mode=" << a.mode << "\n";

  // pooled metric buffers
  std::vector<double> all_pred, all_truth, all_mask;
  auto pool = [&](const Tensor& pred, const Tensor& truth, const Tensor& mask, int first_row) {
    for (std::size_t t = first_row; t < pred.rows(); ++t)
      for (std::size_t d = 0; d < pred.cols(); ++d) {
        all_pred.push_back(pred.at(t, d));
        all_truth.push_back(truth.at(t, d));
        all_mask.push_back(mask.at(t, d));
      }
  };

  const bool by_time = ck.split.by_time();
  const int t0_test = by_time ? train_ds.t() : 0;
  const int n_targets = by_time ? full.n() : ck.split.holdout_seqs;

  for (int i = 0; i < n_targets; ++i) {
    const int global_seq = by_time ? i : train_ds.n() + i;
    auto [y, mask] = test_ds.sequence(i);
    char tag[32];
    std::snprintf(tag, sizeof tag, "_seq%03d.csv", global_seq);

    if (a.mode == "short") {
      ForecastResult r;
      if (by_time) {
        RollState init = roll_state_from_train(m, i);
        r = short_term_rolling(m, y, mask, &init, fopts);
      } else {
        r = short_term_rolling(m, y, mask, nullptr, fopts);
      }
      save_forecast_csv((fs::path(a.out_dir) / ("short_forecast" + std::string(tag))).string(),
                        r.pred, r.stddev, &y, &mask, t0_test, r.warmup);
      save_statepath_csv((fs::path(a.out_dir) / ("short_states" + std::string(tag))).string(),
                         r.states, t0_test);
      pool(r.pred, y, mask, r.warmup);
      summary << "seq" << global_seq << "_nrmse_pct=" << detail::fmt_double(r.nrmse_pct) << "\n";
    } else if (a.mode == "long") {
      RollState init;
      Tensor truth = y, tmask = mask;
      int t0 = t0_test;
      if (by_time) {
        init = roll_state_from_train(m, i);
      } else {
        init = roll_state_from_prefix(m, y, mask);
        const int p = m.cfg.max_lag();
        Tensor yt({y.rows() - p, y.cols()}), mt({y.rows() - p, y.cols()});
        for (std::size_t t = p; t < y.rows(); ++t)
          for (std::size_t d = 0; d < y.cols(); ++d) {
            yt.at(t - p, d) = y.at(t, d);
            mt.at(t - p, d) = mask.at(t, d);
          }
        truth = yt;
        tmask = mt;
        t0 = p;
      }
      const int h = horizon > 0 ? static_cast<int>(horizon)
                                : static_cast<int>(truth.rows());
      const bool have_truth = h <= static_cast<int>(truth.rows());
      ForecastResult r = long_term(m, init, h, fopts, have_truth ? &truth : nullptr,
                                   have_truth ? &tmask : nullptr);
      save_forecast_csv((fs::path(a.out_dir) / ("long_forecast" + std::string(tag))).string(),
                        r.pred, r.stddev, have_truth ? &truth : nullptr,
                        have_truth ? &tmask : nullptr, t0, 0);
      save_statepath_csv((fs::path(a.out_dir) / ("long_states" + std::string(tag))).string(),
                         r.states, t0);
      if (have_truth) pool(r.pred, truth, tmask, 0);
      summary << "seq" << global_seq << "_nrmse_pct=" << detail::fmt_double(r.nrmse_pct) << "\n";
    } else {
      throw config_error("mode must be short or long");
    }
  }

  if (!all_pred.empty()) {
    Tensor p({all_pred.size()}), t({all_truth.size()}), mk({all_mask.size()});
    p.v = all_pred;
    t.v = all_truth;
    mk.v = all_mask;
    const double pooled = nrmse(p, t, &mk);
    summary << "pooled_nrmse_pct=" << detail::fmt_double(pooled) << "\n";
    std::cout << a.mode << "-term pooled NRMSE: " << pooled << "%\n";
  }
  std::cout << "forecast artifacts in " << a.out_dir << "\n";
}

struct EvaluateArgs {
  std::string pred_dir, mode = "short", truth_states, out;
};

inline void run_evaluate(const EvaluateArgs& a) {
  std::vector<std::pair<int, fs::path>> files;
  const std::string prefix = a.mode + "_forecast_seq";
  for (const auto& entry : fs::directory_iterator(a.pred_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0)
      files.emplace_back(std::stoi(name.substr(prefix.size())), entry.path());
  }
  if (files.empty()) throw io_error("no " + prefix + "*.csv files in " + a.pred_dir);
  std::sort(files.begin(), files.end());

  std::ostringstream report;
  std::vector<double> all_pred, all_truth;
  for (const auto& [seq, path] : files) {
    ForecastRows rows = load_forecast_csv(path.string());
    double num = 0, den = 0;
    long cnt = 0;
    for (std::size_t i = 0; i < rows.predicted.size(); ++i) {
      if (!rows.truth_known[i]) continue;
      all_pred.push_back(rows.predicted[i]);
      all_truth.push_back(rows.truth[i]);
      const double r = rows.predicted[i] - rows.truth[i];
      num += r * r;
      den += rows.truth[i] * rows.truth[i];
      ++cnt;
    }
    if (cnt > 0)
      report << "seq" << seq << "_nrmse_pct="
             << detail::fmt_double(100.0 * std::sqrt(num / den)) << "\n";
  }
  if (!all_pred.empty()) {
    Tensor p({all_pred.size()}), t({all_truth.size()});
    p.v = all_pred;
    t.v = all_truth;
    report << "pooled_nrmse_pct=" << detail::fmt_double(nrmse(p, t)) << "\n";
  }

  if (!a.truth_states.empty()) {
    auto truth = load_states_csv(a.truth_states);
    std::vector<int> inferred, reference;
    int s_count = 0;
    const std::string sprefix = a.mode + "_states_seq";
    for (const auto& entry : fs::directory_iterator(a.pred_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind(sprefix, 0) != 0) continue;
      const int seq = std::stoi(name.substr(sprefix.size()));
      StatePathRows rows = load_statepath_csv(entry.path().string());
      s_count = std::max(s_count, rows.s_count);
      for (std::size_t i = 0; i < rows.t.size(); ++i) {
        if (seq >= static_cast<int>(truth.size()) ||
            rows.t[i] >= static_cast<long>(truth[seq].size()))
          throw io_error("state path exceeds the reference label range");
        inferred.push_back(rows.state[i]);
        reference.push_back(truth[seq][rows.t[i]]);
      }
    }
    if (!inferred.empty()) {
      int s_ref = 0;
      for (int r : reference) s_ref = std::max(s_ref, r);
      LabelAlignment al = state_accuracy(inferred, reference, std::max(s_count, s_ref));
      report << "state_accuracy_pct=" << detail::fmt_double(al.accuracy_pct) << "\n";
    }
  }

  std::cout << report.str();
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw io_error("cannot write " + a.out);
    f << report.str();
  }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Switching auto-regressive factorization for spatio-temporal series"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic benchmark dataset");
  c_sim->add_option("--system", sim.system, "toy | lorenz | pendulum | seasonal");
  c_sim->add_option("--seed", sim.seed, "generator seed");
  c_sim->add_option("--out", sim.out_dir, "output directory");
  c_sim->add_option("--n", sim.n, "sequence count");
  c_sim->add_option("--t", sim.t, "time steps per sequence");
  c_sim->add_option("--d", sim.d, "observed dimensions");
  c_sim->add_option("--period", sim.period, "seasonal period");
  c_sim->add_option("--noise", sim.noise, "observation noise std");
  c_sim->add_option("--dt", sim.dt, "integration step (lorenz, pendulum)");

  TrainArgs tra;
  auto* c_tr = app.add_subcommand("train", "fit the model on a dataset");
  c_tr->add_option("--data", tra.data, "dataset CSV")->required();
  c_tr->add_option("--config", tra.config, "key = value config file");
  c_tr->add_option("--set", tra.sets, "config override key=value")->take_all();
  c_tr->add_option("--out", tra.out, "checkpoint path");
  c_tr->add_option("--curve", tra.curve, "training-curve text file");
  c_tr->add_option("--resume", tra.resume, "checkpoint to continue from");

  PredictArgs pre;
  auto* c_pr = app.add_subcommand("predict", "short- or long-term forecasting");
  c_pr->add_option("--model", pre.model, "checkpoint path")->required();
  c_pr->add_option("--data", pre.data, "dataset CSV (same file used for training)")->required();
  c_pr->add_option("--mode", pre.mode, "short | long");
  c_pr->add_option("--out", pre.out_dir, "output directory");
  c_pr->add_option("--config", pre.config, "key = value config file");
  c_pr->add_option("--set", pre.sets, "config override key=value")->take_all();

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "score forecast CSVs against ground truth");
  c_ev->add_option("--pred-dir", ev.pred_dir, "directory holding forecast CSVs")->required();
  c_ev->add_option("--mode", ev.mode, "short | long");
  c_ev->add_option("--truth-states", ev.truth_states, "reference state sidecar CSV");
  c_ev->add_option("--out", ev.out, "report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c_sim->parsed()) run_simulate(sim);
    if (c_tr->parsed()) run_train(tra);
    if (c_pr->parsed()) run_predict(pre);
    if (c_ev->parsed()) run_evaluate(ev);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dsarf::cli
