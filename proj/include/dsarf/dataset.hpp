#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace dsarf {

namespace detail {

inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline bool is_missing_token(const std::string& s) {
  if (s.empty()) return true;
  return s == "NaN" || s == "nan" || s == "NAN";
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw io_error("non-numeric value '" + s + "' at " + where);
  return v;
}

inline long parse_long(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw io_error("non-integer value '" + s + "' at " + where);
  return v;
}

}  // namespace detail

/// Dataset CSV: header line "N,T,D" (optionally "N,T,D,K_true,S_true"),
/// then N*T rows "seq,t,x_1,...,x_D" in canonical order with 0-based indices.
/// An empty cell or a NaN token marks a missing value.
inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f << ds.n() << "," << ds.t() << "," << ds.d();
  if (ds.k_true > 0 || ds.s_true > 0) f << "," << ds.k_true << "," << ds.s_true;
  f << "\n";
  for (int s = 0; s < ds.n(); ++s)
    for (int t = 0; t < ds.t(); ++t) {
      f << s << "," << t;
      for (int d = 0; d < ds.d(); ++d) {
        f << ",";
        if (ds.mask.at3(s, t, d) != 0.0) f << detail::fmt_double(ds.x.at3(s, t, d));
      }
      f << "\n";
    }
  if (!f) throw io_error("write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw io_error(path + ": empty file");
  auto head = detail::split_csv_line(line);
  if (head.size() != 3 && head.size() != 5)
    throw io_error(path + ": malformed header (want N,T,D or N,T,D,K,S)");
  const long n = detail::parse_long(head[0], path + " header");
  const long t_len = detail::parse_long(head[1], path + " header");
  const long d = detail::parse_long(head[2], path + " header");
  if (n < 1 || t_len < 1 || d < 1) throw io_error(path + ": non-positive dimensions in header");

  Dataset ds;
  ds.x = Tensor({(std::size_t)n, (std::size_t)t_len, (std::size_t)d});
  ds.mask = Tensor({(std::size_t)n, (std::size_t)t_len, (std::size_t)d});
  if (head.size() == 5) {
    ds.k_true = static_cast<int>(detail::parse_long(head[3], path + " header"));
    ds.s_true = static_cast<int>(detail::parse_long(head[4], path + " header"));
  }

  long row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const std::string where = path + " row " + std::to_string(row + 1);
    if (row >= n * t_len) throw io_error(path + ": more rows than the header announces");
    auto cells = detail::split_csv_line(line);
    if (static_cast<long>(cells.size()) != d + 2)
      throw io_error(where + ": expected " + std::to_string(d + 2) + " columns, got " +
                     std::to_string(cells.size()));
    const long seq = detail::parse_long(cells[0], where);
    const long tt = detail::parse_long(cells[1], where);
    if (seq != row / t_len || tt != row % t_len)
      throw io_error(where + ": index (" + std::to_string(seq) + "," + std::to_string(tt) +
                     ") does not match the header layout");
    for (long dd = 0; dd < d; ++dd) {
      const std::string& cell = cells[2 + dd];
      if (detail::is_missing_token(cell)) {
        ds.mask.at3(seq, tt, dd) = 0.0;
        ds.x.at3(seq, tt, dd) = 0.0;
      } else {
        ds.mask.at3(seq, tt, dd) = 1.0;
        ds.x.at3(seq, tt, dd) = detail::parse_double(cell, where);
      }
    }
    ++row;
  }
  if (row != n * t_len)
    throw io_error(path + ": row " + std::to_string(row + 1) + " missing (header announces " +
                   std::to_string(n * t_len) + " rows)");
  return ds;
}

// ---------------------------------------------------------------------------
// Ground-truth sidecars
// ---------------------------------------------------------------------------

inline void save_states_csv(const std::string& path,
                            const std::vector<std::vector<int>>& states) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f << "seq,t,state\n";
  for (std::size_t s = 0; s < states.size(); ++s)
    for (std::size_t t = 0; t < states[s].size(); ++t)
      f << s << "," << t << "," << states[s][t] << "\n";
}

inline std::vector<std::vector<int>> load_states_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string line;
  std::getline(f, line);  // header
  std::vector<std::vector<int>> out;
  long row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    const std::string where = path + " row " + std::to_string(row + 1);
    if (cells.size() != 3) throw io_error(where + ": expected seq,t,state");
    const long seq = detail::parse_long(cells[0], where);
    const int st = static_cast<int>(detail::parse_long(cells[2], where));
    if (seq >= static_cast<long>(out.size())) out.resize(seq + 1);
    out[seq].push_back(st);
    ++row;
  }
  return out;
}

/// Weights sidecar rows: seq,t,w_1..w_K. Factors sidecar rows: k,f_1..f_D.
inline void save_weights_csv(const std::string& path, const Tensor& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f << "seq,t";
  for (std::size_t k = 0; k < w.shape[2]; ++k) f << ",w_" << (k + 1);
  f << "\n";
  for (std::size_t s = 0; s < w.shape[0]; ++s)
    for (std::size_t t = 0; t < w.shape[1]; ++t) {
      f << s << "," << t;
      for (std::size_t k = 0; k < w.shape[2]; ++k)
        f << "," << detail::fmt_double(w.v[(s * w.shape[1] + t) * w.shape[2] + k]);
      f << "\n";
    }
}

inline void save_factors_csv(const std::string& path, const Tensor& factors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f << "k";
  for (std::size_t d = 0; d < factors.cols(); ++d) f << ",f_" << (d + 1);
  f << "\n";
  for (std::size_t k = 0; k < factors.rows(); ++k) {
    f << (k + 1);
    for (std::size_t d = 0; d < factors.cols(); ++d)
      f << "," << detail::fmt_double(factors.at(k, d));
    f << "\n";
  }
}

// ---------------------------------------------------------------------------
// Forecast artifacts
// ---------------------------------------------------------------------------

/// Forecast CSV rows: t,d,predicted,std,truth (truth cell empty when unknown).
/// `t0` offsets the time column to global indices.
inline void save_forecast_csv(const std::string& path, const Tensor& pred, const Tensor& stddev,
                              const Tensor* truth, const Tensor* truth_mask, int t0,
                              int first_row = 0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  f << "t,d,predicted,std,truth\n";
  for (std::size_t t = first_row; t < pred.rows(); ++t)
    for (std::size_t d = 0; d < pred.cols(); ++d) {
      f << (t0 + static_cast<long>(t)) << "," << d << "," << detail::fmt_double(pred.at(t, d))
        << "," << detail::fmt_double(stddev.at(t, d)) << ",";
      if (truth && (!truth_mask || truth_mask->at(t, d) != 0.0))
        f << detail::fmt_double(truth->at(t, d));
      f << "\n";
    }
}

struct ForecastRows {
  std::vector<long> t;
  std::vector<int> d;
  std::vector<double> predicted, stddev;
  std::vector<double> truth;      // NaN when absent
  std::vector<bool> truth_known;
};

inline ForecastRows load_forecast_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string line;
  std::getline(f, line);
  ForecastRows out;
  long row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const std::string where = path + " row " + std::to_string(row + 1);
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) throw io_error(where + ": expected t,d,predicted,std,truth");
    out.t.push_back(detail::parse_long(cells[0], where));
    out.d.push_back(static_cast<int>(detail::parse_long(cells[1], where)));
    out.predicted.push_back(detail::parse_double(cells[2], where));
    out.stddev.push_back(detail::parse_double(cells[3], where));
    const bool known = !detail::is_missing_token(cells[4]);
    out.truth_known.push_back(known);
    out.truth.push_back(known ? detail::parse_double(cells[4], where) : 0.0);
    ++row;
  }
  return out;
}

/// State-path CSV rows: t,state,pi_1..pi_S (state is the 1-based argmax).
inline void save_statepath_csv(const std::string& path, const std::vector<StateBelief>& states,
                               int t0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  if (states.empty()) throw io_error("state path is empty");
  f << "t,state";
  for (std::size_t s = 0; s < states[0].size(); ++s) f << ",pi_" << (s + 1);
  f << "\n";
  for (std::size_t t = 0; t < states.size(); ++t) {
    int arg = 0;
    for (std::size_t s = 1; s < states[t].size(); ++s)
      if (states[t].p[s] > states[t].p[arg]) arg = static_cast<int>(s);
    f << (t0 + static_cast<long>(t)) << "," << (arg + 1);
    for (double p : states[t].p) f << "," << detail::fmt_double(p);
    f << "\n";
  }
}

struct StatePathRows {
  std::vector<long> t;
  std::vector<int> state;
  int s_count = 0;
};

inline StatePathRows load_statepath_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string line;
  std::getline(f, line);
  StatePathRows out;
  out.s_count = static_cast<int>(detail::split_csv_line(line).size()) - 2;
  long row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const std::string where = path + " row " + std::to_string(row + 1);
    auto cells = detail::split_csv_line(line);
    if (static_cast<int>(cells.size()) != out.s_count + 2)
      throw io_error(where + ": column count mismatch");
    out.t.push_back(detail::parse_long(cells[0], where));
    out.state.push_back(static_cast<int>(detail::parse_long(cells[1], where)));
    ++row;
  }
  return out;
}

/// Two-column training-curve text file: epoch elbo.
inline void save_curve(const std::string& path, const std::vector<double>& curve) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path);
  for (std::size_t e = 0; e < curve.size(); ++e)
    f << e << " " << detail::fmt_double(curve[e]) << "\n";
}

}  // namespace dsarf
