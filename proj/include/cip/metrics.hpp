#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cip/config.hpp"

namespace cip {

struct MetricsRow {
  long frames = 0;
  long update_idx = 0;
  int phase = 0;
  double success_rate = 0.0;        // greedy evaluation
  double train_success_rate = 0.0;  // sampled-policy episodes since last row
  std::vector<double> activation;      // per primitive, sums to 1
  std::vector<double> mean_info_cost;  // per primitive
  std::vector<double> mean_alpha;      // per primitive
  double alpha_entropy = 0.0;
  double pg_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double reg_loss = 0.0;
  double grad_norm = 0.0;
  double wall_clock_s = 0.0;
};

inline std::string metrics_header(int k) {
  std::string h = "frames,update,phase,success_rate,train_success_rate";
  for (int i = 0; i < k; ++i) h += ",act_freq_" + std::to_string(i);
  for (int i = 0; i < k; ++i) h += ",mean_L_" + std::to_string(i);
  for (int i = 0; i < k; ++i) h += ",mean_alpha_" + std::to_string(i);
  h += ",alpha_entropy,pg_loss,value_loss,entropy,reg_loss,grad_norm,wall_clock_s";
  return h;
}

class MetricsWriter {
 public:
  MetricsWriter() = default;

  void open(const std::string& path, int k) {
    k_ = k;
    out_.open(path);
    if (!out_) throw std::runtime_error("metrics: cannot write " + path);
    out_ << metrics_header(k) << "\n";
    out_.flush();
  }

  void append(const MetricsRow& row) {
    using detail::fmt_g17;
    out_ << row.frames << "," << row.update_idx << "," << row.phase << ","
         << fmt_g17(row.success_rate) << "," << fmt_g17(row.train_success_rate);
    for (int i = 0; i < k_; ++i) out_ << "," << fmt_g17(row.activation[i]);
    for (int i = 0; i < k_; ++i) out_ << "," << fmt_g17(row.mean_info_cost[i]);
    for (int i = 0; i < k_; ++i) out_ << "," << fmt_g17(row.mean_alpha[i]);
    out_ << "," << fmt_g17(row.alpha_entropy) << "," << fmt_g17(row.pg_loss) << ","
         << fmt_g17(row.value_loss) << "," << fmt_g17(row.entropy) << "," << fmt_g17(row.reg_loss)
         << "," << fmt_g17(row.grad_norm) << "," << fmt_g17(row.wall_clock_s) << "\n";
    out_.flush();
  }

  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
  int k_ = 0;
};

inline std::vector<std::string> split_comma(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("metrics: empty file " + path);
  int k = 0;
  for (const auto& col : split_comma(header))
    if (col.rfind("act_freq_", 0) == 0) ++k;
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_comma(line);
    if (static_cast<int>(f.size()) != 5 + 3 * k + 7)
      throw std::runtime_error("metrics: malformed row in " + path);
    MetricsRow r;
    std::size_t i = 0;
    r.frames = std::stol(f[i++]);
    r.update_idx = std::stol(f[i++]);
    r.phase = std::stoi(f[i++]);
    r.success_rate = std::stod(f[i++]);
    r.train_success_rate = std::stod(f[i++]);
    r.activation.resize(k);
    for (int j = 0; j < k; ++j) r.activation[j] = std::stod(f[i++]);
    r.mean_info_cost.resize(k);
    for (int j = 0; j < k; ++j) r.mean_info_cost[j] = std::stod(f[i++]);
    r.mean_alpha.resize(k);
    for (int j = 0; j < k; ++j) r.mean_alpha[j] = std::stod(f[i++]);
    r.alpha_entropy = std::stod(f[i++]);
    r.pg_loss = std::stod(f[i++]);
    r.value_loss = std::stod(f[i++]);
    r.entropy = std::stod(f[i++]);
    r.reg_loss = std::stod(f[i++]);
    r.grad_norm = std::stod(f[i++]);
    r.wall_clock_s = std::stod(f[i++]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Interquartile range via linear-interpolation quantiles.
inline double iqr(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("iqr: empty input");
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  return quantile(0.75) - quantile(0.25);
}

}  // namespace cip
