#include "rulmae/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "rulmae/error.hpp"

namespace rulmae {
namespace {

void append_double(std::string& line, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  line.append(buf, res.ptr);
}

}  // namespace

double correlation(std::span<const double> seq) {
  const std::size_t n = seq.size();
  if (n < 2) return 0.0;
  double mean_f = 0.0;
  for (double v : seq) mean_f += v;
  mean_f /= static_cast<double>(n);
  const double mean_i = (static_cast<double>(n) + 1.0) / 2.0;  // mean of 1..N
  double num = 0.0, var_f = 0.0, var_i = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double df = seq[i] - mean_f;
    const double di = static_cast<double>(i + 1) - mean_i;
    num += df * di;
    var_f += df * df;
    var_i += di * di;
  }
  if (var_f <= 0.0) return 0.0;  // constant channel carries no signal
  return std::fabs(num) / std::sqrt(var_f * var_i);
}

double monotonicity(std::span<const double> seq) {
  const std::size_t n = seq.size();
  if (n < 2) return 0.0;
  long pos = 0, neg = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d = seq[i + 1] - seq[i];
    if (d > 0.0) ++pos;
    else if (d < 0.0) ++neg;
  }
  return std::fabs(static_cast<double>(pos - neg)) / static_cast<double>(n - 1);
}

std::vector<double> channel_of(const UnitSeries& unit, std::size_t j) {
  std::vector<double> out(unit.length);
  for (std::size_t i = 0; i < unit.length; ++i) out[i] = unit.feature(i, j);
  return out;
}

FeatureReport select_features(const std::vector<UnitSeries>& units, double gamma,
                              double lambda) {
  if (units.empty()) raise(ErrorCode::EmptyDataset, "no units to score");
  const std::size_t n_features = units.front().n_features;
  for (const UnitSeries& u : units) {
    if (u.n_features != n_features) {
      raise(ErrorCode::ShapeMismatch, "units disagree on channel count");
    }
  }
  FeatureReport report;
  report.gamma = gamma;
  report.lambda = lambda;
  report.cor.assign(n_features, 0.0);
  report.mono.assign(n_features, 0.0);
  report.criteria.assign(n_features, 0.0);

  std::size_t usable = 0;
  for (const UnitSeries& u : units) {
    if (u.length < 2) continue;  // metrics undefined on a single sample
    ++usable;
    for (std::size_t j = 0; j < n_features; ++j) {
      const auto seq = channel_of(u, j);
      report.cor[j] += correlation(seq);
      report.mono[j] += monotonicity(seq);
    }
  }
  if (usable == 0) raise(ErrorCode::EmptyDataset, "no unit has at least 2 cycles");
  for (std::size_t j = 0; j < n_features; ++j) {
    report.cor[j] /= static_cast<double>(usable);
    report.mono[j] /= static_cast<double>(usable);
    report.criteria[j] = gamma * report.cor[j] + (1.0 - gamma) * report.mono[j] - lambda;
    if (report.criteria[j] > 0.0) report.selected.push_back(j);
  }
  return report;
}

NormStats fit_norm(const std::vector<UnitSeries>& units,
                   const std::vector<std::size_t>& selected) {
  if (units.empty()) raise(ErrorCode::EmptyDataset, "no units to fit");
  if (selected.empty()) raise(ErrorCode::EmptyDataset, "no channels selected");
  NormStats stats;
  stats.selected = selected;
  std::sort(stats.selected.begin(), stats.selected.end());
  stats.min_v.assign(stats.selected.size(), std::numeric_limits<double>::infinity());
  stats.max_v.assign(stats.selected.size(), -std::numeric_limits<double>::infinity());
  for (const UnitSeries& u : units) {
    for (std::size_t s = 0; s < stats.selected.size(); ++s) {
      const std::size_t j = stats.selected[s];
      if (j >= u.n_features) {
        raise(ErrorCode::UnknownFeature,
              "channel " + std::to_string(j) + " not present in unit data");
      }
      for (std::size_t i = 0; i < u.length; ++i) {
        const double v = u.feature(i, j);
        stats.min_v[s] = std::min(stats.min_v[s], v);
        stats.max_v[s] = std::max(stats.max_v[s], v);
      }
    }
  }
  return stats;
}

UnitSeries apply_norm(const UnitSeries& unit, const NormStats& stats) {
  UnitSeries out;
  out.unit_id = unit.unit_id;
  out.length = unit.length;
  out.n_features = stats.selected.size();
  out.cycles = unit.cycles;
  out.rul = unit.rul;
  out.features.resize(out.length * out.n_features);
  for (std::size_t s = 0; s < stats.selected.size(); ++s) {
    const std::size_t j = stats.selected[s];
    if (j >= unit.n_features) {
      raise(ErrorCode::UnknownFeature,
            "channel " + std::to_string(j) + " not present in unit data");
    }
    const double lo = stats.min_v[s];
    const double range = stats.max_v[s] - lo;
    for (std::size_t i = 0; i < unit.length; ++i) {
      const double v = unit.feature(i, j);
      out.features[i * out.n_features + s] = range > 0.0 ? (v - lo) / range : 0.0;
    }
  }
  return out;
}

void write_feature_report_csv(const FeatureReport& report, std::ostream& out) {
  std::string line = "index,cor,mono,criteria,selected\n";
  out << line;
  for (std::size_t j = 0; j < report.cor.size(); ++j) {
    line.clear();
    line += std::to_string(j);
    line += ',';
    append_double(line, report.cor[j]);
    line += ',';
    append_double(line, report.mono[j]);
    line += ',';
    append_double(line, report.criteria[j]);
    line += ',';
    const bool sel = std::binary_search(report.selected.begin(), report.selected.end(), j);
    line += sel ? '1' : '0';
    line += '\n';
    out << line;
  }
}

void write_norm_stats(const NormStats& stats, std::ostream& out) {
  std::string line;
  for (std::size_t s = 0; s < stats.selected.size(); ++s) {
    line.clear();
    line += std::to_string(stats.selected[s]);
    line += ' ';
    append_double(line, stats.min_v[s]);
    line += ' ';
    append_double(line, stats.max_v[s]);
    line += '\n';
    out << line;
  }
}

NormStats read_norm_stats(std::istream& in) {
  NormStats stats;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::size_t j;
    double lo, hi;
    if (!(ls >> j >> lo >> hi)) {
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      raise(ErrorCode::CorruptFile, "bad norm stats line: " + line);
    }
    stats.selected.push_back(j);
    stats.min_v.push_back(lo);
    stats.max_v.push_back(hi);
  }
  return stats;
}

}  // namespace rulmae
