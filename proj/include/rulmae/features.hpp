#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "rulmae/ingest.hpp"

namespace rulmae {

// Per-channel trend scores and the resulting selection. criteria[j] =
// gamma*cor[j] + (1-gamma)*mono[j] - lambda; selected = { j : criteria > 0 }.
struct FeatureReport {
  std::vector<double> cor;
  std::vector<double> mono;
  std::vector<double> criteria;
  std::vector<std::size_t> selected;  // ascending channel indices
  double gamma = 0.5;
  double lambda = 0.2;
};

// Training-split min/max per selected channel, in raw sensor units.
struct NormStats {
  std::vector<std::size_t> selected;  // ascending
  std::vector<double> min_v;
  std::vector<double> max_v;
};

// |Pearson correlation| between the sequence and its time index 1..N.
// Zero-variance sequences score 0; sequences shorter than 2 score 0.
double correlation(std::span<const double> seq);

// |#(rising steps) - #(falling steps)| / (N-1); flat steps count for neither.
double monotonicity(std::span<const double> seq);

// Scores averaged uniformly over units (each over its full lifetime).
FeatureReport select_features(const std::vector<UnitSeries>& units, double gamma,
                              double lambda);

NormStats fit_norm(const std::vector<UnitSeries>& units,
                   const std::vector<std::size_t>& selected);

// Returns a series holding only the selected channels, each mapped through
// (v - min)/(max - min). Constant channels (min == max) map to 0. Values
// from outside the fitted range are not clamped.
UnitSeries apply_norm(const UnitSeries& unit, const NormStats& stats);

std::vector<double> channel_of(const UnitSeries& unit, std::size_t j);

void write_feature_report_csv(const FeatureReport& report, std::ostream& out);
void write_norm_stats(const NormStats& stats, std::ostream& out);
NormStats read_norm_stats(std::istream& in);

}  // namespace rulmae
