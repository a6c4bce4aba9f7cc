#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rulmae/ingest.hpp"
#include "rulmae/pipeline.hpp"
#include "rulmae/train.hpp"

namespace rulmae {

struct EvalRow {
  int unit_id = 0;
  double truth = 0.0;
  double pred = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double rmse = 0.0;
  std::string config_echo;
};

double rmse_of(const std::vector<EvalRow>& rows);

// Terminal-life evaluation: one prediction per test unit from its last-P
// window (left-padded when short), scored at the final timestamp against
// the truth file. Raises MissingTruth when the split carries no truth.
EvalReport evaluate_model(const ModelParams& params, const NormStats& prep,
                          const RunConfig& config, const DatasetSplit& test);

void write_eval_csv(const EvalReport& report, std::ostream& out);

struct PlotPoint {
  double actual = 0.0;
  double predicted = 0.0;
  int unit_id = 0;
};

// Points sorted by actual value ascending (ties by unit id).
std::vector<PlotPoint> sorted_plot_points(const EvalReport& report);
void write_plot_csv(const std::vector<PlotPoint>& points, std::ostream& out);
std::vector<PlotPoint> read_plot_csv(std::istream& in);
// The SVG is always rendered from points parsed back out of the CSV.
void write_plot_svg(const std::vector<PlotPoint>& points, std::ostream& out);

struct ComparisonRow {
  std::string method;
  std::optional<double> mask_ratio;
  double rmse = 0.0;
  std::optional<double> delta;  // baseline rmse - this rmse
};

void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out);

struct ReproduceOptions {
  std::vector<double> ratios{0.2, 0.5, 0.75};
  std::string out_dir;
  std::ostream* progress = nullptr;
};

// Comparison protocol: a baseline arm trained from scratch plus one arm per
// masking ratio that inherits the pretrained encoder; all other settings
// identical across arms. comparison.csv is re-flushed after every completed
// arm. Returns the rows in table order (arms by given ratio, baseline last).
std::vector<ComparisonRow> reproduce(const RunConfig& base,
                                     const std::string& pretrain_stem,
                                     const std::string& finetune_stem,
                                     const ReproduceOptions& options);

}  // namespace rulmae
