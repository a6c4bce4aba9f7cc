#include "rulmae/evaluate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "rulmae/error.hpp"

namespace rulmae {
namespace {

void append_double(std::string& s, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  s.append(buf, res.ptr);
}

std::string fmt(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

}  // namespace

double rmse_of(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return 0.0;
  double acc = 0.0;
  for (const EvalRow& r : rows) {
    const double d = r.truth - r.pred;
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(rows.size()));
}

EvalReport evaluate_model(const ModelParams& params, const NormStats& prep,
                          const RunConfig& config, const DatasetSplit& test) {
  if (!test.test_rul_truth.has_value()) {
    raise(ErrorCode::MissingTruth, "test split carries no terminal-RUL truth");
  }
  if (test.test_rul_truth->size() != test.units.size()) {
    raise(ErrorCode::MissingTruth, "truth entries do not match test units");
  }
  EvalReport report;
  report.config_echo = config.serialize();
  for (std::size_t i = 0; i < test.units.size(); ++i) {
    const UnitSeries norm = apply_norm(test.units[i], prep);
    const Window w = last_window(norm, config.P);
    const PatchedWindow patched = patch(w, config.K);
    Tape tape;
    const BoundParams bound = bind_params(tape, params, false);
    ForwardOptions opts;  // eval mode
    RulOutput out = rul_forward(tape, bound, patched, opts, false);
    const Tensor& pred = tape.value(out.pred);
    EvalRow row;
    row.unit_id = test.units[i].unit_id;
    double truth = static_cast<double>((*test.test_rul_truth)[i]);
    if (config.rul_cap > 0.0) truth = std::min(truth, config.rul_cap);
    row.truth = truth;
    row.pred = pred[pred.size() - 1];  // final timestamp is never padding
    report.rows.push_back(row);
  }
  report.rmse = rmse_of(report.rows);
  return report;
}

void write_eval_csv(const EvalReport& report, std::ostream& out) {
  out << "# rmse = " << fmt(report.rmse) << "\n";
  out << "# count = " << report.rows.size() << "\n";
  std::istringstream echo(report.config_echo);
  std::string echo_line;
  while (std::getline(echo, echo_line)) out << "# cfg " << echo_line << "\n";
  out << "unit_id,true_rul,predicted_rul\n";
  std::string line;
  for (const EvalRow& r : report.rows) {
    line.clear();
    line += std::to_string(r.unit_id);
    line += ',';
    append_double(line, r.truth);
    line += ',';
    append_double(line, r.pred);
    line += '\n';
    out << line;
  }
}

std::vector<PlotPoint> sorted_plot_points(const EvalReport& report) {
  std::vector<PlotPoint> points;
  points.reserve(report.rows.size());
  for (const EvalRow& r : report.rows) points.push_back({r.truth, r.pred, r.unit_id});
  std::sort(points.begin(), points.end(), [](const PlotPoint& a, const PlotPoint& b) {
    if (a.actual != b.actual) return a.actual < b.actual;
    return a.unit_id < b.unit_id;
  });
  return points;
}

void write_plot_csv(const std::vector<PlotPoint>& points, std::ostream& out) {
  out << "# test units sorted by actual RUL ascending\n";
  out << "actual,predicted,unit_id\n";
  std::string line;
  for (const PlotPoint& p : points) {
    line.clear();
    append_double(line, p.actual);
    line += ',';
    append_double(line, p.predicted);
    line += ',';
    line += std::to_string(p.unit_id);
    line += '\n';
    out << line;
  }
}

std::vector<PlotPoint> read_plot_csv(std::istream& in) {
  std::vector<PlotPoint> points;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("actual,", 0) == 0) continue;
    std::istringstream ls(line);
    PlotPoint p;
    char comma = 0;
    if (!(ls >> p.actual >> comma >> p.predicted >> comma >> p.unit_id)) {
      raise(ErrorCode::CorruptFile, "bad plot row: " + line);
    }
    points.push_back(p);
  }
  return points;
}

void write_plot_svg(const std::vector<PlotPoint>& points, std::ostream& out) {
  const double width = 720, height = 480;
  const double ml = 64, mr = 24, mt = 24, mb = 48;
  const double plot_w = width - ml - mr;
  const double plot_h = height - mt - mb;
  double vmax = 1.0;
  for (const PlotPoint& p : points) {
    vmax = std::max({vmax, p.actual, p.predicted});
  }
  const std::size_t n = points.size();
  auto px = [&](std::size_t i) {
    const double frac = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.5;
    return ml + frac * plot_w;
  };
  auto py = [&](double v) { return mt + plot_h * (1.0 - v / vmax); };

  auto polyline = [&](auto value_of) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) pts += ' ';
      append_double(pts, px(i));
      pts += ',';
      append_double(pts, py(value_of(points[i])));
    }
    return pts;
  };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "  <!-- test units sorted by actual RUL ascending -->\n";
  out << "  <line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\"" << ml + plot_w
      << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
  out << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << mt + plot_h << "\" stroke=\"black\"/>\n";
  if (n > 0) {
    out << "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\""
        << polyline([](const PlotPoint& p) { return p.actual; }) << "\"/>\n";
    out << "  <polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\""
        << polyline([](const PlotPoint& p) { return p.predicted; }) << "\"/>\n";
  }
  out << "  <text x=\"" << ml << "\" y=\"" << mt - 8
      << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f77b4\">actual</text>\n";
  out << "  <text x=\"" << ml + 64 << "\" y=\"" << mt - 8
      << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#d62728\">predicted</text>\n";
  out << "  <text x=\"" << ml + plot_w / 2 << "\" y=\"" << height - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">test "
         "units (sorted by actual RUL)</text>\n";
  out << "  <text x=\"12\" y=\"" << mt + plot_h / 2
      << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 12 "
      << mt + plot_h / 2 << ")\" text-anchor=\"middle\">RUL (cycles)</text>\n";
  out << "  <text x=\"" << ml - 6 << "\" y=\"" << mt + 4
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << fmt(vmax)
      << "</text>\n";
  out << "  <text x=\"" << ml - 6 << "\" y=\"" << mt + plot_h + 4
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">0</text>\n";
  out << "</svg>\n";
}

void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out) {
  out << "method,mask_ratio,rmse,delta_vs_baseline\n";
  std::string line;
  for (const ComparisonRow& r : rows) {
    line.clear();
    line += r.method;
    line += ',';
    if (r.mask_ratio.has_value()) append_double(line, *r.mask_ratio);
    else line += "--";
    line += ',';
    append_double(line, r.rmse);
    line += ',';
    if (r.delta.has_value()) append_double(line, *r.delta);
    else line += "--";
    line += '\n';
    out << line;
  }
}

namespace {

void write_file(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorCode::IoError, "cannot write " + path);
  fn(out);
  if (!out) raise(ErrorCode::IoError, "short write to " + path);
}

void write_arm_eval(const std::string& dir, const EvalReport& report) {
  write_file(dir + "/eval_report.csv", [&](std::ostream& o) { write_eval_csv(report, o); });
  const auto points = sorted_plot_points(report);
  write_file(dir + "/rul_plot.csv", [&](std::ostream& o) { write_plot_csv(points, o); });
  std::ifstream back(dir + "/rul_plot.csv");
  const auto parsed = read_plot_csv(back);
  write_file(dir + "/rul_plot.svg", [&](std::ostream& o) { write_plot_svg(parsed, o); });
}

std::string arm_dir_name(double ratio) {
  return "mask" + std::to_string(static_cast<int>(std::llround(ratio * 100.0)));
}

}  // namespace

std::vector<ComparisonRow> reproduce(const RunConfig& base,
                                     const std::string& pretrain_stem,
                                     const std::string& finetune_stem,
                                     const ReproduceOptions& options) {
  namespace fs = std::filesystem;
  const std::string out_dir = options.out_dir.empty() ? "." : options.out_dir;
  fs::create_directories(out_dir);
  auto note = [&](const std::string& msg) {
    if (options.progress) (*options.progress) << msg << "\n" << std::flush;
  };

  const DatasetPaths pre_paths = DatasetPaths::from_stem(pretrain_stem);
  const DatasetPaths fine_paths = DatasetPaths::from_stem(finetune_stem);
  const DatasetSplit pre_train = load_train_split(pre_paths.train_file);
  const DatasetSplit fine_train = load_train_split(fine_paths.train_file);
  const DatasetSplit fine_test =
      load_test_split(fine_paths.test_file, fine_paths.truth_file);

  // One preprocessing, fitted where the representation is learned, shared by
  // every arm so the arms differ only in encoder initialization.
  const Preprocessed prep = preprocess_train(pre_train, base.gamma, base.lambda);
  write_file(out_dir + "/feature_report.csv",
             [&](std::ostream& o) { write_feature_report_csv(prep.report, o); });
  write_file(out_dir + "/norm_stats",
             [&](std::ostream& o) { write_norm_stats(prep.stats, o); });

  std::vector<std::string> warnings;
  const std::vector<Window> pre_windows =
      build_training_windows(pre_train, prep.stats, base.P, base.stride, false, &warnings);
  const std::vector<Window> fine_windows =
      build_training_windows(fine_train, prep.stats, base.P, base.stride, true, &warnings);
  for (const std::string& w : warnings) note("warning: " + w);

  RunConfig pre_cfg = base;
  pre_cfg.phase = Phase::pretrain;
  pre_cfg.seed = mix_seed(base.seed, 0x9127u);
  if (base.pretrain_epochs > 0) pre_cfg.epochs = base.pretrain_epochs;
  RunConfig fine_cfg = base;
  fine_cfg.phase = Phase::finetune;
  fine_cfg.seed = mix_seed(base.seed, 0xF17Eu);

  std::vector<ComparisonRow> arm_rows;
  std::optional<ComparisonRow> baseline_row;
  double baseline_rmse = 0.0;

  auto flush = [&]() {
    std::vector<ComparisonRow> rows = arm_rows;
    if (baseline_row) rows.push_back(*baseline_row);
    write_file(out_dir + "/comparison.csv",
               [&](std::ostream& o) { write_comparison_csv(rows, o); });
  };

  // Baseline arm first so deltas can be attached as arms complete.
  {
    const std::string dir = out_dir + "/baseline";
    fs::create_directories(dir);
    note("baseline: fine-tuning from scratch (" + std::to_string(fine_windows.size()) +
         " windows)");
    TrainResult result = finetune(fine_cfg, fine_windows, nullptr);
    save_checkpoint({result.params, prep.stats, fine_cfg.serialize()},
                    dir + "/checkpoint.bin");
    write_file(dir + "/trainlog.csv", [&](std::ostream& o) { result.log.write_csv(o); });
    EvalReport report = evaluate_model(result.params, prep.stats, fine_cfg, fine_test);
    write_arm_eval(dir, report);
    baseline_rmse = report.rmse;
    baseline_row = ComparisonRow{"without_masked_pretraining", std::nullopt, report.rmse,
                                 std::nullopt};
    note("baseline: rmse " + fmt(report.rmse));
    flush();
  }

  for (double ratio : options.ratios) {
    const std::string dir = out_dir + "/" + arm_dir_name(ratio);
    fs::create_directories(dir);
    RunConfig arm_pre = pre_cfg;
    arm_pre.mask_ratio = ratio;
    note(arm_dir_name(ratio) + ": pretraining (" + std::to_string(pre_windows.size()) +
         " windows)");
    TrainResult pre_result = pretrain(arm_pre, pre_windows);
    save_checkpoint({pre_result.params, prep.stats, arm_pre.serialize()},
                    dir + "/pretrain_checkpoint.bin");
    write_file(dir + "/trainlog_pretrain.csv",
               [&](std::ostream& o) { pre_result.log.write_csv(o); });

    note(arm_dir_name(ratio) + ": fine-tuning with inherited encoder");
    TrainResult fine_result = finetune(fine_cfg, fine_windows, &pre_result.params);
    save_checkpoint({fine_result.params, prep.stats, fine_cfg.serialize()},
                    dir + "/checkpoint.bin");
    write_file(dir + "/trainlog.csv",
               [&](std::ostream& o) { fine_result.log.write_csv(o); });
    EvalReport report = evaluate_model(fine_result.params, prep.stats, fine_cfg, fine_test);
    write_arm_eval(dir, report);
    arm_rows.push_back(ComparisonRow{"with_masked_pretraining", ratio, report.rmse,
                                     baseline_rmse - report.rmse});
    note(arm_dir_name(ratio) + ": rmse " + fmt(report.rmse) + " (baseline " +
         fmt(baseline_rmse) + ")");
    flush();
  }

  std::vector<ComparisonRow> rows = arm_rows;
  if (baseline_row) rows.push_back(*baseline_row);
  return rows;
}

}  // namespace rulmae
