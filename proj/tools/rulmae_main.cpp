#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "rulmae/error.hpp"
#include "rulmae/evaluate.hpp"
#include "rulmae/pipeline.hpp"
#include "rulmae/selftest.hpp"
#include "rulmae/train.hpp"

namespace fs = std::filesystem;
using namespace rulmae;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;

void write_file(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorCode::IoError, "cannot write " + path);
  fn(out);
  if (!out) raise(ErrorCode::IoError, "short write to " + path);
}

// Collects flag -> config-field assignments so that explicitly passed flags
// override values from --config, which override built-in defaults.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {
    cmd_->add_option("--config", config_path_, "flat key = value config file");
  }

  template <typename T>
  CLI::Option* bind(const std::string& flag, T RunConfig::*field, const std::string& help) {
    auto holder = std::make_shared<T>(flags_.*field);
    CLI::Option* opt = cmd_->add_option(flag, *holder, help);
    appliers_.push_back([holder, field, opt](RunConfig& cfg) {
      if (opt->count() > 0) cfg.*field = *holder;
    });
    return opt;
  }

  void add_model_options() {
    bind("--d", &RunConfig::d, "model width");
    bind("--heads", &RunConfig::heads, "attention heads");
    bind("--layers", &RunConfig::layers, "encoder/decoder layers");
    bind("--window-len", &RunConfig::P, "timestamps per window");
    bind("--patch-len", &RunConfig::K, "timestamps per patch");
    bind("--stride", &RunConfig::stride, "training window stride");
    bind("--batch-size", &RunConfig::batch_size, "windows per optimizer step");
    bind("--lr", &RunConfig::lr, "learning rate (0 = phase default)");
    bind("--dropout", &RunConfig::dropout, "dropout rate");
    bind("--epochs", &RunConfig::epochs, "training epochs");
    bind("--pretrain-epochs", &RunConfig::pretrain_epochs,
         "phase-one epochs for reproduce (0 = same as --epochs)");
    bind("--gamma", &RunConfig::gamma, "selection tradeoff factor");
    bind("--lambda", &RunConfig::lambda, "selection threshold");
    seed_opt_ = bind("--seed", &RunConfig::seed, "run seed (env RULMAE_SEED as fallback)");
    loss_scope_ = cmd_->add_option("--loss-scope", loss_scope_str_,
                                   "reconstruction loss scope: all | masked_only");
  }

  RunConfig resolve() {
    RunConfig cfg;
    bool config_has_seed = false;
    if (!config_path_.empty()) {
      cfg = RunConfig::load_file(config_path_);
      std::ifstream in(config_path_);
      std::string line;
      while (std::getline(in, line)) {
        const auto pos = line.find_first_not_of(" \t");
        if (pos != std::string::npos && line.compare(pos, 4, "seed") == 0 &&
            line.find("synth", pos) != pos) {
          config_has_seed = true;
        }
      }
    }
    const bool seed_flag = seed_opt_ && seed_opt_->count() > 0;
    if (!seed_flag && !config_has_seed) {
      if (const char* env = std::getenv("RULMAE_SEED")) {
        cfg.seed = static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
      }
    }
    for (const auto& apply : appliers_) apply(cfg);
    if (loss_scope_ && loss_scope_->count() > 0) {
      if (loss_scope_str_ == "all") cfg.loss_scope = LossScope::all;
      else if (loss_scope_str_ == "masked_only") cfg.loss_scope = LossScope::masked_only;
      else throw CLI::ValidationError("--loss-scope must be all or masked_only");
    }
    return cfg;
  }

 private:
  CLI::App* cmd_;
  std::string config_path_;
  RunConfig flags_;
  std::string loss_scope_str_;
  CLI::Option* seed_opt_ = nullptr;
  CLI::Option* loss_scope_ = nullptr;
  std::vector<std::function<void(RunConfig&)>> appliers_;
};

NormStats load_norm_stats_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open norm stats " + path);
  NormStats stats = read_norm_stats(in);
  if (stats.selected.empty()) raise(ErrorCode::EmptyDataset, "no channels in " + path);
  return stats;
}

int cmd_preprocess(const std::string& data, double gamma, double lambda,
                   const std::string& out_dir) {
  const DatasetPaths paths = DatasetPaths::from_stem(data);
  const DatasetSplit train = load_train_split(paths.train_file);
  const FeatureReport report = select_features(train.units, gamma, lambda);
  fs::create_directories(out_dir);
  write_file(out_dir + "/feature_report.csv",
             [&](std::ostream& o) { write_feature_report_csv(report, o); });
  if (report.selected.empty()) {
    write_file(out_dir + "/norm_stats", [](std::ostream&) {});
    std::cerr << "warning: no channel passes the selection criteria (lambda too high?)\n";
  } else {
    const NormStats stats = fit_norm(train.units, report.selected);
    write_file(out_dir + "/norm_stats",
               [&](std::ostream& o) { write_norm_stats(stats, o); });
  }
  std::cout << "selected " << report.selected.size() << " of " << report.cor.size()
            << " channels; report in " << out_dir << "/feature_report.csv\n";
  return kExitOk;
}

int cmd_synth(const RunConfig& cfg, const std::string& out_dir, const std::string& name) {
  fs::create_directories(out_dir);
  const DatasetSplit train = generate_synthetic(
      cfg.synth_units, {cfg.synth_len_min, cfg.synth_len_max}, cfg.synth_features,
      cfg.synth_noise, cfg.synth_seed);
  const DatasetSplit test_full = generate_synthetic(
      cfg.synth_test_units, {cfg.synth_len_min, cfg.synth_len_max}, cfg.synth_features,
      cfg.synth_noise, mix_seed(cfg.synth_seed, 0x7E57DA7Au));
  const DatasetSplit test = truncate_for_test(test_full, mix_seed(cfg.synth_seed, 0x2DC4u), 5);
  write_file(out_dir + "/train_" + name + ".txt",
             [&](std::ostream& o) { write_cmapss(train, o); });
  write_file(out_dir + "/test_" + name + ".txt",
             [&](std::ostream& o) { write_cmapss(test, o); });
  write_file(out_dir + "/RUL_" + name + ".txt",
             [&](std::ostream& o) { write_truth(*test.test_rul_truth, o); });
  std::cout << "wrote " << train.units.size() << " training and " << test.units.size()
            << " test units under " << out_dir << "\n";
  return kExitOk;
}

int cmd_pretrain(RunConfig cfg, const std::string& norm_stats_path) {
  cfg.phase = Phase::pretrain;
  if (cfg.out_dir.empty()) cfg.out_dir = ".";
  fs::create_directories(cfg.out_dir);
  const DatasetPaths paths = DatasetPaths::from_stem(cfg.data);
  const DatasetSplit train = load_train_split(paths.train_file);

  Preprocessed prep;
  if (!norm_stats_path.empty()) {
    prep.stats = load_norm_stats_file(norm_stats_path);
  } else {
    prep = preprocess_train(train, cfg.gamma, cfg.lambda);
    write_file(cfg.out_dir + "/feature_report.csv",
               [&](std::ostream& o) { write_feature_report_csv(prep.report, o); });
    write_file(cfg.out_dir + "/norm_stats",
               [&](std::ostream& o) { write_norm_stats(prep.stats, o); });
  }

  std::vector<std::string> warnings;
  const std::vector<Window> windows =
      build_training_windows(train, prep.stats, cfg.P, cfg.stride, false, &warnings);
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "pretraining on " << windows.size() << " windows (J="
            << prep.stats.selected.size() << ")\n";

  const TrainResult result = pretrain(cfg, windows);
  const std::string ckpt_path = cfg.out_dir + "/checkpoint.bin";
  save_checkpoint({result.params, prep.stats, cfg.serialize()}, ckpt_path);
  write_file(cfg.out_dir + "/trainlog.csv",
             [&](std::ostream& o) { result.log.write_csv(o); });
  std::cout << "final loss " << result.log.epochs.back().loss << "; checkpoint at "
            << ckpt_path << "\n";
  return kExitOk;
}

int cmd_finetune(RunConfig cfg) {
  cfg.phase = Phase::finetune;
  if (cfg.out_dir.empty()) cfg.out_dir = ".";
  fs::create_directories(cfg.out_dir);
  const DatasetPaths paths = DatasetPaths::from_stem(cfg.data);
  const DatasetSplit train = load_train_split(paths.train_file);

  std::optional<Checkpoint> init;
  Preprocessed prep;
  if (!cfg.init_checkpoint.empty()) {
    if (!fs::exists(cfg.init_checkpoint)) {
      std::cerr << "checkpoint not found: " << cfg.init_checkpoint << "\n";
      return kExitError;
    }
    init = load_checkpoint(cfg.init_checkpoint);
    prep.stats = init->prep;  // inherit the pretraining preprocessing
  } else {
    prep = preprocess_train(train, cfg.gamma, cfg.lambda);
    write_file(cfg.out_dir + "/feature_report.csv",
               [&](std::ostream& o) { write_feature_report_csv(prep.report, o); });
    write_file(cfg.out_dir + "/norm_stats",
               [&](std::ostream& o) { write_norm_stats(prep.stats, o); });
  }

  std::vector<std::string> warnings;
  const std::vector<Window> windows =
      build_training_windows(train, prep.stats, cfg.P, cfg.stride, true, &warnings);
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "fine-tuning on " << windows.size() << " windows"
            << (init ? " (encoder inherited)" : " (fresh init)") << "\n";

  const TrainResult result = finetune(cfg, windows, init ? &init->params : nullptr);
  const std::string ckpt_path = cfg.out_dir + "/checkpoint.bin";
  save_checkpoint({result.params, prep.stats, cfg.serialize()}, ckpt_path);
  write_file(cfg.out_dir + "/trainlog.csv",
             [&](std::ostream& o) { result.log.write_csv(o); });
  std::cout << "final loss " << result.log.epochs.back().loss << "; checkpoint at "
            << ckpt_path << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& data, const std::string& ckpt_path,
                 const std::string& out_dir, std::optional<double> rul_cap) {
  if (!fs::exists(ckpt_path)) {
    std::cerr << "checkpoint not found: " << ckpt_path << "\n";
    return kExitError;
  }
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::deserialize(ckpt.config_echo);
  if (rul_cap.has_value()) cfg.rul_cap = *rul_cap;
  const DatasetPaths paths = DatasetPaths::from_stem(data);
  const DatasetSplit test = load_test_split(paths.test_file, paths.truth_file);

  const EvalReport report = evaluate_model(ckpt.params, ckpt.prep, cfg, test);
  const std::string dir = out_dir.empty() ? "." : out_dir;
  fs::create_directories(dir);
  write_file(dir + "/eval_report.csv", [&](std::ostream& o) { write_eval_csv(report, o); });
  const auto points = sorted_plot_points(report);
  write_file(dir + "/rul_plot.csv", [&](std::ostream& o) { write_plot_csv(points, o); });
  std::ifstream back(dir + "/rul_plot.csv");
  const auto parsed = read_plot_csv(back);
  write_file(dir + "/rul_plot.svg", [&](std::ostream& o) { write_plot_svg(parsed, o); });
  std::cout << "rmse " << report.rmse << " over " << report.rows.size()
            << " units; report in " << dir << "/eval_report.csv\n";
  return kExitOk;
}

int cmd_dump_window(const RunConfig& cfg, int unit_id, std::size_t start,
                    const std::string& out_path) {
  const DatasetPaths paths = DatasetPaths::from_stem(cfg.data);
  const DatasetSplit train = load_train_split(paths.train_file);
  const Preprocessed prep = preprocess_train(train, cfg.gamma, cfg.lambda);
  const UnitSeries* unit = nullptr;
  for (const UnitSeries& u : train.units) {
    if (u.unit_id == unit_id) unit = &u;
  }
  if (unit == nullptr) {
    raise(ErrorCode::EmptyDataset, "unit " + std::to_string(unit_id) + " not in dataset");
  }
  const UnitSeries norm = apply_norm(*unit, prep.stats);
  const std::vector<Window> windows = make_windows(norm, cfg.P, 1);
  if (start >= windows.size()) {
    raise(ErrorCode::InvalidRange, "start " + std::to_string(start) + " beyond last window " +
                                       std::to_string(windows.size() - 1));
  }
  Rng rng(cfg.seed);
  const PatchedWindow patched = apply_mask(patch(windows[start], cfg.K), cfg.mask_ratio, rng);
  write_file(out_path, [&](std::ostream& o) { write_patched_window_csv(patched, o); });
  std::cout << "wrote " << out_path << "\n";
  return kExitOk;
}

int cmd_reproduce(const RunConfig& base, const std::string& pretrain_data,
                  const std::string& finetune_data, const std::vector<double>& ratios,
                  const std::string& out_dir) {
  ReproduceOptions options;
  if (!ratios.empty()) options.ratios = ratios;
  options.out_dir = out_dir.empty() ? "." : out_dir;
  options.progress = &std::cout;
  const auto rows = reproduce(base, pretrain_data, finetune_data, options);
  std::ostringstream table;
  write_comparison_csv(rows, table);
  std::cout << table.str();
  std::cout << "table written to " << options.out_dir << "/comparison.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-pretraining pipeline for remaining-useful-life prediction"};
  app.require_subcommand(1);

  auto* preprocess = app.add_subcommand("preprocess", "score channels and fit normalization");
  std::string pp_data, pp_out = ".";
  double pp_gamma = 0.5, pp_lambda = 0.2;
  preprocess->add_option("--data", pp_data, "dataset stem, e.g. data/FD001")->required();
  preprocess->add_option("--gamma", pp_gamma, "tradeoff factor");
  preprocess->add_option("--lambda", pp_lambda, "selection threshold");
  preprocess->add_option("--out", pp_out, "output directory");

  auto* synth = app.add_subcommand("synth", "write a synthetic desk-scale corpus");
  ConfigBinder synth_binder(synth);
  std::string sy_out = ".", sy_name = "SYN";
  synth->add_option("--out", sy_out, "output directory");
  synth->add_option("--name", sy_name, "dataset name (files train_<name>.txt ...)");
  synth_binder.bind("--units", &RunConfig::synth_units, "training units");
  synth_binder.bind("--test-units", &RunConfig::synth_test_units, "test units");
  synth_binder.bind("--len-min", &RunConfig::synth_len_min, "min unit length");
  synth_binder.bind("--len-max", &RunConfig::synth_len_max, "max unit length");
  synth_binder.bind("--features", &RunConfig::synth_features, "channel count");
  synth_binder.bind("--noise", &RunConfig::synth_noise, "noise level");
  synth_binder.bind("--synth-seed", &RunConfig::synth_seed, "generator seed");

  auto* pre = app.add_subcommand("pretrain", "train the masked autoencoder");
  ConfigBinder pre_binder(pre);
  std::string pre_norm_stats;
  pre_binder.bind("--data", &RunConfig::data, "dataset stem")->required();
  pre_binder.bind("--out", &RunConfig::out_dir, "output directory");
  pre_binder.bind("--mask-ratio", &RunConfig::mask_ratio, "masking ratio in (0,1)");
  pre->add_option("--norm-stats", pre_norm_stats, "reuse preprocessing from this file");
  pre_binder.add_model_options();

  auto* fine = app.add_subcommand("finetune", "train the predictor");
  ConfigBinder fine_binder(fine);
  fine_binder.bind("--data", &RunConfig::data, "dataset stem")->required();
  fine_binder.bind("--out", &RunConfig::out_dir, "output directory");
  fine_binder.bind("--init", &RunConfig::init_checkpoint, "pretrained checkpoint");
  fine_binder.bind("--rul-cap", &RunConfig::rul_cap, "cap training labels (0 = off)");
  fine_binder.add_model_options();

  auto* eval = app.add_subcommand("evaluate", "terminal-RUL evaluation on a test split");
  std::string ev_data, ev_ckpt, ev_out = ".";
  double ev_cap = -1.0;
  eval->add_option("--data", ev_data, "dataset stem")->required();
  eval->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
  eval->add_option("--out", ev_out, "output directory");
  auto* cap_opt = eval->add_option("--rul-cap", ev_cap, "cap truth values (0 = off)");

  auto* rep = app.add_subcommand("reproduce", "baseline vs pretrained comparison table");
  ConfigBinder rep_binder(rep);
  std::string rep_pre, rep_fine, rep_out = ".";
  std::vector<double> rep_ratios;
  rep->add_option("--pretrain-data", rep_pre, "dataset stem for phase one")->required();
  rep->add_option("--finetune-data", rep_fine, "dataset stem for phase two")->required();
  rep->add_option("--ratios", rep_ratios, "masking ratios")->delimiter(',');
  rep->add_option("--out", rep_out, "output directory");
  rep_binder.bind("--rul-cap", &RunConfig::rul_cap, "cap training labels (0 = off)");
  rep_binder.add_model_options();

  auto* dump = app.add_subcommand("dump-window", "debug dump of one masked window as CSV");
  ConfigBinder dump_binder(dump);
  int du_unit = 1;
  std::size_t du_start = 0;
  std::string du_out = "window.csv";
  dump_binder.bind("--data", &RunConfig::data, "dataset stem")->required();
  dump->add_option("--unit", du_unit, "unit id");
  dump->add_option("--start", du_start, "window start offset within the unit");
  dump->add_option("--out", du_out, "output CSV path");
  dump_binder.bind("--mask-ratio", &RunConfig::mask_ratio, "masking ratio in [0,1)");
  dump_binder.add_model_options();

  auto* self = app.add_subcommand("selftest", "gradient checks and invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (preprocess->parsed()) return cmd_preprocess(pp_data, pp_gamma, pp_lambda, pp_out);
    if (synth->parsed()) return cmd_synth(synth_binder.resolve(), sy_out, sy_name);
    if (pre->parsed()) {
      RunConfig cfg = pre_binder.resolve();
      if (cfg.mask_ratio <= 0.0 || cfg.mask_ratio >= 1.0) {
        std::cerr << "usage error: --mask-ratio must be in (0,1)\n";
        return kExitUsage;
      }
      return cmd_pretrain(std::move(cfg), pre_norm_stats);
    }
    if (fine->parsed()) return cmd_finetune(fine_binder.resolve());
    if (eval->parsed()) {
      std::optional<double> cap;
      if (cap_opt->count() > 0) cap = ev_cap;
      return cmd_evaluate(ev_data, ev_ckpt, ev_out, cap);
    }
    if (rep->parsed()) {
      for (double r : rep_ratios) {
        if (r <= 0.0 || r >= 1.0) {
          std::cerr << "usage error: every ratio must be in (0,1)\n";
          return kExitUsage;
        }
      }
      return cmd_reproduce(rep_binder.resolve(), rep_pre, rep_fine, rep_ratios, rep_out);
    }
    if (dump->parsed()) {
      RunConfig cfg = dump_binder.resolve();
      if (cfg.mask_ratio < 0.0 || cfg.mask_ratio >= 1.0) {
        std::cerr << "usage error: --mask-ratio must be in [0,1)\n";
        return kExitUsage;
      }
      return cmd_dump_window(cfg, du_unit, du_start, du_out);
    }
    if (self->parsed()) return run_selftest(std::cout) ? kExitOk : kExitError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}
