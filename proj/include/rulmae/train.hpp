#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rulmae/features.hpp"
#include "rulmae/model.hpp"
#include "rulmae/windowing.hpp"

namespace rulmae {

enum class Phase { pretrain, finetune };

// Every tunable in one serializable record. Field defaults follow the
// reference configuration (width 128, 4 heads, 2 layers, dropout 0.1,
// learning rates 0.002 pretraining / 0.001 fine-tuning).
struct RunConfig {
  Phase phase = Phase::pretrain;
  double mask_ratio = 0.5;
  double lr = 0.0;  // 0 picks the phase default
  double dropout = 0.1;
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t P = 50;
  std::size_t K = 3;
  double gamma = 0.5;
  double lambda = 0.2;
  std::size_t epochs = 100;
  std::size_t pretrain_epochs = 0;  // 0 = same as epochs; used by reproduce
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t stride = 1;
  LossScope loss_scope = LossScope::all;
  double rul_cap = 0.0;  // <= 0 disables terminal-life label capping
  std::string data;
  std::string init_checkpoint;
  std::string out_dir;

  // Synthetic corpus block; kept in the config so desk-scale runs are
  // reproducible from a single file.
  std::size_t synth_units = 20;
  std::size_t synth_test_units = 24;
  int synth_len_min = 60;
  int synth_len_max = 90;
  std::size_t synth_features = 8;
  double synth_noise = 0.05;
  std::uint64_t synth_seed = 7;

  double effective_lr() const {
    if (lr > 0.0) return lr;
    return phase == Phase::pretrain ? 0.002 : 0.001;
  }
  ModelDims model_dims(std::size_t J) const {
    return ModelDims{d, heads, layers, K, J, 4};
  }

  std::string serialize() const;  // flat "key = value" text, stable order
  static RunConfig deserialize(const std::string& text);
  static RunConfig load_file(const std::string& path);

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
  double grad_norm = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::string config_echo;
  std::string checkpoint_path;

  // CSV columns: epoch, loss, wall_ms, grad_norm.
  void write_csv(std::ostream& out) const;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

// Phase one: per epoch the windows are reshuffled and masks resampled from
// per-(epoch, window) seeds, then the reconstruction loss is minimized with
// Adam. Raises EmptyDataset / NonFiniteLoss.
TrainResult pretrain(const RunConfig& config, const std::vector<Window>& windows);

// Phase two: no masking; minimizes the prediction loss over labeled
// windows. When `init` is given the tokenizer/encoder groups start from it
// (fresh regression head); otherwise everything is freshly initialized.
TrainResult finetune(const RunConfig& config, const std::vector<Window>& windows,
                     const ModelParams* init);

// Self-describing checkpoint container: version tag, config echo,
// preprocessing stats, then per-group little-endian 64-bit reals.
struct Checkpoint {
  ModelParams params;
  NormStats prep;
  std::string config_echo;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rulmae
