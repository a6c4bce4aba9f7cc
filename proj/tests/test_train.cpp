#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rulmae/error.hpp"
#include "rulmae/rng.hpp"
#include "rulmae/train.hpp"

using namespace rulmae;

namespace {

std::vector<Window> tiny_windows(std::size_t count, std::size_t P, std::size_t J,
                                 bool labeled, std::uint64_t seed) {
  std::vector<Window> out;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Window w;
    w.P = P;
    w.J = J;
    w.unit_id = static_cast<int>(i) + 1;
    w.features.resize(P * J);
    for (double& v : w.features) v = rng.uniform01();
    if (labeled) {
      std::vector<double> labels(P);
      for (std::size_t t = 0; t < P; ++t) labels[t] = static_cast<double>(P - t);
      w.labels = std::move(labels);
    }
    out.push_back(std::move(w));
  }
  return out;
}

RunConfig small_config(Phase phase) {
  RunConfig cfg;
  cfg.phase = phase;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.P = 12;
  cfg.K = 3;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 99;
  cfg.mask_ratio = 0.5;
  cfg.dropout = 0.1;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config: serialize/deserialize round trip preserves every field") {
  RunConfig cfg = small_config(Phase::finetune);
  cfg.lr = 0.0042;
  cfg.rul_cap = 125;
  cfg.loss_scope = LossScope::masked_only;
  cfg.data = "/tmp/FD001";
  cfg.init_checkpoint = "ck.bin";
  cfg.out_dir = "outdir";
  cfg.synth_noise = 0.125;
  const RunConfig back = RunConfig::deserialize(cfg.serialize());
  CHECK(back == cfg);
}

TEST_CASE("config: defaults follow the reference settings") {
  RunConfig cfg;
  CHECK(cfg.effective_lr() == 0.002);
  cfg.phase = Phase::finetune;
  CHECK(cfg.effective_lr() == 0.001);
  CHECK(cfg.dropout == 0.1);
  CHECK(cfg.d == 128);
  CHECK(cfg.heads == 4);
  CHECK(cfg.layers == 2);
  CHECK(cfg.P == 50);
  CHECK(cfg.K == 3);
  CHECK(cfg.gamma == 0.5);
  CHECK(cfg.lambda == 0.2);
}

TEST_CASE("config: malformed lines and unknown keys raise CorruptFile") {
  CHECK_THROWS_AS(RunConfig::deserialize("nonsense line"), Error);
  CHECK_THROWS_AS(RunConfig::deserialize("unknown_key = 3"), Error);
  CHECK_THROWS_AS(RunConfig::deserialize("epochs = many"), Error);
}

TEST_CASE("pretrain: loss drops on a single window and logs are deterministic") {
  const auto windows = tiny_windows(1, 12, 2, false, 7);
  RunConfig cfg = small_config(Phase::pretrain);
  cfg.epochs = 200;
  cfg.mask_ratio = 0.2;
  const TrainResult a = pretrain(cfg, windows);
  REQUIRE(a.log.epochs.size() == 200);
  CHECK(a.log.epochs.back().loss < a.log.epochs.front().loss);
  for (const EpochLog& e : a.log.epochs) {
    CHECK(std::isfinite(e.loss));
    CHECK(std::isfinite(e.grad_norm));
  }
  const TrainResult b = pretrain(cfg, windows);
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
    CHECK(a.log.epochs[i].loss == b.log.epochs[i].loss);          // bitwise
    CHECK(a.log.epochs[i].grad_norm == b.log.epochs[i].grad_norm);
  }
}

TEST_CASE("pretrain: masking ratio 0 violates the phase contract") {
  const auto windows = tiny_windows(2, 12, 2, false, 8);
  RunConfig cfg = small_config(Phase::pretrain);
  cfg.mask_ratio = 0.0;
  CHECK_THROWS_AS(pretrain(cfg, windows), Error);
}

TEST_CASE("pretrain: empty window list raises EmptyDataset") {
  RunConfig cfg = small_config(Phase::pretrain);
  CHECK_THROWS_AS(pretrain(cfg, {}), Error);
}

TEST_CASE("finetune: unlabeled window raises MissingLabels") {
  auto windows = tiny_windows(2, 12, 2, true, 9);
  windows[1].labels.reset();
  RunConfig cfg = small_config(Phase::finetune);
  try {
    finetune(cfg, windows, nullptr);
    FAIL("expected MissingLabels");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingLabels);
  }
}

TEST_CASE("finetune: single window overfits to small loss") {
  const auto windows = tiny_windows(1, 12, 2, true, 10);
  RunConfig cfg = small_config(Phase::finetune);
  cfg.epochs = 400;
  cfg.lr = 0.01;
  cfg.dropout = 0.0;
  const TrainResult r = finetune(cfg, windows, nullptr);
  CHECK(r.log.epochs.back().loss < 1.0);
}

TEST_CASE("finetune: huge labels blow the loss up into NonFiniteLoss") {
  auto windows = tiny_windows(1, 12, 2, true, 11);
  for (double& v : *windows[0].labels) v = 1e200;
  RunConfig cfg = small_config(Phase::finetune);
  try {
    finetune(cfg, windows, nullptr);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
  }
}

TEST_CASE("finetune: rul_cap clips the training labels") {
  auto windows = tiny_windows(1, 12, 2, true, 12);
  RunConfig cfg = small_config(Phase::finetune);
  cfg.epochs = 1;
  cfg.rul_cap = 5.0;
  // capped labels max out at 5, so an all-zero prediction cannot lose more
  // than 25 per step; without the cap labels reach 12 (loss ~48+).
  const TrainResult r = finetune(cfg, windows, nullptr);
  CHECK(r.log.epochs[0].loss < 26.0);
}

TEST_CASE("finetune with init: encoder groups start bitwise-equal to the checkpoint") {
  const auto pre_windows = tiny_windows(2, 12, 2, false, 13);
  RunConfig pre_cfg = small_config(Phase::pretrain);
  pre_cfg.epochs = 2;
  const TrainResult pre = pretrain(pre_cfg, pre_windows);

  const auto fine_windows = tiny_windows(2, 12, 2, true, 14);
  RunConfig fine_cfg = small_config(Phase::finetune);
  fine_cfg.epochs = 0;  // step 0 snapshot
  const TrainResult fine = finetune(fine_cfg, fine_windows, &pre.params);
  CHECK(fine.params.token_proj_w.vec() == pre.params.token_proj_w.vec());
  CHECK(fine.params.tokenizer_conv.value_k.vec() == pre.params.tokenizer_conv.value_k.vec());
  for (std::size_t i = 0; i < fine.params.encoder_layers.size(); ++i) {
    CHECK(fine.params.encoder_layers[i].wq.vec() == pre.params.encoder_layers[i].wq.vec());
  }

  // without init: baseline arm trains standalone and differs from transfer
  const TrainResult scratch = finetune(fine_cfg, fine_windows, nullptr);
  CHECK(scratch.params.token_proj_w.vec() != pre.params.token_proj_w.vec());
}

TEST_CASE("finetune: checkpoint dims must match the run config") {
  const auto pre_windows = tiny_windows(1, 12, 2, false, 15);
  RunConfig pre_cfg = small_config(Phase::pretrain);
  pre_cfg.epochs = 1;
  const TrainResult pre = pretrain(pre_cfg, pre_windows);

  const auto fine_windows = tiny_windows(1, 12, 2, true, 16);
  RunConfig fine_cfg = small_config(Phase::finetune);
  fine_cfg.d = 16;  // disagrees with the d=8 checkpoint
  try {
    finetune(fine_cfg, fine_windows, &pre.params);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("checkpoint: save -> load -> save produces identical bytes") {
  const ModelDims dims{8, 2, 2, 3, 2, 4};
  Checkpoint ckpt;
  ckpt.params = ModelParams::init_autoencoder(dims, 17);
  ckpt.prep.selected = {1, 4};
  ckpt.prep.min_v = {0.0, -2.0};
  ckpt.prep.max_v = {1.0, 3.5};
  ckpt.config_echo = small_config(Phase::pretrain).serialize();
  const std::string p1 = temp_path("rulmae_ckpt_a.bin");
  const std::string p2 = temp_path("rulmae_ckpt_b.bin");
  save_checkpoint(ckpt, p1);
  const Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(loaded.prep.selected == ckpt.prep.selected);
  CHECK(loaded.config_echo == ckpt.config_echo);
  CHECK(loaded.params.token_proj_w.vec() == ckpt.params.token_proj_w.vec());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint: truncation raises CorruptFile; version bump mismatches") {
  const ModelDims dims{8, 2, 1, 3, 2, 4};
  Checkpoint ckpt;
  ckpt.params = ModelParams::init_regressor(dims, 18);
  const std::string path = temp_path("rulmae_ckpt_c.bin");
  save_checkpoint(ckpt, path);

  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  in.close();
  std::string bytes = buf.str();

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  try {
    load_checkpoint(path);
    FAIL("expected CorruptFile");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CorruptFile);
  }

  bytes[8] = '\x07';  // bump the little-endian version field
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  try {
    load_checkpoint(path);
    FAIL("expected VersionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::VersionMismatch);
  }
  std::remove(path.c_str());
}

TEST_CASE("train log CSV has the expected columns and rows") {
  TrainLog log;
  log.epochs.push_back({0, 1.5, 10.0, 0.25});
  log.epochs.push_back({1, 1.25, 11.0, 0.5});
  std::ostringstream os;
  log.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,loss,wall_ms,grad_norm");
  std::getline(is, line);
  CHECK(line == "0,1.5,10,0.25");
  std::getline(is, line);
  CHECK(line == "1,1.25,11,0.5");
}
