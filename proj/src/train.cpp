#include "rulmae/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include "rulmae/adam.hpp"
#include "rulmae/error.hpp"

namespace rulmae {
namespace {

void append_double(std::string& s, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  s.append(buf, res.ptr);
}

std::string fmt_double(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

void kv(std::string& out, const std::string& key, const std::string& value) {
  out += key;
  out += " = ";
  out += value;
  out += '\n';
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string RunConfig::serialize() const {
  std::string out;
  kv(out, "phase", phase == Phase::pretrain ? "pretrain" : "finetune");
  kv(out, "mask_ratio", fmt_double(mask_ratio));
  kv(out, "lr", fmt_double(lr));
  kv(out, "dropout", fmt_double(dropout));
  kv(out, "d", std::to_string(d));
  kv(out, "heads", std::to_string(heads));
  kv(out, "layers", std::to_string(layers));
  kv(out, "P", std::to_string(P));
  kv(out, "K", std::to_string(K));
  kv(out, "gamma", fmt_double(gamma));
  kv(out, "lambda", fmt_double(lambda));
  kv(out, "epochs", std::to_string(epochs));
  kv(out, "pretrain_epochs", std::to_string(pretrain_epochs));
  kv(out, "batch_size", std::to_string(batch_size));
  kv(out, "seed", std::to_string(seed));
  kv(out, "stride", std::to_string(stride));
  kv(out, "loss_scope", loss_scope == LossScope::all ? "all" : "masked_only");
  kv(out, "rul_cap", fmt_double(rul_cap));
  kv(out, "data", data);
  kv(out, "init_checkpoint", init_checkpoint);
  kv(out, "out_dir", out_dir);
  kv(out, "synth_units", std::to_string(synth_units));
  kv(out, "synth_test_units", std::to_string(synth_test_units));
  kv(out, "synth_len_min", std::to_string(synth_len_min));
  kv(out, "synth_len_max", std::to_string(synth_len_max));
  kv(out, "synth_features", std::to_string(synth_features));
  kv(out, "synth_noise", fmt_double(synth_noise));
  kv(out, "synth_seed", std::to_string(synth_seed));
  return out;
}

RunConfig RunConfig::deserialize(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      raise(ErrorCode::CorruptFile, "config line " + std::to_string(line_no) +
                                        " is not 'key = value': " + t);
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    auto as_double = [&]() {
      try {
        return std::stod(value);
      } catch (...) {
        raise(ErrorCode::CorruptFile, "config key " + key + ": bad number '" + value + "'");
      }
    };
    auto as_size = [&]() { return static_cast<std::size_t>(as_double()); };
    if (key == "phase") {
      if (value == "pretrain") c.phase = Phase::pretrain;
      else if (value == "finetune") c.phase = Phase::finetune;
      else raise(ErrorCode::CorruptFile, "unknown phase '" + value + "'");
    } else if (key == "mask_ratio") c.mask_ratio = as_double();
    else if (key == "lr") c.lr = as_double();
    else if (key == "dropout") c.dropout = as_double();
    else if (key == "d") c.d = as_size();
    else if (key == "heads") c.heads = as_size();
    else if (key == "layers") c.layers = as_size();
    else if (key == "P") c.P = as_size();
    else if (key == "K") c.K = as_size();
    else if (key == "gamma") c.gamma = as_double();
    else if (key == "lambda") c.lambda = as_double();
    else if (key == "epochs") c.epochs = as_size();
    else if (key == "pretrain_epochs") c.pretrain_epochs = as_size();
    else if (key == "batch_size") c.batch_size = as_size();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_double());
    else if (key == "stride") c.stride = as_size();
    else if (key == "loss_scope") {
      if (value == "all") c.loss_scope = LossScope::all;
      else if (value == "masked_only") c.loss_scope = LossScope::masked_only;
      else raise(ErrorCode::CorruptFile, "unknown loss_scope '" + value + "'");
    } else if (key == "rul_cap") c.rul_cap = as_double();
    else if (key == "data") c.data = value;
    else if (key == "init_checkpoint") c.init_checkpoint = value;
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "synth_units") c.synth_units = as_size();
    else if (key == "synth_test_units") c.synth_test_units = as_size();
    else if (key == "synth_len_min") c.synth_len_min = static_cast<int>(as_double());
    else if (key == "synth_len_max") c.synth_len_max = static_cast<int>(as_double());
    else if (key == "synth_features") c.synth_features = as_size();
    else if (key == "synth_noise") c.synth_noise = as_double();
    else if (key == "synth_seed") c.synth_seed = static_cast<std::uint64_t>(as_double());
    else raise(ErrorCode::CorruptFile, "unknown config key '" + key + "'");
  }
  return c;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "epoch,loss,wall_ms,grad_norm\n";
  std::string line;
  for (const EpochLog& e : epochs) {
    line.clear();
    line += std::to_string(e.epoch);
    line += ',';
    append_double(line, e.loss);
    line += ',';
    append_double(line, e.wall_ms);
    line += ',';
    append_double(line, e.grad_norm);
    line += '\n';
    out << line;
  }
}

namespace {

// Fixed fan-out for batch parallelism. Samples are always accumulated in
// index order, so losses and gradients are bit-identical no matter how many
// hardware threads serve the wave.
constexpr std::size_t kWave = 4;

struct SampleOutcome {
  double loss = 0.0;
  std::unique_ptr<Tape> tape;
  BoundParams bound;
};

SampleOutcome run_mae_sample(const ModelParams& params, const Window& window,
                             const RunConfig& cfg, std::uint64_t mask_seed,
                             std::uint64_t dropout_seed) {
  SampleOutcome out;
  out.tape = std::make_unique<Tape>();
  Rng mask_rng(mask_seed);
  PatchedWindow patched = apply_mask(patch(window, cfg.K), cfg.mask_ratio, mask_rng);
  out.bound = bind_params(*out.tape, params, true);
  ForwardOptions opts{true, cfg.dropout, dropout_seed};
  MaeOutput fwd = mae_forward(*out.tape, out.bound, patched, opts, cfg.loss_scope);
  out.loss = out.tape->value(fwd.loss).scalar_value();
  out.tape->backward(fwd.loss);
  return out;
}

SampleOutcome run_rul_sample(const ModelParams& params, const Window& window,
                             const RunConfig& cfg, std::uint64_t dropout_seed) {
  SampleOutcome out;
  out.tape = std::make_unique<Tape>();
  PatchedWindow patched = patch(window, cfg.K);  // full set, no masking
  out.bound = bind_params(*out.tape, params, true);
  ForwardOptions opts{true, cfg.dropout, dropout_seed};
  RulOutput fwd = rul_forward(*out.tape, out.bound, patched, opts, true);
  out.loss = out.tape->value(fwd.loss).scalar_value();
  out.tape->backward(fwd.loss);
  return out;
}

TrainResult run_training(const RunConfig& cfg, const std::vector<Window>& windows,
                         ModelParams params) {
  const std::size_t n = windows.size();
  if (n == 0) raise(ErrorCode::EmptyDataset, "no training windows");
  const std::size_t batch_size = std::max<std::size_t>(1, cfg.batch_size);

  std::vector<Tensor*> tensors = params.tensor_list();
  AdamState adam(AdamConfig{cfg.effective_lr(), 0.9, 0.999, 1e-8}, tensors);

  TrainLog log;
  log.config_echo = cfg.serialize();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> acc;
  acc.reserve(tensors.size());
  for (Tensor* t : tensors) acc.emplace_back(t->shape());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5F0FFu, epoch));
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = shuffle_rng.uniform_index(i);
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    double gnorm_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
      const std::size_t b1 = std::min(n, b0 + batch_size);
      const std::size_t batch_n = b1 - b0;
      for (Tensor& a : acc) a.fill(0.0);
      double batch_loss = 0.0;

      for (std::size_t w0 = b0; w0 < b1; w0 += kWave) {
        const std::size_t w1 = std::min(b1, w0 + kWave);
        std::vector<std::future<SampleOutcome>> wave;
        wave.reserve(w1 - w0);
        for (std::size_t i = w0; i < w1; ++i) {
          const std::size_t window_id = order[i];
          const Window* window = &windows[window_id];
          const std::uint64_t mask_seed = mix_seed(cfg.seed, 0x3A5Cu, epoch, window_id);
          const std::uint64_t drop_seed = mix_seed(cfg.seed, 0xD409u, epoch, window_id);
          wave.push_back(std::async(std::launch::async, [&, window, mask_seed, drop_seed] {
            return cfg.phase == Phase::pretrain
                       ? run_mae_sample(params, *window, cfg, mask_seed, drop_seed)
                       : run_rul_sample(params, *window, cfg, drop_seed);
          }));
        }
        for (auto& fut : wave) {  // strict sample order
          SampleOutcome sample = fut.get();
          batch_loss += sample.loss;
          const std::vector<VarId> ids = bound_param_ids(sample.bound);
          for (std::size_t p = 0; p < ids.size(); ++p) {
            const Tensor& g = sample.tape->grad(ids[p]);
            double* dst = acc[p].data();
            const double* src = g.data();
            for (std::size_t e = 0; e < acc[p].size(); ++e) dst[e] += src[e];
          }
        }
      }

      const double inv_batch = 1.0 / static_cast<double>(batch_n);
      double sq_norm = 0.0;
      for (Tensor& a : acc) {
        for (std::size_t e = 0; e < a.size(); ++e) {
          a[e] *= inv_batch;
          sq_norm += a[e] * a[e];
        }
      }
      const double gnorm = std::sqrt(sq_norm);
      if (!std::isfinite(batch_loss) || !std::isfinite(gnorm)) {
        raise(ErrorCode::NonFiniteLoss,
              "epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) +
                  ": loss " + fmt_double(batch_loss) + ", grad norm " + fmt_double(gnorm));
      }
      std::vector<const Tensor*> grad_ptrs;
      grad_ptrs.reserve(acc.size());
      for (const Tensor& a : acc) grad_ptrs.push_back(&a);
      adam.step(tensors, grad_ptrs);

      loss_sum += batch_loss;
      gnorm_sum += gnorm;
      ++batches;
    }

    if (!params.all_finite()) {
      raise(ErrorCode::NonFiniteLoss,
            "parameters diverged after epoch " + std::to_string(epoch));
    }
    const auto t1 = std::chrono::steady_clock::now();
    EpochLog e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(n);
    e.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    e.grad_norm = gnorm_sum / static_cast<double>(batches);
    log.epochs.push_back(e);
  }

  return TrainResult{std::move(params), std::move(log)};
}

std::size_t window_channels(const std::vector<Window>& windows) {
  const std::size_t J = windows.front().J;
  for (const Window& w : windows) {
    if (w.J != J) raise(ErrorCode::ShapeMismatch, "windows disagree on channel count");
  }
  return J;
}

}  // namespace

TrainResult pretrain(const RunConfig& config, const std::vector<Window>& windows) {
  if (windows.empty()) raise(ErrorCode::EmptyDataset, "no pretraining windows");
  if (config.mask_ratio <= 0.0 || config.mask_ratio >= 1.0) {
    raise(ErrorCode::BadRatio, "pretraining requires a masking ratio in (0,1)");
  }
  RunConfig cfg = config;
  cfg.phase = Phase::pretrain;
  const std::size_t J = window_channels(windows);
  ModelParams params =
      ModelParams::init_autoencoder(cfg.model_dims(J), mix_seed(cfg.seed, 0x1717u));
  return run_training(cfg, windows, std::move(params));
}

TrainResult finetune(const RunConfig& config, const std::vector<Window>& windows,
                     const ModelParams* init) {
  if (windows.empty()) raise(ErrorCode::EmptyDataset, "no fine-tuning windows");
  RunConfig cfg = config;
  cfg.phase = Phase::finetune;
  const std::size_t J = window_channels(windows);
  for (const Window& w : windows) {
    if (!w.labels.has_value()) {
      raise(ErrorCode::MissingLabels,
            "window from unit " + std::to_string(w.unit_id) + " has no labels");
    }
  }

  std::vector<Window> work = windows;
  if (cfg.rul_cap > 0.0) {
    for (Window& w : work) {
      for (double& v : *w.labels) v = std::min(v, cfg.rul_cap);
    }
  }

  ModelParams params = [&] {
    if (init != nullptr) {
      const ModelDims expected = cfg.model_dims(J);
      if (!(init->dims == expected)) {
        raise(ErrorCode::ShapeMismatch,
              "checkpoint dims (d=" + std::to_string(init->dims.d) +
                  ", J=" + std::to_string(init->dims.J) + ") do not match run (d=" +
                  std::to_string(expected.d) + ", J=" + std::to_string(expected.J) + ")");
      }
      return transfer_encoder(*init, mix_seed(cfg.seed, 0x2929u));
    }
    return ModelParams::init_regressor(cfg.model_dims(J), mix_seed(cfg.seed, 0x2929u));
  }();
  return run_training(cfg, work, std::move(params));
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'U', 'L', 'M', 'A', 'E', 'C', '1'};
constexpr char kTrailer[8] = {'R', 'U', 'L', 'M', 'A', 'E', 'E', '.'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.append(b, 8);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) raise(ErrorCode::CorruptFile, "checkpoint truncated");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  put_bytes(out, kMagic, 8);
  put_u32(out, kVersion);

  put_u64(out, ckpt.config_echo.size());
  out += ckpt.config_echo;

  put_u64(out, ckpt.prep.selected.size());
  for (std::size_t i = 0; i < ckpt.prep.selected.size(); ++i) {
    put_u64(out, ckpt.prep.selected[i]);
    put_f64(out, ckpt.prep.min_v[i]);
    put_f64(out, ckpt.prep.max_v[i]);
  }

  const ModelDims& dims = ckpt.params.dims;
  put_u64(out, dims.d);
  put_u64(out, dims.heads);
  put_u64(out, dims.layers);
  put_u64(out, dims.K);
  put_u64(out, dims.J);
  put_u64(out, dims.ff_mult);
  out.push_back(ckpt.params.has_decoder ? '\1' : '\0');
  out.push_back(ckpt.params.has_rul_head ? '\1' : '\0');

  std::size_t groups = 0;
  ckpt.params.for_each([&groups](const std::string&, const Tensor&) { ++groups; });
  put_u64(out, groups);
  ckpt.params.for_each([&out](const std::string& name, const Tensor& t) {
    put_u64(out, name.size());
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
  });
  put_bytes(out, kTrailer, 8);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) raise(ErrorCode::IoError, "short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(ErrorCode::IoError, "cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string data = buf.str();
  Reader r{data};

  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) {
    raise(ErrorCode::CorruptFile, "bad checkpoint magic in " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    raise(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                          ", expected " + std::to_string(kVersion));
  }

  Checkpoint ckpt;
  const std::uint64_t cfg_len = r.u64();
  ckpt.config_echo = r.str(cfg_len);

  const std::uint64_t n_prep = r.u64();
  for (std::uint64_t i = 0; i < n_prep; ++i) {
    ckpt.prep.selected.push_back(r.u64());
    ckpt.prep.min_v.push_back(r.f64());
    ckpt.prep.max_v.push_back(r.f64());
  }

  ModelDims dims;
  dims.d = r.u64();
  dims.heads = r.u64();
  dims.layers = r.u64();
  dims.K = r.u64();
  dims.J = r.u64();
  dims.ff_mult = r.u64();
  char has_decoder = 0, has_rul = 0;
  r.bytes(&has_decoder, 1);
  r.bytes(&has_rul, 1);

  ckpt.params = has_decoder ? ModelParams::init_autoencoder(dims, 0)
                            : ModelParams::init_regressor(dims, 0);
  if (has_rul && !ckpt.params.has_rul_head) {
    // Container with both branches is not produced by this code base.
    raise(ErrorCode::CorruptFile, "unsupported branch combination in " + path);
  }

  const std::uint64_t groups = r.u64();
  std::size_t expected = 0;
  ckpt.params.for_each([&expected](const std::string&, const Tensor&) { ++expected; });
  if (groups != expected) {
    raise(ErrorCode::CorruptFile, "checkpoint has " + std::to_string(groups) +
                                      " groups, expected " + std::to_string(expected));
  }
  ckpt.params.for_each([&r, &path](const std::string& name, Tensor& t) {
    const std::uint64_t name_len = r.u64();
    const std::string got = r.str(name_len);
    if (got != name) {
      raise(ErrorCode::CorruptFile,
            "checkpoint group '" + got + "' where '" + name + "' expected in " + path);
    }
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) {
      raise(ErrorCode::CorruptFile, "checkpoint group '" + name + "' has wrong shape");
    }
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64();
  });

  char trailer[8];
  r.bytes(trailer, 8);
  if (std::memcmp(trailer, kTrailer, 8) != 0 || r.pos != data.size()) {
    raise(ErrorCode::CorruptFile, "checkpoint trailer corrupt in " + path);
  }
  return ckpt;
}

}  // namespace rulmae
