#include "rulmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "rulmae/error.hpp"
#include "rulmae/rng.hpp"

namespace rulmae {
namespace {

Tensor uniform_fan_in(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

ConvPair init_conv(std::size_t kw, std::size_t channels, Rng& rng) {
  ConvPair c;
  c.value_k = uniform_fan_in({kw, channels, channels}, kw * channels, rng);
  c.value_b = Tensor({channels});
  c.gate_k = uniform_fan_in({kw, channels, channels}, kw * channels, rng);
  c.gate_b = Tensor({channels});
  return c;
}

TransformerLayerParams init_layer(std::size_t d, std::size_t ff, Rng& rng) {
  TransformerLayerParams l;
  l.wq = uniform_fan_in({d, d}, d, rng);
  l.bq = Tensor({d});
  l.wk = uniform_fan_in({d, d}, d, rng);
  l.bk = Tensor({d});
  l.wv = uniform_fan_in({d, d}, d, rng);
  l.bv = Tensor({d});
  l.wo = uniform_fan_in({d, d}, d, rng);
  l.bo = Tensor({d});
  l.ff1_w = uniform_fan_in({d, ff}, d, rng);
  l.ff1_b = Tensor({ff});
  l.ff2_w = uniform_fan_in({ff, d}, ff, rng);
  l.ff2_b = Tensor({d});
  l.ln1_g = Tensor::full({d}, 1.0);
  l.ln1_b = Tensor({d});
  l.ln2_g = Tensor::full({d}, 1.0);
  l.ln2_b = Tensor({d});
  return l;
}

ModelParams init_shared(const ModelDims& dims, Rng& rng) {
  if (dims.J == 0) raise(ErrorCode::ShapeMismatch, "model needs J >= 1 input channels");
  if (dims.heads == 0 || dims.d % dims.heads != 0) {
    raise(ErrorCode::BadHeadCount, "model width " + std::to_string(dims.d) +
                                       " not divisible by " + std::to_string(dims.heads));
  }
  ModelParams p;
  p.dims = dims;
  p.tokenizer_conv = init_conv(dims.K, dims.J, rng);
  p.token_proj_w = uniform_fan_in({dims.K * dims.J, dims.d}, dims.K * dims.J, rng);
  p.token_proj_b = Tensor({dims.d});
  p.encoder_layers.reserve(dims.layers);
  for (std::size_t i = 0; i < dims.layers; ++i) {
    p.encoder_layers.push_back(init_layer(dims.d, dims.ff_mult * dims.d, rng));
  }
  return p;
}

void for_each_conv(const std::string& prefix, ConvPair& c,
                   const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".value_k", c.value_k);
  fn(prefix + ".value_b", c.value_b);
  fn(prefix + ".gate_k", c.gate_k);
  fn(prefix + ".gate_b", c.gate_b);
}

void for_each_layer(const std::string& prefix, TransformerLayerParams& l,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".wq", l.wq);
  fn(prefix + ".bq", l.bq);
  fn(prefix + ".wk", l.wk);
  fn(prefix + ".bk", l.bk);
  fn(prefix + ".wv", l.wv);
  fn(prefix + ".bv", l.bv);
  fn(prefix + ".wo", l.wo);
  fn(prefix + ".bo", l.bo);
  fn(prefix + ".ff1_w", l.ff1_w);
  fn(prefix + ".ff1_b", l.ff1_b);
  fn(prefix + ".ff2_w", l.ff2_w);
  fn(prefix + ".ff2_b", l.ff2_b);
  fn(prefix + ".ln1_g", l.ln1_g);
  fn(prefix + ".ln1_b", l.ln1_b);
  fn(prefix + ".ln2_g", l.ln2_g);
  fn(prefix + ".ln2_b", l.ln2_b);
}

}  // namespace

ModelParams ModelParams::init_autoencoder(const ModelDims& dims, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xAE00u));
  ModelParams p = init_shared(dims, rng);
  p.has_decoder = true;
  p.decoder_conv = init_conv(dims.K, dims.d, rng);
  p.decoder_layers.reserve(dims.layers);
  for (std::size_t i = 0; i < dims.layers; ++i) {
    p.decoder_layers.push_back(init_layer(dims.d, dims.ff_mult * dims.d, rng));
  }
  p.recon_w = uniform_fan_in({dims.d, dims.K * dims.J}, dims.d, rng);
  p.recon_b = Tensor({dims.K * dims.J});
  return p;
}

ModelParams ModelParams::init_regressor(const ModelDims& dims, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x2E60u));
  ModelParams p = init_shared(dims, rng);
  p.has_rul_head = true;
  p.rul_w = uniform_fan_in({dims.d, dims.K}, dims.d, rng);
  p.rul_b = Tensor({dims.K});
  return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  for_each_conv("tokenizer_conv", tokenizer_conv, fn);
  fn("token_proj.w", token_proj_w);
  fn("token_proj.b", token_proj_b);
  for (std::size_t i = 0; i < encoder_layers.size(); ++i) {
    for_each_layer("encoder." + std::to_string(i), encoder_layers[i], fn);
  }
  if (has_decoder) {
    for_each_conv("decoder_conv", decoder_conv, fn);
    for (std::size_t i = 0; i < decoder_layers.size(); ++i) {
      for_each_layer("decoder." + std::to_string(i), decoder_layers[i], fn);
    }
    fn("recon_head.w", recon_w);
    fn("recon_head.b", recon_b);
  }
  if (has_rul_head) {
    fn("rul_head.w", rul_w);
    fn("rul_head.b", rul_b);
  }
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ModelParams*>(this)->for_each(
      [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

std::vector<Tensor*> ModelParams::tensor_list() {
  std::vector<Tensor*> out;
  for_each([&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each([&ok](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelParams transfer_encoder(const ModelParams& mae, std::uint64_t seed) {
  ModelParams out = ModelParams::init_regressor(mae.dims, seed);
  out.tokenizer_conv = mae.tokenizer_conv;
  out.token_proj_w = mae.token_proj_w;
  out.token_proj_b = mae.token_proj_b;
  out.encoder_layers = mae.encoder_layers;
  return out;
}

std::vector<double> positional_embedding(std::size_t index, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    raise(ErrorCode::BadDim, "embedding dim must be even, got " + std::to_string(dim));
  }
  std::vector<double> out(dim);
  for (std::size_t j = 0; 2 * j < dim; ++j) {
    const double freq =
        std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(dim));
    const double angle = static_cast<double>(index) / freq;
    out[2 * j] = std::sin(angle);
    out[2 * j + 1] = std::cos(angle);
  }
  return out;
}

Tensor positional_table(const std::vector<std::size_t>& positions, std::size_t dim) {
  Tensor table({positions.size(), dim});
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const auto row = positional_embedding(positions[r], dim);
    std::copy(row.begin(), row.end(), table.data() + r * dim);
  }
  return table;
}

BoundParams bind_params(Tape& tape, const ModelParams& params, bool requires_grad) {
  auto bind_conv = [&](const ConvPair& c) {
    return BoundConv{tape.leaf(c.value_k, requires_grad), tape.leaf(c.value_b, requires_grad),
                     tape.leaf(c.gate_k, requires_grad), tape.leaf(c.gate_b, requires_grad)};
  };
  auto bind_layer = [&](const TransformerLayerParams& l) {
    BoundLayer b;
    b.wq = tape.leaf(l.wq, requires_grad);
    b.bq = tape.leaf(l.bq, requires_grad);
    b.wk = tape.leaf(l.wk, requires_grad);
    b.bk = tape.leaf(l.bk, requires_grad);
    b.wv = tape.leaf(l.wv, requires_grad);
    b.bv = tape.leaf(l.bv, requires_grad);
    b.wo = tape.leaf(l.wo, requires_grad);
    b.bo = tape.leaf(l.bo, requires_grad);
    b.ff1_w = tape.leaf(l.ff1_w, requires_grad);
    b.ff1_b = tape.leaf(l.ff1_b, requires_grad);
    b.ff2_w = tape.leaf(l.ff2_w, requires_grad);
    b.ff2_b = tape.leaf(l.ff2_b, requires_grad);
    b.ln1_g = tape.leaf(l.ln1_g, requires_grad);
    b.ln1_b = tape.leaf(l.ln1_b, requires_grad);
    b.ln2_g = tape.leaf(l.ln2_g, requires_grad);
    b.ln2_b = tape.leaf(l.ln2_b, requires_grad);
    return b;
  };

  BoundParams bound;
  bound.source = &params;
  bound.tok_conv = bind_conv(params.tokenizer_conv);
  bound.proj_w = tape.leaf(params.token_proj_w, requires_grad);
  bound.proj_b = tape.leaf(params.token_proj_b, requires_grad);
  for (const auto& l : params.encoder_layers) bound.enc.push_back(bind_layer(l));
  if (params.has_decoder) {
    bound.dec_conv = bind_conv(params.decoder_conv);
    for (const auto& l : params.decoder_layers) bound.dec.push_back(bind_layer(l));
    bound.recon_w = tape.leaf(params.recon_w, requires_grad);
    bound.recon_b = tape.leaf(params.recon_b, requires_grad);
  }
  if (params.has_rul_head) {
    bound.rul_w = tape.leaf(params.rul_w, requires_grad);
    bound.rul_b = tape.leaf(params.rul_b, requires_grad);
  }
  return bound;
}

std::vector<VarId> bound_param_ids(const BoundParams& bound) {
  std::vector<VarId> ids;
  auto push_conv = [&](const BoundConv& c) {
    ids.push_back(c.value_k);
    ids.push_back(c.value_b);
    ids.push_back(c.gate_k);
    ids.push_back(c.gate_b);
  };
  auto push_layer = [&](const BoundLayer& l) {
    for (VarId v : {l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ff1_w, l.ff1_b,
                    l.ff2_w, l.ff2_b, l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b}) {
      ids.push_back(v);
    }
  };
  push_conv(bound.tok_conv);
  ids.push_back(bound.proj_w);
  ids.push_back(bound.proj_b);
  for (const auto& l : bound.enc) push_layer(l);
  if (bound.source->has_decoder) {
    push_conv(bound.dec_conv);
    for (const auto& l : bound.dec) push_layer(l);
    ids.push_back(bound.recon_w);
    ids.push_back(bound.recon_b);
  }
  if (bound.source->has_rul_head) {
    ids.push_back(bound.rul_w);
    ids.push_back(bound.rul_b);
  }
  return ids;
}

std::vector<Tensor> collect_param_grads(const Tape& tape, const BoundParams& bound) {
  const std::vector<VarId> ids = bound_param_ids(bound);
  std::vector<Tensor> grads;
  grads.reserve(ids.size());
  for (VarId id : ids) grads.push_back(tape.grad(id));
  return grads;
}

namespace {

// Gated temporal convolution over a [*, T, C] sequence: value path modulated
// by the sigmoid of the gate path, kernel width K with same-length padding.
VarId gated_conv(Tape& tape, VarId x, const BoundConv& conv, std::size_t K) {
  const std::size_t pad = (K - 1) / 2;
  VarId value = tape.conv1d(x, conv.value_k, conv.value_b, pad);
  VarId gate = tape.conv1d(x, conv.gate_k, conv.gate_b, pad);
  return tape.glu(value, gate);
}

VarId transformer_layer(Tape& tape, VarId x, const BoundLayer& l, std::size_t heads,
                        const ForwardOptions& opts, Rng& rng) {
  VarId attn = multi_head_attention(tape, x, x, x, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                                    l.wo, l.bo, heads);
  attn = tape.dropout(attn, opts.dropout, opts.train, rng);
  x = tape.layer_norm(tape.add(x, attn), l.ln1_g, l.ln1_b);
  VarId ff = tape.linear(tape.relu(tape.linear(x, l.ff1_w, l.ff1_b)), l.ff2_w, l.ff2_b);
  ff = tape.dropout(ff, opts.dropout, opts.train, rng);
  return tape.layer_norm(tape.add(x, ff), l.ln2_g, l.ln2_b);
}

VarId transformer_stack(Tape& tape, VarId x, const std::vector<BoundLayer>& layers,
                        std::size_t heads, const ForwardOptions& opts, Rng& rng) {
  for (const BoundLayer& l : layers) x = transformer_layer(tape, x, l, heads, opts, rng);
  return x;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

std::size_t center_of(std::size_t patch_index, std::size_t K) {
  return patch_index + (K - 1) / 2;
}

}  // namespace

LatentSet tokenize(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                   const std::vector<std::size_t>& subset) {
  const ModelDims& dims = bound.source->dims;
  if (window.K != dims.K || window.J != dims.J) {
    raise(ErrorCode::ShapeMismatch,
          "window patches " + std::to_string(window.K) + "x" + std::to_string(window.J) +
              " do not match model " + std::to_string(dims.K) + "x" +
              std::to_string(dims.J));
  }
  const std::size_t n = subset.size();
  if (n == 0) raise(ErrorCode::EmptyInput, "no patches to tokenize");
  Tensor patches({n, window.K, window.J});
  std::vector<std::size_t> centers(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = subset[i];
    if (s >= window.N) raise(ErrorCode::ShapeMismatch, "patch index out of range");
    std::copy(window.patches.begin() + static_cast<std::ptrdiff_t>(s * window.K * window.J),
              window.patches.begin() +
                  static_cast<std::ptrdiff_t>((s + 1) * window.K * window.J),
              patches.data() + i * window.K * window.J);
    centers[i] = window.centers[s];
  }
  VarId x = tape.constant(std::move(patches));
  VarId conv = gated_conv(tape, x, bound.tok_conv, dims.K);
  VarId flat = tape.reshape(conv, {n, window.K * window.J});
  VarId tokens = tape.linear(flat, bound.proj_w, bound.proj_b);
  tokens = tape.add(tokens, tape.constant(positional_table(centers, dims.d)));
  return LatentSet{tokens, subset};
}

LatentSet encode(Tape& tape, const BoundParams& bound, const LatentSet& tokens,
                 const ForwardOptions& opts, Rng& dropout_rng) {
  if (!tokens.tokens.valid() || tape.value(tokens.tokens).dim(0) == 0) {
    raise(ErrorCode::EmptyInput, "encoder needs at least one token");
  }
  VarId out = transformer_stack(tape, tokens.tokens, bound.enc, bound.source->dims.heads,
                                opts, dropout_rng);
  return LatentSet{out, tokens.index_map};
}

LatentSet restore(Tape& tape, const LatentSet& visible,
                  const std::vector<std::size_t>& masked_indices, std::size_t total,
                  std::size_t K, std::size_t d) {
  if (visible.index_map.size() + masked_indices.size() != total) {
    raise(ErrorCode::ShapeMismatch,
          "restore: " + std::to_string(visible.index_map.size()) + " visible + " +
              std::to_string(masked_indices.size()) + " masked != " +
              std::to_string(total));
  }
  std::unordered_set<std::size_t> seen(visible.index_map.begin(), visible.index_map.end());
  for (std::size_t m : masked_indices) {
    if (m >= total) raise(ErrorCode::ShapeMismatch, "masked index out of range");
    if (seen.count(m)) {
      raise(ErrorCode::IndexOverlap,
            "masked index " + std::to_string(m) + " collides with a visible token");
    }
  }
  VarId full = tape.scatter_rows(visible.tokens, visible.index_map, total);
  std::vector<std::size_t> centers(total);
  for (std::size_t i = 0; i < total; ++i) centers[i] = center_of(i, K);
  full = tape.add(full, tape.constant(positional_table(centers, d)));
  return LatentSet{full, all_indices(total)};
}

VarId decode_patches(Tape& tape, const BoundParams& bound, VarId restored,
                     const ForwardOptions& opts, Rng& dropout_rng) {
  const ModelDims& dims = bound.source->dims;
  if (!bound.source->has_decoder) {
    raise(ErrorCode::ShapeMismatch, "model has no reconstruction branch");
  }
  VarId x = gated_conv(tape, restored, bound.dec_conv, dims.K);
  x = transformer_stack(tape, x, bound.dec, dims.heads, opts, dropout_rng);
  return tape.linear(x, bound.recon_w, bound.recon_b);
}

VarId reconstruct_window(Tape& tape, VarId patch_preds, std::size_t P, std::size_t K,
                         std::size_t J) {
  return tape.overlap_average(patch_preds, P, K, J);
}

VarId recon_loss(Tape& tape, VarId recon, const Window& window) {
  Tensor target({window.P, window.J}, std::vector<double>(window.features));
  return tape.mse(recon, target);
}

VarId predict_rul(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                  const ForwardOptions& opts, Rng& dropout_rng) {
  if (!bound.source->has_rul_head) {
    raise(ErrorCode::ShapeMismatch, "model has no regression head");
  }
  LatentSet tokens = tokenize(tape, bound, window, all_indices(window.N));
  LatentSet encoded = encode(tape, bound, tokens, opts, dropout_rng);
  VarId per_patch = tape.linear(encoded.tokens, bound.rul_w, bound.rul_b);  // [N, K]
  return tape.overlap_average(per_patch, window.source.P, window.K, 1);     // [P, 1]
}

VarId rul_loss(Tape& tape, VarId pred, const std::vector<double>& labels,
               const std::vector<std::uint8_t>& valid) {
  const Tensor& p = tape.value(pred);
  if (p.dim(0) != labels.size()) {
    raise(ErrorCode::ShapeMismatch, "prediction length " + std::to_string(p.dim(0)) +
                                        " vs labels " + std::to_string(labels.size()));
  }
  Tensor target({labels.size(), 1}, std::vector<double>(labels));
  return tape.mse_rows_masked(pred, target, valid);
}

MaeOutput mae_forward(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                      const ForwardOptions& opts, LossScope scope) {
  const ModelDims& dims = bound.source->dims;
  Rng dropout_rng(mix_seed(opts.dropout_seed, 0xD20Fu));
  const SplitSets sets = split_sets(window);
  LatentSet tokens = tokenize(tape, bound, window, sets.unmasked);
  LatentSet encoded = encode(tape, bound, tokens, opts, dropout_rng);
  LatentSet full = restore(tape, encoded, sets.masked, window.N, dims.K, dims.d);
  VarId patch_preds = decode_patches(tape, bound, full.tokens, opts, dropout_rng);
  VarId recon = reconstruct_window(tape, patch_preds, window.source.P, dims.K, dims.J);

  MaeOutput out;
  out.recon = recon;
  out.patch_preds = patch_preds;
  if (scope == LossScope::all) {
    out.loss = recon_loss(tape, recon, window.source);
  } else {
    // Patch-level loss restricted to the masked set.
    Tensor target({window.N, window.K * window.J}, std::vector<double>(window.patches));
    std::vector<std::uint8_t> masked_rows(window.N, 0);
    for (std::size_t m : sets.masked) masked_rows[m] = 1;
    out.loss = tape.mse_rows_masked(patch_preds, target, masked_rows);
  }
  return out;
}

RulOutput rul_forward(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                      const ForwardOptions& opts, bool with_loss) {
  Rng dropout_rng(mix_seed(opts.dropout_seed, 0xD20Fu));
  RulOutput out;
  out.pred = predict_rul(tape, bound, window, opts, dropout_rng);
  if (with_loss) {
    if (!window.source.labels.has_value()) {
      raise(ErrorCode::MissingLabels,
            "window from unit " + std::to_string(window.source.unit_id) + " has no labels");
    }
    std::vector<std::uint8_t> valid(window.source.P, 1);
    for (std::size_t t = 0; t < window.source.pad_prefix; ++t) valid[t] = 0;
    out.loss = rul_loss(tape, out.pred, *window.source.labels, valid);
  }
  return out;
}

}  // namespace rulmae
