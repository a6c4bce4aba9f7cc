#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rulmae/tape.hpp"
#include "rulmae/windowing.hpp"

namespace rulmae {

struct ModelDims {
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t K = 3;
  std::size_t J = 0;
  std::size_t ff_mult = 4;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// Value/gate kernel pair of a gated temporal convolution (both [kw, C, C]).
struct ConvPair {
  Tensor value_k, value_b, gate_k, gate_b;
};

struct TransformerLayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;      // attention projections
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;          // position-wise feedforward
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;          // post-sublayer norms
};

// Named, shaped parameter groups for both network variants. The tokenizer
// and encoder groups are shape-identical across variants so encoder weights
// can be transferred verbatim.
struct ModelParams {
  ModelDims dims;

  ConvPair tokenizer_conv;                    // channels = J
  Tensor token_proj_w, token_proj_b;          // [K*J, d], [d]
  std::vector<TransformerLayerParams> encoder_layers;

  bool has_decoder = false;                   // reconstruction branch
  ConvPair decoder_conv;                      // channels = d
  std::vector<TransformerLayerParams> decoder_layers;
  Tensor recon_w, recon_b;                    // [d, K*J], [K*J]

  bool has_rul_head = false;                  // regression branch
  Tensor rul_w, rul_b;                        // [d, K], [K]

  static ModelParams init_autoencoder(const ModelDims& dims, std::uint64_t seed);
  static ModelParams init_regressor(const ModelDims& dims, std::uint64_t seed);

  // Fixed-order traversal of every (name, tensor) pair; optimizer state,
  // gradients and checkpoints all share this layout.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::vector<Tensor*> tensor_list();
  bool all_finite() const;
  std::size_t parameter_count() const;
};

// Tokenizer + encoder groups copied verbatim from the autoencoder; the
// regression head is freshly initialized from `seed`; reconstruction groups
// are dropped.
ModelParams transfer_encoder(const ModelParams& mae, std::uint64_t seed);

// Sine/cosine embedding of a position index: component 2j holds
// sin(i / 10000^(2j/dim)) and component 2j+1 the matching cosine.
// BadDim when dim is odd.
std::vector<double> positional_embedding(std::size_t index, std::size_t dim);
Tensor positional_table(const std::vector<std::size_t>& positions, std::size_t dim);

struct ForwardOptions {
  bool train = false;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

enum class LossScope { all, masked_only };

// Tape-bound view of the parameters; leaves reference the ModelParams
// storage, so one immutable ModelParams can serve many concurrent tapes.
struct BoundConv {
  VarId value_k, value_b, gate_k, gate_b;
};
struct BoundLayer {
  VarId wq, bq, wk, bk, wv, bv, wo, bo;
  VarId ff1_w, ff1_b, ff2_w, ff2_b;
  VarId ln1_g, ln1_b, ln2_g, ln2_b;
};
struct BoundParams {
  const ModelParams* source = nullptr;
  BoundConv tok_conv;
  VarId proj_w, proj_b;
  std::vector<BoundLayer> enc;
  BoundConv dec_conv;
  std::vector<BoundLayer> dec;
  VarId recon_w, recon_b;
  VarId rul_w, rul_b;
};

BoundParams bind_params(Tape& tape, const ModelParams& params, bool requires_grad);

// Bound leaf ids in for_each order.
std::vector<VarId> bound_param_ids(const BoundParams& bound);

// Gradients in for_each order (zero tensors where no gradient flowed).
std::vector<Tensor> collect_param_grads(const Tape& tape, const BoundParams& bound);

// Encoder-side token sequence with the original patch index of every row.
struct LatentSet {
  VarId tokens;
  std::vector<std::size_t> index_map;
};

// Gated conv over each patch, flatten, project to d, add the positional
// embedding of the patch's center timestamp. `subset` lists the patch
// indices to tokenize (all N for the regressor, visible only for the MAE).
LatentSet tokenize(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                   const std::vector<std::size_t>& subset);

// Transformer encoder over the tokens; shape-preserving. EmptyInput on an
// empty token set.
LatentSet encode(Tape& tape, const BoundParams& bound, const LatentSet& tokens,
                 const ForwardOptions& opts, Rng& dropout_rng);

// Re-inserts masked slots as zero vectors, then adds positional embeddings
// to every row of the full-length sequence. IndexOverlap when a masked index
// collides with a visible one.
LatentSet restore(Tape& tape, const LatentSet& visible,
                  const std::vector<std::size_t>& masked_indices, std::size_t total,
                  std::size_t K, std::size_t d);

// Gated conv over the restored sequence, transformer decode, per-token patch
// prediction [N, K*J].
VarId decode_patches(Tape& tape, const BoundParams& bound, VarId restored,
                     const ForwardOptions& opts, Rng& dropout_rng);

// Overlap-averaged reconstruction [P, J] from patch predictions.
VarId reconstruct_window(Tape& tape, VarId patch_preds, std::size_t P, std::size_t K,
                         std::size_t J);

// Mean squared error against the source window over all timestamps.
VarId recon_loss(Tape& tape, VarId recon, const Window& window);

// Regressor forward: tokenize all patches, encode, emit K per-timestamp
// scalars per patch, overlap-average to one value per timestamp -> [P, 1].
VarId predict_rul(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                  const ForwardOptions& opts, Rng& dropout_rng);

// MSE over valid (non-padded) timestamps; AllMasked when none are valid.
VarId rul_loss(Tape& tape, VarId pred, const std::vector<double>& labels,
               const std::vector<std::uint8_t>& valid);

struct MaeOutput {
  VarId loss;
  VarId recon;        // [P, J]
  VarId patch_preds;  // [N, K*J]
};

MaeOutput mae_forward(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                      const ForwardOptions& opts, LossScope scope);

struct RulOutput {
  VarId loss;  // invalid when the window has no labels
  VarId pred;  // [P, 1]
};

RulOutput rul_forward(Tape& tape, const BoundParams& bound, const PatchedWindow& window,
                      const ForwardOptions& opts, bool with_loss);

}  // namespace rulmae
