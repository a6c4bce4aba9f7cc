#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "rulmae/rng.hpp"
#include "rulmae/tensor.hpp"

namespace rulmae {

struct VarId {
  std::size_t index = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return index != std::numeric_limits<std::size_t>::max(); }
};

// Reverse-mode accumulation over a recorded operation tape.
//
// Every op appends one node holding the forward value and a closure that
// scatters the node's output gradient into its inputs' gradients. A tape is
// owned by a single forward/backward pass; leaves may reference parameter
// tensors living outside the tape (no copy), their gradients are still
// accumulated locally and collected after backward().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf referencing external storage. The referenced tensor must outlive
  // the tape. Gradients are tracked only when requires_grad is true.
  VarId leaf(const Tensor& external, bool requires_grad);

  // Leaf owning its value; never differentiated.
  VarId constant(Tensor owned);

  // y = op(a[, b]) primitives. All shapes are validated; violations raise
  // Error(ShapeMismatch) (or the code noted per op).
  VarId matmul(VarId a, VarId b, bool trans_a = false, bool trans_b = false);
  VarId add(VarId a, VarId b);                 // same shape
  VarId add_bias(VarId x, VarId bias);         // bias broadcast over leading dims
  VarId linear(VarId x, VarId w, VarId b);     // x*W + b
  VarId scale(VarId x, double c);
  VarId relu(VarId x);
  VarId glu(VarId value, VarId gate);          // value .* sigmoid(gate)
  // Temporal convolution, zero padded, same length. x is [T, Cin] or
  // [B, T, Cin]; kernels [Kw, Cin, Cout]; bias [Cout].
  VarId conv1d(VarId x, VarId kernels, VarId bias, std::size_t padding);
  VarId softmax(VarId x);                      // last dim; NonFinite on bad input
  VarId layer_norm(VarId x, VarId gain, VarId shift);  // normalize last dim
  VarId dropout(VarId x, double rate, bool train, Rng& rng);  // inverted scaling
  VarId slice_cols(VarId x, std::size_t col_begin, std::size_t col_end);
  VarId concat_cols(const std::vector<VarId>& parts);
  VarId reshape(VarId x, std::vector<std::size_t> shape);
  // Rows of `rows` placed at `positions` in a [total_rows x cols] output,
  // zero elsewhere. Positions must be unique and in range.
  VarId scatter_rows(VarId rows, const std::vector<std::size_t>& positions,
                     std::size_t total_rows);
  // x is [N, patch_len*cols]; segment k of row n lands on output row n+k of a
  // [total_steps x cols] result; overlapping contributions are averaged.
  VarId overlap_average(VarId x, std::size_t total_steps, std::size_t patch_len,
                        std::size_t cols);
  // Fixed-weight contraction to a scalar (reduction probe for checks).
  VarId weighted_sum(VarId x, const Tensor& weights);
  // Mean of squared differences over all elements -> scalar node.
  VarId mse(VarId pred, const Tensor& target);
  // Same, restricted to rows with row_valid != 0; AllMasked if none.
  VarId mse_rows_masked(VarId pred, const Tensor& target,
                        const std::vector<std::uint8_t>& row_valid);

  const Tensor& value(VarId id) const;
  // Valid after backward(); zero tensor for nodes that never received grad.
  const Tensor& grad(VarId id) const;
  bool requires_grad(VarId id) const;

  // Reverse sweep from a scalar node; seeds d(loss)/d(loss) = 1.
  void backward(VarId loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;                    // owned value (unused when external set)
    const Tensor* external = nullptr;
    Tensor grad;
    bool needs = false;              // participates in gradient flow
    std::function<void(Tape&)> back; // empty for leaves/constants
  };

  const Tensor& val(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.external ? *n.external : n.value;
  }
  Tensor& grad_ref(std::size_t i);
  VarId push(Tensor value, bool needs, std::function<void(Tape&)> back);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
  // Scratch zero tensor handed out for grads that never received flow; the
  // reference is only guaranteed until the next grad() call on this tape.
  mutable Tensor zero_;
};

// Scaled dot-product attention with H heads over d-model columns, composed
// from tape primitives so the backward pass follows from the recording.
// q, k, v are [T, d]; projection weights are [d, d] with [d] biases.
// Raises Error(BadHeadCount) unless d is divisible by heads.
VarId multi_head_attention(Tape& t, VarId q, VarId k, VarId v, VarId wq, VarId bq,
                           VarId wk, VarId bk, VarId wv, VarId bv, VarId wo,
                           VarId bo, std::size_t heads);

}  // namespace rulmae
