#pragma once

#include <cstdint>
#include <vector>

#include "rulmae/tensor.hpp"

namespace rulmae {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over an ordered list of parameter tensors. Moment
// buffers are zero-initialized and stay aligned with the list passed at
// construction; every step validates shapes against that layout.
class AdamState {
 public:
  AdamState(AdamConfig config, const std::vector<Tensor*>& params);

  // In-place update; grads must align one-to-one with the construction list.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

  std::uint64_t step_count() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

}  // namespace rulmae
