#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rulmae/tensor.hpp"

namespace rulmae {

// Scalar function of several tensors. When `grads` is non-null the callee
// must resize/fill it with d(loss)/d(input) per input; when null only the
// loss is required (used for the finite-difference probes).
using LossAndGrad =
    std::function<double(const std::vector<Tensor>& inputs, std::vector<Tensor>* grads)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool pass(double tol) const { return coords_checked > 0 && max_rel_err < tol; }
  std::string summary() const;
};

// Central finite differences against the analytic gradients returned by fn.
// The numeric probe re-evaluates only the forward value, so it is
// independent of the backward path under test. `max_coords` (per input)
// subsamples coordinates with a deterministic stride for large tensors.
GradCheckReport grad_check(const LossAndGrad& fn, std::vector<Tensor> inputs,
                           double h = 1e-5,
                           std::size_t max_coords = static_cast<std::size_t>(-1));

}  // namespace rulmae
