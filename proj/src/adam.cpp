#include "rulmae/adam.hpp"

#include <cmath>

#include "rulmae/error.hpp"

namespace rulmae {

AdamState::AdamState(AdamConfig config, const std::vector<Tensor*>& params)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamState::step(const std::vector<Tensor*>& params,
                     const std::vector<const Tensor*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    raise(ErrorCode::ShapeMismatch, "adam step: parameter list does not match state");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    if (!p.same_shape(m) || !g.same_shape(m)) {
      raise(ErrorCode::ShapeMismatch, "adam step: tensor " + std::to_string(i) +
                                          " shape " + g.shape_str() +
                                          " does not match state " + m.shape_str());
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace rulmae
