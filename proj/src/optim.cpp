#include "semcom/optim.hpp"

#include <cmath>

namespace semcom {

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "optimizer");
  }
  ++steps_;
  if (config_.kind == OptimizerConfig::Kind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      const auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] = static_cast<float>(p[j] - config_.learning_rate * g[j]);
      }
    }
    return;
  }
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  } else if (m_.size() != params.size()) {
    throw ShapeError("optimizer: parameter list changed between steps");
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    const auto g = grads[i].data();
    if (m_[i].size() != p.size()) throw ShapeError("optimizer: parameter size changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g[j];
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g[j] * g[j];
      const double mh = m_[i][j] / c1;
      const double vh = v_[i][j] / c2;
      p[j] = static_cast<float>(p[j] - config_.learning_rate * mh / (std::sqrt(vh) + config_.epsilon));
    }
  }
}

Tensor sgd_update(const Tensor& param, const Tensor& grad, double learning_rate) {
  require_same_shape(param, grad, "sgd_update");
  Tensor out = param;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(out[i] - learning_rate * grad[i]);
  }
  return out;
}

}  // namespace semcom
