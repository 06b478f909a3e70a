#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "semcom/tensor.hpp"

namespace semcom {

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Training-time parameter updates. Holds the adaptive-moment state for a
// fixed list of parameters; the i-th gradient always belongs to the i-th
// parameter.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::size_t steps_taken() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

// One-shot stateless form for plain descent: param - lr * grad.
Tensor sgd_update(const Tensor& param, const Tensor& grad, double learning_rate);

}  // namespace semcom
