#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "semcom/autograd.hpp"
#include "semcom/checkpoint.hpp"
#include "semcom/rng.hpp"

namespace semcom {

enum class Activation { identity, relu, tanh, sigmoid };

struct Dense {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

// Fully connected stack. `hidden` is applied after every layer but the
// last, `output` after the last.
struct Mlp {
  std::vector<Dense> layers;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  // Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static Mlp init(const std::vector<std::size_t>& sizes, Activation hidden, Activation output,
                  Rng& rng);

  std::size_t input_dim() const { return layers.front().weight.dim(0); }
  std::size_t output_dim() const { return layers.back().weight.dim(1); }

  std::vector<Tensor*> parameters();

  void save(Checkpoint& ck, const std::string& prefix) const;
  static Mlp load(const Checkpoint& ck, const std::string& prefix);
};

template <typename T>
Var<T> activate(const Var<T>& x, Activation a) {
  switch (a) {
    case Activation::relu:
      return ag::relu(x);
    case Activation::tanh:
      return ag::tanh(x);
    case Activation::sigmoid:
      return ag::sigmoid(x);
    case Activation::identity:
      break;
  }
  return x;
}

// Mlp parameters placed on a tape, either as leaves (training) or constants.
template <typename T>
struct BoundMlp {
  std::vector<Var<T>> weights;
  std::vector<Var<T>> biases;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  Var<T> operator()(Var<T> x) const {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      x = ag::affine(x, weights[i], biases[i]);
      x = activate(x, i + 1 == weights.size() ? output : hidden);
    }
    return x;
  }

  // Leaves in the order Mlp::parameters() returns them.
  std::vector<Var<T>> leaves() const {
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(weights[i]);
      out.push_back(biases[i]);
    }
    return out;
  }
};

template <typename T>
BoundMlp<T> bind(Tape<T>& tape, const Mlp& mlp, bool trainable) {
  BoundMlp<T> b;
  b.hidden = mlp.hidden;
  b.output = mlp.output;
  for (const Dense& d : mlp.layers) {
    auto w = BasicTensor<T>::cast(d.weight);
    auto bias = BasicTensor<T>::cast(d.bias);
    b.weights.push_back(trainable ? tape.leaf(std::move(w)) : tape.constant(std::move(w)));
    b.biases.push_back(trainable ? tape.leaf(std::move(bias)) : tape.constant(std::move(bias)));
  }
  return b;
}

// Tape-free inference on rows of x [n, in]; same kernels as the graph path.
Tensor mlp_forward(const Mlp& mlp, const Tensor& x);

std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

}  // namespace semcom
