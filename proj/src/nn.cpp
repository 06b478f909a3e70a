#include "semcom/nn.hpp"

namespace semcom {

Mlp Mlp::init(const std::vector<std::size_t>& sizes, Activation hidden, Activation output, Rng& rng) {
  if (sizes.size() < 2) throw ContractError("Mlp::init needs at least input and output sizes");
  Mlp mlp;
  mlp.hidden = hidden;
  mlp.output = output;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const std::size_t in = sizes[i], out = sizes[i + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Dense d{Tensor(Shape{in, out}), Tensor(Shape{out})};
    for (auto& w : d.weight.data()) w = static_cast<float>(rng.uniform(-limit, limit));
    mlp.layers.push_back(std::move(d));
  }
  return mlp;
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (Dense& d : layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  return out;
}

void Mlp::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_meta(prefix + ".layers", std::to_string(layers.size()));
  ck.put_meta(prefix + ".hidden", activation_name(hidden));
  ck.put_meta(prefix + ".output", activation_name(output));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ck.put(prefix + "." + std::to_string(i) + ".w", layers[i].weight);
    ck.put(prefix + "." + std::to_string(i) + ".b", layers[i].bias);
  }
}

Mlp Mlp::load(const Checkpoint& ck, const std::string& prefix) {
  Mlp mlp;
  const std::size_t n = std::stoul(ck.meta(prefix + ".layers"));
  mlp.hidden = parse_activation(ck.meta(prefix + ".hidden"));
  mlp.output = parse_activation(ck.meta(prefix + ".output"));
  for (std::size_t i = 0; i < n; ++i) {
    Dense d{ck.tensor(prefix + "." + std::to_string(i) + ".w"),
            ck.tensor(prefix + "." + std::to_string(i) + ".b")};
    if (d.weight.rank() != 2 || d.bias.rank() != 1 || d.bias.dim(0) != d.weight.dim(1)) {
      throw CheckpointError("corrupt checkpoint: layer " + prefix + "." + std::to_string(i) +
                            " has inconsistent shapes");
    }
    if (i > 0 && mlp.layers.back().weight.dim(1) != d.weight.dim(0)) {
      throw CheckpointError("corrupt checkpoint: layer chain mismatch in " + prefix);
    }
    mlp.layers.push_back(std::move(d));
  }
  return mlp;
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != mlp.input_dim()) {
    throw ShapeError("mlp_forward: input " + shape_string(x.shape()) + " does not match width " +
                     std::to_string(mlp.input_dim()));
  }
  Tensor h = x;
  const std::size_t n = x.dim(0);
  for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
    const Dense& d = mlp.layers[li];
    const std::size_t k = d.weight.dim(0), m = d.weight.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out.at(i, j) = d.bias[j];
    ag::detail::gemm_nn(h.data().data(), d.weight.data().data(), out.data().data(), n, k, m);
    const Activation a = li + 1 == mlp.layers.size() ? mlp.output : mlp.hidden;
    for (auto& v : out.data()) {
      switch (a) {
        case Activation::relu:
          v = v > 0.0f ? v : 0.0f;
          break;
        case Activation::tanh:
          v = std::tanh(v);
          break;
        case Activation::sigmoid:
          v = 1.0f / (1.0f + std::exp(-v));
          break;
        case Activation::identity:
          break;
      }
    }
    h = std::move(out);
  }
  return h;
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "identity";
}

Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw CheckpointError("unknown activation '" + s + "'");
}

}  // namespace semcom
