#pragma once

// Function-level evaluation and differentiation contract, plus the
// central-difference oracle used to verify it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "semcom/autograd.hpp"

namespace semcom {

template <typename T>
using Inputs = std::map<std::string, BasicTensor<T>>;

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

// A scalar-valued function described as a graph builder.
template <typename T>
using GraphFn = std::function<Var<T>(Tape<T>&, const VarMap<T>&)>;

template <typename T>
struct GradientResult {
  T value{};
  std::map<std::string, BasicTensor<T>> gradients;
};

namespace detail {

template <typename T>
Var<T> run_graph(Tape<T>& tape, const GraphFn<T>& fn, const Inputs<T>& inputs,
                 const std::set<std::string>& wrt) {
  VarMap<T> vars;
  for (const auto& [name, tensor] : inputs) {
    vars.emplace(name, wrt.count(name) ? tape.leaf(tensor) : tape.constant(tensor));
  }
  Var<T> out = fn(tape, vars);
  if (out.value().size() != 1) {
    throw ShapeError("graph function must be scalar-valued, got " + shape_string(out.shape()));
  }
  return out;
}

template <typename T>
void check_wrt(const Inputs<T>& inputs, const std::set<std::string>& wrt) {
  for (const auto& name : wrt) {
    if (!inputs.count(name)) throw ContractError("unknown input identifier '" + name + "'");
  }
}

}  // namespace detail

template <typename T>
T eval(const GraphFn<T>& fn, const Inputs<T>& inputs) {
  Tape<T> tape;
  return detail::run_graph(tape, fn, inputs, {}).item();
}

template <typename T>
GradientResult<T> grad(const GraphFn<T>& fn, const Inputs<T>& inputs,
                       const std::set<std::string>& wrt) {
  detail::check_wrt(inputs, wrt);
  Tape<T> tape;
  VarMap<T> vars;
  for (const auto& [name, tensor] : inputs) {
    vars.emplace(name, wrt.count(name) ? tape.leaf(tensor) : tape.constant(tensor));
  }
  Var<T> out = fn(tape, vars);
  if (out.value().size() != 1) {
    throw ShapeError("graph function must be scalar-valued, got " + shape_string(out.shape()));
  }
  tape.backward(out);
  GradientResult<T> result;
  result.value = out.item();
  for (const auto& name : wrt) {
    const BasicTensor<T>& g = tape.grad(vars.at(name));
    g.check_finite("gradient of '" + name + "'");
    result.gradients.emplace(name, g);
  }
  return result;
}

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h, one coordinate at a time.
template <typename T>
GradientResult<T> finite_diff_grad(const GraphFn<T>& fn, const Inputs<T>& inputs,
                                   const std::set<std::string>& wrt, T h) {
  if (!(h > T{0})) throw ContractError("finite_diff_grad: step must be positive");
  detail::check_wrt(inputs, wrt);
  GradientResult<T> result;
  result.value = eval(fn, inputs);
  Inputs<T> probe = inputs;
  for (const auto& name : wrt) {
    BasicTensor<T>& x = probe.at(name);
    BasicTensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T orig = x[i];
      x[i] = orig + h;
      const T fp = eval(fn, probe);
      x[i] = orig - h;
      const T fm = eval(fn, probe);
      x[i] = orig;
      g[i] = (fp - fm) / (T{2} * h);
    }
    result.gradients.emplace(name, std::move(g));
  }
  return result;
}

// Largest elementwise |a-b| / max(|a|, |b|, floor) across all gradients.
template <typename T>
double max_relative_error(const GradientResult<T>& a, const GradientResult<T>& b,
                          double floor = 1e-8) {
  double worst = 0.0;
  for (const auto& [name, ga] : a.gradients) {
    const BasicTensor<T>& gb = b.gradients.at(name);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = ga[i], y = gb[i];
      const double denom = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / denom);
    }
  }
  return worst;
}

}  // namespace semcom
