#pragma once

// Reverse-mode differentiation over a dynamically recorded tape.
//
// Every operation appends a node holding its value and a closure that
// propagates the node's gradient into its parents. Nodes are appended in
// evaluation order, so a reverse sweep over node ids is a valid topological
// order. A Tape is single-use state owned by one evaluation; models hold
// plain tensors and bind them onto a fresh tape per forward pass.
//
// Primitive set: matmul, affine, add, sub, mul, scale, relu, tanh, sigmoid,
// square, reshape, sum, mean, l2_norm, cosine_similarity, row_normalize,
// softmax_cross_entropy, concat_cols, gather_rows, transpose,
// straight_through.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "semcom/error.hpp"
#include "semcom/tensor.hpp"

namespace semcom {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const BasicTensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  T item() const { return value().item(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var<T> leaf(TensorT value) {
    value.check_finite("tape leaf");
    return push(std::move(value), true, nullptr);
  }

  // Non-differentiable input.
  Var<T> constant(TensorT value) {
    value.check_finite("tape constant");
    return push(std::move(value), false, nullptr);
  }

  Var<T> record(TensorT value, bool requires_grad, BackwardFn fn, const char* op) {
    if (!value.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite intermediate");
    return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr);
  }

  const TensorT& value(const Var<T>& v) const { return nodes_.at(v.id()).value; }
  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient accumulator for a node, allocated on first use; nullptr when
  // the node does not participate in differentiation.
  TensorT* grad_ptr(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size()) n.grad = TensorT(n.value.shape());
    return &n.grad;
  }

  const TensorT& grad(const Var<T>& v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.size() != n.value.size()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 and sweeps the tape backwards.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1) {
      throw ShapeError("backward requires a scalar root, got " + shape_string(root.shape()));
    }
    TensorT* g = grad_ptr(root.id());
    if (g == nullptr) return;
    (*g)[0] = T{1};
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() == n.value.size()) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Drops every node recorded after the first `n`. Lets a caller bind
  // constant weights once and re-run the rest of a graph many times.
  void truncate(std::size_t n) {
    while (nodes_.size() > n) nodes_.pop_back();
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(TensorT value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), TensorT(), requires_grad, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  // deque keeps element references stable while the tape grows.
  std::deque<Node> nodes_;
};

namespace ag {

namespace detail {

template <typename T>
bool any_grad(const Var<T>& a) {
  return a.tape().requires_grad(a);
}

template <typename T>
bool any_grad(const Var<T>& a, const Var<T>& b) {
  return a.tape().requires_grad(a) || b.tape().requires_grad(b);
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <typename T>
std::pair<std::size_t, std::size_t> matrix_dims(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_string(t.shape()));
  }
  return {t.dim(0), t.dim(1)};
}

// Rows/cols view for row-wise ops: rank-1 is treated as a single row.
template <typename T>
std::pair<std::size_t, std::size_t> row_view(const BasicTensor<T>& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(std::string(op) + ": expected rank-1 or rank-2 operand, got " +
                   shape_string(t.shape()));
}

// C[n,m] += A[n,k] * B[k,m]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[n,k] += G[n,m] * B[k,m]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* gi = g + i * m;
    T* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * m;
      T acc{0};
      for (std::size_t j = 0; j < m; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// C[k,m] += A[n,k]^T * G[n,m]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
    }
  }
}

template <typename T>
void accumulate(Tape<T>& tape, std::size_t id, std::span<const T> g) {
  if (BasicTensor<T>* dst = tape.grad_ptr(id)) {
    auto d = dst->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  }
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        detail::accumulate<T>(t, ia, g);
        detail::accumulate<T>(t, ib, g);
      },
      "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        detail::accumulate<T>(t, ia, g);
        if (BasicTensor<T>* db = t.grad_ptr(ib)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
        }
      },
      "sub");
}

// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto av = t.value(ia).data();
        const auto bv = t.value(ib).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
        }
        if (BasicTensor<T>* db = t.grad_ptr(ib)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& x : out.data()) x *= c;
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia, c](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += c * g[i];
        }
      },
      "scale");
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "matmul");
  const auto [n, k] = detail::matrix_dims(a.value(), "matmul");
  const auto [k2, m] = detail::matrix_dims(b.value(), "matmul");
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  BasicTensor<T> out(Shape{n, m});
  detail::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib, n = n, k = k, m = m](Tape<T>& t, std::size_t self) {
        const T* g = t.grad_ptr(self)->data().data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          detail::gemm_nt(g, t.value(ib).data().data(), da->data().data(), n, m, k);
        }
        if (BasicTensor<T>* db = t.grad_ptr(ib)) {
          detail::gemm_tn(t.value(ia).data().data(), g, db->data().data(), n, k, m);
        }
      },
      "matmul");
}

// x[n,in] * w[in,out] + bias[out] broadcast over rows.
template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  detail::same_tape(x, w, "affine");
  detail::same_tape(x, bias, "affine");
  const auto [n, k] = detail::matrix_dims(x.value(), "affine");
  const auto [k2, m] = detail::matrix_dims(w.value(), "affine");
  if (k != k2 || bias.value().size() != m) {
    throw ShapeError("affine: incompatible shapes " + shape_string(x.shape()) + ", " +
                     shape_string(w.shape()) + ", " + shape_string(bias.shape()));
  }
  BasicTensor<T> out(Shape{n, m});
  const auto bv = bias.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = bv[j];
  }
  detail::gemm_nn(x.value().data().data(), w.value().data().data(), out.data().data(), n, k, m);
  const std::size_t ix = x.id(), iw = w.id(), ib = bias.id();
  const bool rg = x.tape().requires_grad(x) || x.tape().requires_grad(w) ||
                  x.tape().requires_grad(bias);
  return x.tape().record(
      std::move(out), rg,
      [ix, iw, ib, n = n, k = k, m = m](Tape<T>& t, std::size_t self) {
        const T* g = t.grad_ptr(self)->data().data();
        if (BasicTensor<T>* dx = t.grad_ptr(ix)) {
          detail::gemm_nt(g, t.value(iw).data().data(), dx->data().data(), n, m, k);
        }
        if (BasicTensor<T>* dw = t.grad_ptr(iw)) {
          detail::gemm_tn(t.value(ix).data().data(), g, dw->data().data(), n, k, m);
        }
        if (BasicTensor<T>* db = t.grad_ptr(ib)) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) (*db)[j] += g[i * m + j];
          }
        }
      },
      "affine");
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& x : out.data()) x = x > T{0} ? x : T{0};
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto y = t.value(self).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (y[i] > T{0}) (*da)[i] += g[i];
          }
        }
      },
      "relu");
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& x : out.data()) x = std::tanh(x);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto y = t.value(self).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * (T{1} - y[i] * y[i]);
        }
      },
      "tanh");
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& x : out.data()) x = T{1} / (T{1} + std::exp(-x));
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto y = t.value(self).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * y[i] * (T{1} - y[i]);
        }
      },
      "sigmoid");
}

template <typename T>
Var<T> square(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& x : out.data()) x *= x;
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto x = t.value(ia).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += T{2} * x[i] * g[i];
        }
      },
      "square");
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        detail::accumulate<T>(t, ia, t.grad_ptr(self)->data());
      },
      "reshape");
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T x : a.value().data()) s += x;
  const std::size_t ia = a.id();
  return a.tape().record(
      BasicTensor<T>::scalar(s), detail::any_grad(a),
      [ia](Tape<T>& t, std::size_t self) {
        const T g = (*t.grad_ptr(self))[0];
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (auto& x : da->data()) x += g;
        }
      },
      "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

// Euclidean norm of the whole tensor; the gradient at 0 is taken as 0.
template <typename T>
Var<T> l2_norm(const Var<T>& a) {
  T s{0};
  for (T x : a.value().data()) s += x * x;
  const T norm = std::sqrt(s);
  const std::size_t ia = a.id();
  return a.tape().record(
      BasicTensor<T>::scalar(norm), detail::any_grad(a),
      [ia, norm](Tape<T>& t, std::size_t self) {
        if (norm == T{0}) return;
        const T g = (*t.grad_ptr(self))[0];
        const auto x = t.value(ia).data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < x.size(); ++i) (*da)[i] += g * x[i] / norm;
        }
      },
      "l2_norm");
}

inline constexpr double kNormEpsilon = 1e-8;

// Row-wise cosine similarity a_i.b_i / ((|a_i|+eps)(|b_i|+eps)).
// Rank-1 operands give a scalar, rank-2 operands [n,m] give a vector [n].
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "cosine_similarity");
  require_same_shape(a.value(), b.value(), "cosine_similarity");
  const auto [n, m] = detail::row_view(a.value(), "cosine_similarity");
  const T eps = static_cast<T>(kNormEpsilon);
  std::vector<T> cos(n), na(n), nb(n), dots(n);
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    T sa{0}, sb{0}, d{0};
    for (std::size_t j = 0; j < m; ++j) {
      const T x = av[i * m + j], y = bv[i * m + j];
      sa += x * x;
      sb += y * y;
      d += x * y;
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    dots[i] = d;
    cos[i] = d / ((na[i] + eps) * (nb[i] + eps));
  }
  BasicTensor<T> out = a.value().rank() == 1 ? BasicTensor<T>::scalar(cos[0])
                                             : BasicTensor<T>(Shape{n}, cos);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib, n = n, m = m, eps, na, nb, dots](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        const auto av = t.value(ia).data();
        const auto bv = t.value(ib).data();
        BasicTensor<T>* da = t.grad_ptr(ia);
        BasicTensor<T>* db = t.grad_ptr(ib);
        for (std::size_t i = 0; i < n; ++i) {
          const T dena = na[i] + eps, denb = nb[i] + eps;
          const T inv = T{1} / (dena * denb);
          // d|a|/da = a/|a|; zero at a == 0.
          const T ca = na[i] > T{0} ? dots[i] / (dena * dena * denb * na[i]) : T{0};
          const T cb = nb[i] > T{0} ? dots[i] / (dena * denb * denb * nb[i]) : T{0};
          for (std::size_t j = 0; j < m; ++j) {
            const T x = av[i * m + j], y = bv[i * m + j];
            if (da) (*da)[i * m + j] += g[i] * (y * inv - ca * x);
            if (db) (*db)[i * m + j] += g[i] * (x * inv - cb * y);
          }
        }
      },
      "cosine_similarity");
}

// Each row divided by (|row| + eps).
template <typename T>
Var<T> row_normalize(const Var<T>& a) {
  const auto [n, m] = detail::row_view(a.value(), "row_normalize");
  const T eps = static_cast<T>(kNormEpsilon);
  BasicTensor<T> out = a.value();
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < m; ++j) s += out[i * m + j] * out[i * m + j];
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= norms[i] + eps;
  }
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia, n = n, m = m, eps, norms](Tape<T>& t, std::size_t self) {
        BasicTensor<T>* da = t.grad_ptr(ia);
        if (!da) return;
        const auto g = t.grad_ptr(self)->data();
        const auto x = t.value(ia).data();
        for (std::size_t i = 0; i < n; ++i) {
          const T den = norms[i] + eps;
          T gx{0};
          for (std::size_t j = 0; j < m; ++j) gx += g[i * m + j] * x[i * m + j];
          const T c = norms[i] > T{0} ? gx / (den * den * norms[i]) : T{0};
          for (std::size_t j = 0; j < m; ++j) {
            (*da)[i * m + j] += g[i * m + j] / den - c * x[i * m + j];
          }
        }
      },
      "row_normalize");
}

// Mean over rows of -log softmax(logits_i)[label_i].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto [n, c] = detail::matrix_dims(logits.value(), "softmax_cross_entropy");
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
  BasicTensor<T> probs(Shape{n, c});
  T loss{0};
  const auto lv = logits.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("softmax_cross_entropy: label out of range");
    }
    T mx = lv[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(lv[i * c + j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss -= (lv[i * c + labels[i]] - mx) - std::log(z);
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      BasicTensor<T>::scalar(loss), detail::any_grad(logits),
      [il, n = n, c = c, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t,
                                                                          std::size_t self) {
        BasicTensor<T>* dl = t.grad_ptr(il);
        if (!dl) return;
        const T g = (*t.grad_ptr(self))[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<std::size_t>(lab[i]) == j ? T{1} : T{0};
            (*dl)[i * c + j] += g * (probs[i * c + j] - onehot);
          }
        }
      },
      "softmax_cross_entropy");
}

// [n,p] ++ [n,q] -> [n,p+q]
template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "concat_cols");
  const auto [n, p] = detail::matrix_dims(a.value(), "concat_cols");
  const auto [n2, q] = detail::matrix_dims(b.value(), "concat_cols");
  if (n != n2) throw ShapeError("concat_cols: row counts differ");
  BasicTensor<T> out(Shape{n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = a.value().at(i, j);
    for (std::size_t j = 0; j < q; ++j) out.at(i, p + j) = b.value().at(i, j);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a, b),
      [ia, ib, n = n, p = p, q = q](Tape<T>& t, std::size_t self) {
        const auto g = t.grad_ptr(self)->data();
        if (BasicTensor<T>* da = t.grad_ptr(ia)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p; ++j) (*da)[i * p + j] += g[i * (p + q) + j];
        }
        if (BasicTensor<T>* db = t.grad_ptr(ib)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < q; ++j) (*db)[i * q + j] += g[i * (p + q) + p + j];
        }
      },
      "concat_cols");
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const auto [n, m] = detail::matrix_dims(a.value(), "transpose");
  BasicTensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(j, i) = a.value().at(i, j);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), detail::any_grad(a),
      [ia, n = n, m = m](Tape<T>& t, std::size_t self) {
        BasicTensor<T>* da = t.grad_ptr(ia);
        if (!da) return;
        const auto g = t.grad_ptr(self)->data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) (*da)[i * m + j] += g[j * n + i];
      },
      "transpose");
}

// Rows of table[M,d] selected by indices -> [n,d].
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> indices) {
  const auto [rows, d] = detail::matrix_dims(table.value(), "gather_rows");
  BasicTensor<T> out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ContractError("gather_rows: index out of range");
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = table.value().at(indices[i], j);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return table.tape().record(
      std::move(out), detail::any_grad(table),
      [it, d = d, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
        BasicTensor<T>* dt = t.grad_ptr(it);
        if (!dt) return;
        const auto g = t.grad_ptr(self)->data();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) (*dt)[idx[i] * d + j] += g[i * d + j];
      },
      "gather_rows");
}

// Forward value is `replacement`; the backward pass treats the op as the
// identity on `x` (straight-through estimator).
template <typename T>
Var<T> straight_through(const Var<T>& x, BasicTensor<T> replacement) {
  require_same_shape(x.value(), replacement, "straight_through");
  const std::size_t ix = x.id();
  return x.tape().record(
      std::move(replacement), detail::any_grad(x),
      [ix](Tape<T>& t, std::size_t self) {
        detail::accumulate<T>(t, ix, t.grad_ptr(self)->data());
      },
      "straight_through");
}

// Detached copy: same value, no gradient flow.
template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  return x.tape().constant(x.value());
}

}  // namespace ag
}  // namespace semcom
