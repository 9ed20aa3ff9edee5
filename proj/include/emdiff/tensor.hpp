#pragma once

// Dense float32 tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Nodes created from inputs
// that require gradients remember their inputs and a backward closure;
// `backward(loss)` walks that graph and returns the gradients of the leaves in
// a separate `Gradients` object, so evaluating a shared network from several
// threads never writes to the shared parameters.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/rng.hpp"

namespace emdiff {

using Shape = std::vector<std::size_t>;

class Tensor;
class Gradients;
Gradients backward(const Tensor& loss);

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// grad_out has the node's numel; input_grads[i] is null when input i does not
// require a gradient, otherwise an accumulator of that input's numel.
using BackwardFn =
    std::function<void(std::span<const float> grad_out, std::span<std::vector<float>*> input_grads)>;

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<float>> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;
};

inline void check_finite(std::span<const float> v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << "non-finite value " << v[i] << " produced by '" << op << "' at flat index " << i;
      throw NonFiniteError(os.str());
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
    detail::check_finite(data, "leaf");
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::make_shared<std::vector<float>>(std::move(data));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, v));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value->size(); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
  std::size_t cols() const { return rank() == 2 ? dim(1) : numel(); }

  std::span<const float> data() const { return *node_->value; }
  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return (*node_->value)[0];
  }
  float operator[](std::size_t i) const { return (*node_->value)[i]; }

  // In-place access for optimizers and EMA; only meaningful on leaves.
  std::span<float> mutable_data() {
    if (!is_leaf()) throw PreconditionError("mutable_data() on a non-leaf tensor");
    return *node_->value;
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return node_ && !node_->backward; }

  /// Same storage, no tape participation.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  /// Deep copy of the values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), std::vector<float>(data().begin(), data().end()), requires_grad);
  }

  const detail::Node* node() const noexcept { return node_.get(); }

  // Builds an op result. Only attaches the tape when some input needs it.
  static Tensor make_op(Shape shape, std::vector<float> value, const char* op,
                        std::vector<Tensor> inputs, detail::BackwardFn backward) {
    detail::check_finite(value, op);
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::make_shared<std::vector<float>>(std::move(value));
    t.node_->op = op;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& in) { return in.requires_grad(); });
    if (any) {
      t.node_->requires_grad = true;
      t.node_->backward = std::move(backward);
      t.node_->inputs.reserve(inputs.size());
      for (auto& in : inputs) t.node_->inputs.push_back(in.node_);
    }
    return t;
  }

 private:
  friend class Gradients;
  friend Gradients backward(const Tensor& loss);
  detail::NodePtr node_;
};

/// Gradients of the leaves reached by one backward pass.
class Gradients {
 public:
  bool has(const Tensor& t) const { return grads_.count(t.node()) != 0; }

  std::span<const float> of(const Tensor& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end()) throw PreconditionError("tensor received no gradient from this backward pass");
    return it->second;
  }

  Tensor as_tensor(const Tensor& t) const {
    auto g = of(t);
    return Tensor(t.shape(), std::vector<float>(g.begin(), g.end()));
  }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, std::vector<float>> grads_;
};

/// Reverse pass from a scalar loss. The tape is released when the last
/// Tensor referencing it goes out of scope.
inline Gradients backward(const Tensor& loss) {
  using detail::Node;
  if (!loss.defined() || loss.numel() != 1) throw ShapeError("backward() requires a scalar loss");
  if (!loss.requires_grad()) throw PreconditionError("backward() on a tensor that is not on the tape");

  // Iterative post-order DFS over nodes requiring grad.
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node_.get(), 0}};
  visited[loss.node_.get()] = true;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, std::vector<float>> acc;
  acc[loss.node_.get()] = {1.0f};
  Gradients out;
  std::vector<std::vector<float>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto g = acc.find(n);
    if (g == acc.end()) continue;
    if (!n->backward) {
      out.grads_[n] = std::move(g->second);
      acc.erase(g);
      continue;
    }
    slots.assign(n->inputs.size(), nullptr);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      Node* in = n->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& slot = acc[in];
      if (slot.empty()) slot.assign(in->value->size(), 0.0f);
      slots[i] = &slot;
    }
    // acc may rehash above; re-find the output grad.
    std::vector<float> grad_out = std::move(acc[n]);
    acc.erase(n);
    n->backward(grad_out, slots);
  }
  for (auto& [node, g] : out.grads_) detail::check_finite(g, "backward");
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  std::vector<float> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor::make_op(a.shape(), std::move(out), op, {a},
                         [a, df](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           auto x = a.data();
                           auto& g = *gi[0];
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * df(x[i]);
                         });
}

}  // namespace detail

/// a[m,k] · b[k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<float> out(m * n);
  detail::Map(out.data(), m, n).noalias() =
      detail::MapC(a.data().data(), m, k) * detail::MapC(b.data().data(), k, n);
  return Tensor::make_op({m, n}, std::move(out), "matmul", {a, b},
                         [a, b, m, k, n](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           detail::MapC dC(go.data(), m, n);
                           if (gi[0]) {
                             detail::Map(gi[0]->data(), m, k).noalias() +=
                                 dC * detail::MapC(b.data().data(), k, n).transpose();
                           }
                           if (gi[1]) {
                             detail::Map(gi[1]->data(), k, n).noalias() +=
                                 detail::MapC(a.data().data(), m, k).transpose() * dC;
                           }
                         });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_op(a.shape(), std::move(out), "add", {a, b},
                         [](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           for (auto* g : gi) {
                             if (!g) continue;
                             for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go[i];
                           }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_op(a.shape(), std::move(out), "sub", {a, b},
                         [](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           if (gi[0])
                             for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
                           if (gi[1])
                             for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] -= go[i];
                         });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_op(a.shape(), std::move(out), "mul", {a, b},
                         [a, b](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           if (gi[0])
                             for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * b[i];
                           if (gi[1])
                             for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] += go[i] * a[i];
                         });
}

inline Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  return Tensor::make_op(a.shape(), std::move(out), "scale", {a},
                         [c](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += c * go[i];
                         });
}

/// Row i of a[m,n] multiplied by coeffs[i] (constants, not on the tape).
inline Tensor scale_rows(const Tensor& a, std::span<const float> coeffs) {
  detail::require_matrix(a, "scale_rows");
  const auto m = a.dim(0), n = a.dim(1);
  if (coeffs.size() != m) throw ShapeError("scale_rows: need one coefficient per row");
  std::vector<float> c(coeffs.begin(), coeffs.end());
  std::vector<float> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = c[r] * a[r * n + j];
  return Tensor::make_op(a.shape(), std::move(out), "scale_rows", {a},
                         [c, m, n](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           for (std::size_t r = 0; r < m; ++r)
                             for (std::size_t j = 0; j < n; ++j) (*gi[0])[r * n + j] += c[r] * go[r * n + j];
                         });
}

/// a[m,n] + bias[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  detail::require_matrix(a, "add_rowvec");
  const auto m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n) {
    throw ShapeError("add_rowvec: bias " + shape_str(bias.shape()) + " vs columns " + std::to_string(n));
  }
  std::vector<float> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a[r * n + j] + bias[j];
  return Tensor::make_op(a.shape(), std::move(out), "add_rowvec", {a, bias},
                         [m, n](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           if (gi[0])
                             for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
                           if (gi[1])
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += go[r * n + j];
                         });
}

/// [a | b] along columns.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  const auto m = a.dim(0), p = a.dim(1), q = b.dim(1);
  if (b.dim(0) != m) throw ShapeError("concat_cols: row counts differ");
  std::vector<float> out(m * (p + q));
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a.data().begin() + r * p, p, out.begin() + r * (p + q));
    std::copy_n(b.data().begin() + r * q, q, out.begin() + r * (p + q) + p);
  }
  return Tensor::make_op({m, p + q}, std::move(out), "concat_cols", {a, b},
                         [m, p, q](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           for (std::size_t r = 0; r < m; ++r) {
                             if (gi[0])
                               for (std::size_t j = 0; j < p; ++j) (*gi[0])[r * p + j] += go[r * (p + q) + j];
                             if (gi[1])
                               for (std::size_t j = 0; j < q; ++j) (*gi[1])[r * q + j] += go[r * (p + q) + p + j];
                           }
                         });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary(
      a, "silu", [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, "tanh", [](float x) { return std::tanh(x); },
      [](float x) {
        const float y = std::tanh(x);
        return 1.0f - y * y;
      });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](float x) { return x * x; }, [](float x) { return 2.0f * x; });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return Tensor::make_op({1}, {static_cast<float>(s)}, "sum", {a},
                         [](std::span<const float> go, std::span<std::vector<float>*> gi) {
                           for (auto& g : *gi[0]) g += go[0];
                         });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

/// sum(a ⊙ b)
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

/// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& a, float p, Rng& rng) {
  if (p <= 0.0f) return a;
  if (p >= 1.0f) throw PreconditionError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<float> mask(a.numel());
  const float s = 1.0f / (1.0f - p);
  for (auto& v : mask) v = keep(rng) ? s : 0.0f;
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

}  // namespace emdiff
