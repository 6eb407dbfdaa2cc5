#pragma once

// Dense n-dimensional tensor with reverse-mode gradient tracking.
//
// A Tensor is a cheap handle onto a shared graph node. Values are fixed once
// an operation has produced them; only leaf tensors (parameters) are mutated,
// and only by optimizers and checkpoint loaders.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lesionforge/error.hpp"

namespace lesionforge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Process-wide switch for NaN/Inf detection after every operation. On by
/// default in debug builds.
inline bool& finite_checks_enabled() {
#ifdef NDEBUG
  static bool enabled = false;
#else
  static bool enabled = true;
#endif
  return enabled;
}

/// 64-byte aligned storage. Eigen's vectorized kernels split work at
/// alignment boundaries, so results depend on buffer addresses unless every
/// buffer starts on the same boundary.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, Buffer<T> values, bool requires_grad = false) : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
    if (shape_numel(shape) != values.size())
      throw ShapeError("element count " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    check_finite();
  }

  template <class Alloc>
  Tensor(Shape shape, const std::vector<T, Alloc>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> v(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Buffer<T> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Toggles gradient tracking on a leaf. Used to freeze one network while
  /// the other is updated.
  void set_requires_grad(bool on) {
    if (node_->backward_fn) throw Error("set_requires_grad is only valid on leaf tensors");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  std::span<T> mutable_data() {
    if (node_->backward_fn) throw Error("only leaf tensors may be mutated");
    return node_->value;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate; interior
  /// gradients are released after use so the sweep can be repeated.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_string(shape()));
    if (!requires_grad()) return;

    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (!n->backward_fn) continue;
      if (!n->grad.empty()) n->backward_fn(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

  const NodePtr& node() const { return node_; }

  /// Assembles the result of an operation. Parents and the backward closure
  /// are kept only when some parent tracks gradients.
  static Tensor from_op(const char* op, Shape shape, Buffer<T> values, std::vector<NodePtr> parents,
                        std::function<void(detail::Node<T>&)> backward_fn) {
    if (shape_numel(shape) != values.size()) throw ShapeError(std::string(op) + ": internal shape mismatch");
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = std::move(shape);
    out.node_->value = std::move(values);
    out.node_->op = op;
    out.check_finite();
    bool tracked = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (tracked) {
      out.node_->requires_grad = true;
      out.node_->parents = std::move(parents);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  void check_finite() const {
    if (!finite_checks_enabled()) return;
    for (T v : node_->value)
      if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + node_->op);
  }

  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Elementary operations

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

template <class T>
void accumulate(Node<T>& parent, std::span<const T> g, T factor = T(1)) {
  if (!parent.requires_grad) return;
  auto& dst = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::from_op("add", a.shape(), std::move(v), {pa, pb}, [pa, pb](detail::Node<T>& self) {
    detail::accumulate<T>(*pa, self.grad);
    detail::accumulate<T>(*pb, self.grad);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::from_op("sub", a.shape(), std::move(v), {pa, pb}, [pa, pb](detail::Node<T>& self) {
    detail::accumulate<T>(*pa, self.grad);
    detail::accumulate<T>(*pb, self.grad, T(-1));
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::from_op("mul", a.shape(), std::move(v), {pa, pb}, [pa, pb](detail::Node<T>& self) {
    const std::size_t n = self.grad.size();
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * factor;
  auto pa = a.node();
  return Tensor<T>::from_op("scale", a.shape(), std::move(v), {pa},
                            [pa, factor](detail::Node<T>& self) { detail::accumulate<T>(*pa, self.grad, factor); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return mul(a, a);
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.data()) s += x;
  auto pa = a.node();
  return Tensor<T>::from_op("sum", {1}, {s}, {pa}, [pa](detail::Node<T>& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (T& x : g) x += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape) + " changes element count");
  auto pa = a.node();
  return Tensor<T>::from_op("reshape", std::move(shape), Buffer<T>(a.data().begin(), a.data().end()), {pa},
                            [pa](detail::Node<T>& self) { detail::accumulate<T>(*pa, self.grad); });
}

/// Numerically stable log(1 + e^x).
template <class T>
T softplus_value(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  Buffer<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = softplus_value(a[i]);
  auto pa = a.node();
  return Tensor<T>::from_op("softplus", a.shape(), std::move(v), {pa}, [pa](detail::Node<T>& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sigmoid_value(pa->value[i]);
  });
}

/// Concatenates two tensors along axis 1 (channels for images, features for
/// matrices). All other extents must agree.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw ShapeError("concat_channels: rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != 1 && a.dim(i) != b.dim(i))
      throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t n = a.dim(0);
  const std::size_t inner = a.size() / (n * a.dim(1));
  const std::size_t ca = a.dim(1) * inner, cb = b.dim(1) * inner;
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  Buffer<T> v(a.size() + b.size());
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.data().begin() + s * ca, ca, v.begin() + s * (ca + cb));
    std::copy_n(b.data().begin() + s * cb, cb, v.begin() + s * (ca + cb) + ca);
  }
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::from_op("concat_channels", std::move(shape), std::move(v), {pa, pb},
                            [pa, pb, n, ca, cb](detail::Node<T>& self) {
                              for (std::size_t s = 0; s < n; ++s) {
                                if (pa->requires_grad) {
                                  auto& g = pa->ensure_grad();
                                  for (std::size_t i = 0; i < ca; ++i) g[s * ca + i] += self.grad[s * (ca + cb) + i];
                                }
                                if (pb->requires_grad) {
                                  auto& g = pb->ensure_grad();
                                  for (std::size_t i = 0; i < cb; ++i)
                                    g[s * cb + i] += self.grad[s * (ca + cb) + ca + i];
                                }
                              }
                            });
}

/// Casts values between precisions (no gradient path).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> v(a.data().begin(), a.data().end());
  return Tensor<To>(a.shape(), std::move(v));
}

}  // namespace lesionforge
