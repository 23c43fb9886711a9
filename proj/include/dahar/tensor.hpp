#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "dahar/common.hpp"

namespace dahar {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ConfigError("tensor extent must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Runtime switch for the NaN/Inf scan that runs after every forward op.
// On by default in debug builds.
inline bool& nan_guard_flag() {
#ifdef NDEBUG
  static bool on = false;
#else
  static bool on = true;
#endif
  return on;
}
inline void set_nan_guard(bool on) { nan_guard_flag() = on; }

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;        // empty until first accumulation
  bool requires_grad = false; // trainable leaf
  bool tracked = false;       // participates in the active graph
};

}  // namespace detail

// Dense N-d array. Copies share storage (and the gradient accumulator),
// so tensors can be passed around by value and captured in backward
// closures cheaply. Data layout is row-major; feature maps are BCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(t.impl_->shape))
      throw ConfigError("from_data: value count does not match shape " + shape_str(t.impl_->shape));
    t.impl_->data = std::move(values);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T& at(int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
  T at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

  // BCHW accessor for feature maps.
  T& at(int b, int c, int h, int w) {
    const Shape& s = impl_->shape;
    return impl_->data[((static_cast<size_t>(b) * s[1] + c) * s[2] + h) * s[3] + w];
  }
  T at(int b, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return impl_->data[((static_cast<size_t>(b) * s[1] + c) * s[2] + h) * s[3] + w];
  }

  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    impl_->tracked = on || impl_->tracked;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  bool tracked() const { return impl_ && impl_->tracked; }
  void mark_tracked() { impl_->tracked = true; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<T>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>(*impl_);
    return t;
  }

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }
  std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Tape of executed ops. Execution order is the topological order; the
// backward sweep walks it once in reverse, so each node is visited
// exactly once and fan-out gradients accumulate additively.
template <typename T>
class Graph {
 public:
  struct Node {
    const char* op;
    std::shared_ptr<detail::TensorImpl<T>> out;
    std::function<void()> backward;
  };

  class Recording {
   public:
    explicit Recording(Graph* g) : g_(g) {
      if (active_ != nullptr) throw ContractError("a graph is already recording on this thread");
      active_ = g_;
    }
    ~Recording() { active_ = nullptr; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Graph* g_;
  };

  Recording record() { return Recording(this); }

  static Graph* active() { return active_; }

  void push(const char* op, const Tensor<T>& out, std::function<void()> backward) {
    nodes_.push_back(Node{op, out.impl(), std::move(backward)});
  }

  void backward(const Tensor<T>& loss) {
    if (done_) throw ContractError("backward called twice without graph reset");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
    done_ = true;
    loss.impl()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->out->grad.empty()) it->backward();
    }
  }

  void clear() {
    nodes_.clear();
    done_ = false;
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool done_ = false;
  inline static thread_local Graph* active_ = nullptr;
};

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!nan_guard_flag()) return;
  const T* p = t.data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
}

template <typename T>
bool any_tracked(std::initializer_list<Tensor<T>> inputs) {
  for (const auto& t : inputs)
    if (t.defined() && t.tracked()) return true;
  return false;
}

// Registers `backward` on the active tape when any input is tracked.
template <typename T, typename F>
void record_op(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out, F&& backward) {
  check_finite(out, op);
  Graph<T>* g = Graph<T>::active();
  if (g != nullptr && any_tracked(inputs)) {
    out.mark_tracked();
    g->push(op, out, std::forward<F>(backward));
  }
}

template <typename T>
void axpy(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---- elementwise / reduction primitives -------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  detail::record_op("add", {a, b}, out, [a, b, out]() mutable {
    const auto& go = out.impl()->grad;
    if (a.tracked()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.tracked()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  detail::record_op("mul", {a, b}, out, [a, b, out]() mutable {
    const auto& go = out.impl()->grad;
    if (a.tracked()) {
      auto& ga = a.grad();
      const T* pb2 = b.data();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb2[i];
    }
    if (b.tracked()) {
      auto& gb = b.grad();
      const T* pa2 = a.data();
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  detail::record_op("scale", {a}, out, [a, out, s]() mutable {
    const auto& go = out.impl()->grad;
    auto& ga = a.grad();
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  T acc = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.at(0) = acc;
  detail::record_op("sum", {a}, out, [a, out]() mutable {
    T g = out.impl()->grad[0];
    auto& ga = a.grad();
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
  return out;
}

}  // namespace dahar
