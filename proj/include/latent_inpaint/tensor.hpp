#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace latent_inpaint {

using Shape = std::vector<std::size_t>;

/// Raised when an operation produces NaN or infinity.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by the reverse pass (detached graph, non-scalar loss, missing
/// second-order rule).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;

// Reverse rule of one primitive. Receives the node output (so rules may
// reuse it without the node owning a reference to its own output), the
// upstream gradient, and which inputs need a gradient. Entries for inputs
// that do not need one may be left undefined.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& output, const Tensor& grad_output, const std::vector<bool>& needs)>;

struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  // False for rules whose gradient expression is not itself recorded.
  bool supports_double_backward = true;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
  std::shared_ptr<TensorImpl> grad;
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// N-dimensional row-major array of doubles that may participate in the
/// reverse-mode tape.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }

  /// Writable view of a leaf's values (parameter updates, clamping).
  std::span<double> mutable_data() {
    if (impl_->grad_fn) throw AutogradError("mutable_data() on a non-leaf tensor");
    return impl_->data;
  }

  double at(std::size_t i) const { return impl_->data.at(i); }

  /// Element at a full multi-index.
  double at(const Shape& index) const {
    if (index.size() != rank()) throw ShapeError("index rank does not match " + shape_str(shape()));
    std::size_t flat = 0;
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= impl_->shape[k]) throw ShapeError("index out of range for " + shape_str(shape()));
      flat = flat * impl_->shape[k] + index[k];
    }
    return impl_->data[flat];
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool is_leaf() const { return !impl_->grad_fn; }
  bool requires_grad() const { return impl_->requires_grad || impl_->grad_fn; }

  Tensor& set_requires_grad(bool flag) {
    if (impl_->grad_fn) throw AutogradError("requires_grad can only be set on leaves");
    impl_->requires_grad = flag;
    return *this;
  }

  /// Accumulated gradient from backward(); undefined until one is written.
  Tensor grad() const {
    Tensor g;
    g.impl_ = impl_->grad;
    return g;
  }

  void zero_grad() { impl_->grad.reset(); }

  /// Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  const detail::Node* grad_fn() const { return impl_->grad_fn.get(); }

  detail::TensorImpl* impl() const { return impl_.get(); }

  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  std::shared_ptr<detail::TensorImpl> shared_impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables recording for the lifetime of the guard (current thread only).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool enabled) : previous_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = enabled;
  }
  ~EnableGradGuard() { detail::grad_mode_enabled = previous_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

namespace detail {

inline void check_finite(std::string_view op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError("non-finite value produced by " + std::string(op));
    }
  }
}

/// Builds an op result and, when recording, attaches its reverse rule.
inline Tensor make_result(std::string_view name, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, BackwardFn backward,
                          bool supports_double_backward = true) {
  check_finite(name, values);
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->name = std::string(name);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->supports_double_backward = supports_double_backward;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace detail

}  // namespace latent_inpaint
