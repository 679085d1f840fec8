#pragma once

#include <cstddef>
#include <functional>
#include <iostream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spot/errors.hpp"

namespace spot {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const Tape* tape = nullptr;  // tape that recorded the op producing this value

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage; use clone() for a deep copy. Values produced while a
/// Tape is active (and depending on a requires_grad input) are recorded on
/// that tape so Tape::backward can propagate into them.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
  std::size_t cols() const { return rank() == 2 ? dim(1) : dim(0); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  std::vector<double> to_vector() const { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Same values, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), impl_->data); }
  Tensor clone() const {
    Tensor t(shape(), impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  const detail::TensorImpl* id() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

using WarningHandler = std::function<void(const std::string&)>;

inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](const std::string& msg) {
    std::cerr << "spot: warning: " << msg << '\n';
  };
  return handler;
}

inline void set_warning_handler(WarningHandler handler) { warning_handler() = std::move(handler); }
inline void warn(const std::string& msg) {
  if (warning_handler()) warning_handler()(msg);
}

/// Ordered record of differentiable operations for one forward pass.
///
/// Execution order is a topological order of the graph, so backward() walks
/// the entries in reverse and runs each node's adjoint exactly once. A tape
/// supports a single backward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> adjoint) {
    if (consumed_) throw ContractError("cannot record on a tape that already ran backward");
    output->tape = this;
    entries_.push_back(Entry{std::move(output), std::move(adjoint)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.id()->tape != this || !loss.requires_grad()) {
      warn("backward called on a tensor that is not recorded on this tape; nothing to do");
      return;
    }
    if (consumed_) throw ContractError("backward already ran on this tape");
    consumed_ = true;
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->grad.empty()) it->adjoint();
    }
    entries_.clear();
  }

 private:
  friend class TapeScope;
  friend class NoGradScope;

  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> adjoint;
  };

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Installs a tape as the active recorder for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::current()) { Tape::current() = &tape; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording; ops evaluate values only.
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape::current()) { Tape::current() = nullptr; }
  ~NoGradScope() { Tape::current() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace spot
