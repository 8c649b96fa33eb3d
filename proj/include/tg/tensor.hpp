#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised for malformed shapes, bad arguments and contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf shows up where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TensorImpl;

/// Backward closure of one recorded op. Receives d(loss)/d(output) and
/// accumulates into the inputs it captured.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct GradNode {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;  // empty until something flows back
  bool requires_grad = false;
  std::shared_ptr<GradNode> grad_fn;

  void accumulate_grad(std::span<const double> g);
  void accumulate_grad(std::vector<double>&& g);
};

/// Handle to an n-dimensional row-major array of doubles. Copies share the
/// underlying storage and gradient; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  Index dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  Index numel() const;

  std::span<const double> data() const;
  /// Direct write access. Only for leaves (initialisation, optimiser steps).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<Index> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  /// Reverse-mode sweep from this tensor. A one-element tensor is seeded with
  /// 1; otherwise pass an explicit seed of matching length.
  void backward() const;
  void backward(std::span<const double> seed) const;

  Tensor detach() const;
  Tensor clone() const;
  /// Differentiable reshape sharing storage with this tensor.
  Tensor reshape(Shape shape) const;

  bool is_leaf() const;
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Op results are allocated and released at a high rate; without this every
/// large buffer costs fresh page faults. Safe to call more than once.
void tune_allocator();

/// Global switch consulted when recording ops. Thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// True if gradients should flow into t.
inline bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

/// Builds an op result; records a graph node when any input wants a gradient
/// and grad mode is on.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

}  // namespace detail

}  // namespace tg
