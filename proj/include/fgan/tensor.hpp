#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fgan/error.hpp"

namespace fgan {

/// Extents of a dense row-major tensor; canonical image layout is
/// batch x channels x height x width. An empty shape is a scalar.
using Shape = std::vector<std::size_t>;

/// (height, width) pair used for strides, paddings and kernels.
using HW = std::pair<std::size_t, std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class PadMode { kZero, kReflect };

namespace detail {

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a backward pass touches this tensor
  bool requires_grad = false;
};

}  // namespace detail

/// Dense n-dimensional array of fp32 or fp64 scalars. A Tensor is a cheap
/// shared handle: copies alias the same buffer. Values are immutable by
/// convention once an operation has consumed the tensor; the grad buffer is
/// the one field mutated afterwards (additively, during a backward pass).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }
  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(numel_of(t.d_->shape), value);
    t.d_->requires_grad = requires_grad;
    return t;
  }
  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: " + shape_str(shape) + " wants " +
                       std::to_string(numel_of(shape)) + " scalars, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return filled(Shape{}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return data().shape; }
  std::size_t rank() const { return data().shape.size(); }
  std::size_t extent(std::size_t axis) const { return data().shape.at(axis); }
  std::size_t numel() const { return data().values.size(); }

  std::span<T> values() { return data().values; }
  std::span<const T> values() const { return data().values; }

  /// Scalar read; requires numel() == 1.
  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    }
    return data().values[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    return data().values[offset_of(index)];
  }
  void set(std::initializer_list<std::size_t> index, T value) {
    data().values[offset_of(index)] = value;
  }

  bool requires_grad() const { return defined() && d_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    data().requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return defined() && !d_->grad.empty(); }
  /// Accumulation buffer, allocated zero-filled on first access.
  std::span<T> grad() {
    auto& d = data();
    if (d.grad.empty()) d.grad.assign(d.values.size(), T(0));
    return d.grad;
  }
  std::span<const T> grad_view() const {
    return defined() ? std::span<const T>(d_->grad) : std::span<const T>();
  }
  void clear_grad() {
    if (defined()) d_->grad.clear();
  }
  /// Copy of the accumulated gradient as a plain tensor (zeros if absent).
  Tensor grad_tensor() const {
    const auto& d = data();
    if (d.grad.empty()) return zeros(d.shape);
    return from_values(d.shape, d.grad);
  }

  /// Deep copy of values only (fresh buffer, no grad, requires_grad off).
  Tensor clone_values() const {
    const auto& d = data();
    return from_values(d.shape, d.values);
  }

  /// Stable identity for gradient bookkeeping.
  const void* id() const { return d_.get(); }
  detail::TensorData<T>* node() const { return d_.get(); }

 private:
  detail::TensorData<T>& data() {
    if (!d_) throw Error("tensor: use of empty handle");
    return *d_;
  }
  const detail::TensorData<T>& data() const {
    if (!d_) throw Error("tensor: use of empty handle");
    return *d_;
  }
  std::size_t offset_of(std::initializer_list<std::size_t> index) const {
    const auto& sh = data().shape;
    if (index.size() != sh.size()) {
      throw ShapeError("index rank " + std::to_string(index.size()) +
                       " vs tensor rank " + std::to_string(sh.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= sh[axis]) {
        throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                         std::to_string(axis));
      }
      off = off * sh[axis] + i;
      ++axis;
    }
    return off;
  }

  std::shared_ptr<detail::TensorData<T>> d_;
};

/// Ordered record of executed differentiable operations. Replaying the record
/// in reverse accumulates each reachable tensor's full gradient (additive over
/// all consuming operations). A tape is consumed by backward(); rerun the
/// forward pass under a fresh tape to differentiate again.
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  /// Tape currently recording on this thread, or nullptr.
  static GradientTape* active();

  bool consumed() const { return consumed_; }
  std::size_t size() const { return steps_.size(); }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  /// Seeds d(loss)/d(loss) = 1, replays the record in reverse (each operation
  /// exactly once) and consumes the tape. The loss must be a scalar.
  template <typename T>
  void backward(Tensor<T> loss) {
    if (consumed_) throw Error("backward: tape already consumed");
    if (!loss.defined() || loss.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       (loss.defined() ? shape_str(loss.shape()) : "empty"));
    }
    consumed_ = true;
    loss.grad()[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
  }

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

/// RAII activation of a tape: operations executed inside the scope are
/// recorded on it. Scopes nest; the previous tape is restored on exit.
class TapeScope {
 public:
  explicit TapeScope(GradientTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape* previous_;
};

/// True when a live tape is recording on this thread.
bool taping();

// ---------------------------------------------------------------------------
// Operations. Each is differentiable w.r.t. every tensor operand and records
// its backward step on the active tape when any operand requires a gradient.
// ---------------------------------------------------------------------------

/// Asymmetric spatial padding; the plain HW overloads below pad symmetrically.
struct ConvPadding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
  PadMode mode = PadMode::kZero;

  ConvPadding() = default;
  ConvPadding(std::size_t t, std::size_t b, std::size_t l, std::size_t r,
              PadMode m = PadMode::kZero)
      : top(t), bottom(b), left(l), right(r), mode(m) {}

  static ConvPadding symmetric(HW pad, PadMode mode = PadMode::kZero) {
    return {pad.first, pad.first, pad.second, pad.second, mode};
  }
};

/// 2-D cross-correlation of a (B, Cin, H, W) input with (Cout, Cin, kH, kW)
/// filters. Output extent per axis: floor((in + padBegin + padEnd - k)/stride) + 1.
/// Pass an empty tensor for no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, HW stride, const ConvPadding& padding);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, HW stride, HW padding,
                 PadMode mode = PadMode::kZero);

/// Transposed convolution (adjoint of conv2d w.r.t. its input) with
/// (Cin, Cout, kH, kW) filters. Output extent per axis:
/// (in - 1)*stride - 2*pad + k + output_padding; output_padding < stride.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, HW stride, HW padding,
                           HW output_padding);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add(const Tensor<T>& a, T b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, T b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> abs_val(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

/// Full reductions to a scalar tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Axis reductions; reduced axes are removed from the shape. The axes list
/// must be non-empty, sorted-unique after normalization, and in range.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes);

/// Same data, new shape (element count preserved); gradient passes through.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);

/// Value copy severed from the gradient graph.
template <typename T> Tensor<T> detach(const Tensor<T>& x);

/// Central-difference gradient of a pure scalar function:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) per element. Independent of the tape
/// machinery; the oracle the autodiff path is tested against.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& x, T step);

/// In-place N(mean, stddev) fill from the given engine, in element order.
template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937& rng, T mean, T stddev);
template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937& rng, T lo, T hi);

/// True when every value (not grad) is finite.
template <typename T> bool all_finite(const Tensor<T>& t);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace fgan
