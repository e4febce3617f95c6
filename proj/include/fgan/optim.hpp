#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fgan/tensor.hpp"

namespace fgan {

/// A named trainable tensor. The handle aliases the owning graph's storage,
/// so optimizer updates through it are visible to the model.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Adam state shared by one parameter collection: first/second moment tensors
/// per parameter plus a single step counter, incremented once per step.
template <typename T>
struct AdamState {
  T lr = T(0.000364);
  T beta1 = T(0.5032);
  T beta2 = T(0.999);
  T delta = T(1e-8);
  std::uint64_t step_count = 0;
  std::vector<Tensor<T>> first_moment;   // v, zero-initialized lazily
  std::vector<Tensor<T>> second_moment;  // s

  static AdamState with(T lr, T beta1, T beta2, T delta = T(1e-8)) {
    AdamState st;
    st.lr = lr;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.delta = delta;
    return st;
  }
};

/// One Adam update over the collection, reading each parameter's accumulated
/// gradient:
///   v <- b1*v + (1-b1)*g          s <- b2*s + (1-b2)*g^2
///   v' = v/(1-b1^t)               s' = s/(1-b2^t)
///   p <- p - lr * v' / sqrt(s' + delta)
/// Gradients must be present and finite; moment tensors are created on the
/// first step and must keep matching the parameter list afterwards.
template <typename T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state);

/// Plain descent baseline: p <- p - lr * g. Same gradient requirements.
template <typename T>
void sgd_step(std::span<Parameter<T>> params, T lr);

extern template void adam_step<float>(std::span<Parameter<float>>, AdamState<float>&);
extern template void adam_step<double>(std::span<Parameter<double>>, AdamState<double>&);
extern template void sgd_step<float>(std::span<Parameter<float>>, float);
extern template void sgd_step<double>(std::span<Parameter<double>>, double);

}  // namespace fgan
