#pragma once

#include "fgan/tensor.hpp"

namespace fgan {

/// y = x for x >= 0, y = alpha * x for x < 0.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha);

/// leaky_relu with slope 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Elementwise tanh; output strictly inside (-1, 1).
template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x);

enum class NormMode { kBatch, kInstance };

/// Normalization layer state. With affine disabled the layer applies the
/// raw standardization (gamma = 1, beta = 0 fixed); with affine enabled
/// gamma/beta are per-channel trainable tensors.
template <typename T>
struct NormState {
  NormMode mode = NormMode::kInstance;
  T delta = T(1e-5);   // variance stabilizer, > 0
  Tensor<T> gamma;     // per-channel scale, empty when affine is off
  Tensor<T> beta;      // per-channel shift, empty when affine is off

  bool affine() const { return gamma.defined(); }

  static NormState instance(T delta = T(1e-5)) { return {NormMode::kInstance, delta, {}, {}}; }
  static NormState batch(T delta = T(1e-5)) { return {NormMode::kBatch, delta, {}, {}}; }
  static NormState instance_affine(std::size_t channels, T delta = T(1e-5)) {
    return {NormMode::kInstance, delta, Tensor<T>::filled({channels}, T(1), true),
            Tensor<T>::zeros({channels}, true)};
  }
  static NormState batch_affine(std::size_t channels, T delta = T(1e-5)) {
    return {NormMode::kBatch, delta, Tensor<T>::filled({channels}, T(1), true),
            Tensor<T>::zeros({channels}, true)};
  }
};

/// Per-channel standardization over (batch, height, width) with biased (1/n)
/// variance: xhat = (x - mu) / sqrt(var + delta); y = gamma * xhat + beta.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const NormState<T>& state);

/// Per-(sample, channel) standardization over the spatial grid only; never
/// mixes samples within a batch.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const NormState<T>& state);

/// Two 3x3 stride-1 convolutions, each followed by instance normalization,
/// with ReLU between them; the input is added back through an identity skip.
template <typename T>
struct ResidualBlockParams {
  std::size_t channels = 0;
  Tensor<T> conv1_weight, conv1_bias;
  Tensor<T> conv2_weight, conv2_bias;
  NormState<T> norm1, norm2;

  static ResidualBlockParams zeros(std::size_t channels, T delta = T(1e-5)) {
    ResidualBlockParams p;
    p.channels = channels;
    p.conv1_weight = Tensor<T>::zeros({channels, channels, 3, 3}, true);
    p.conv1_bias = Tensor<T>::zeros({channels}, true);
    p.conv2_weight = Tensor<T>::zeros({channels, channels, 3, 3}, true);
    p.conv2_bias = Tensor<T>::zeros({channels}, true);
    p.norm1 = NormState<T>::instance(delta);
    p.norm2 = NormState<T>::instance(delta);
    return p;
  }
};

/// output = x + norm2(conv2(relu(norm1(conv1(x))))), shape preserved.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const ResidualBlockParams<T>& params);

}  // namespace fgan
