#include "fgan/optim.hpp"

#include <cmath>

namespace fgan {

namespace {

template <typename T>
void check_gradient(const Parameter<T>& p) {
  if (!p.value.has_grad()) {
    throw NumericError("optimizer: parameter '" + p.name + "' has no gradient");
  }
  for (T g : p.value.grad_view()) {
    if (!std::isfinite(g)) {
      throw NumericError("optimizer: non-finite gradient in parameter '" + p.name + "'");
    }
  }
}

}  // namespace

template <typename T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state) {
  if (!(state.beta1 >= T(0) && state.beta1 < T(1)) ||
      !(state.beta2 >= T(0) && state.beta2 < T(1))) {
    throw ConfigError("adam: decay rates must lie in [0, 1)");
  }
  if (state.first_moment.empty()) {
    state.first_moment.reserve(params.size());
    state.second_moment.reserve(params.size());
    for (const auto& p : params) {
      state.first_moment.push_back(Tensor<T>::zeros(p.value.shape()));
      state.second_moment.push_back(Tensor<T>::zeros(p.value.shape()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("adam: state holds " + std::to_string(state.first_moment.size()) +
                      " moment pairs but " + std::to_string(params.size()) +
                      " parameters were given");
  }
  for (const auto& p : params) check_gradient(p);

  state.step_count += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T corr1 = T(1) - std::pow(b1, static_cast<T>(state.step_count));
  const T corr2 = T(1) - std::pow(b2, static_cast<T>(state.step_count));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (state.first_moment[pi].shape() != p.value.shape()) {
      throw ShapeError("adam: moment shape " + shape_str(state.first_moment[pi].shape()) +
                       " does not match parameter '" + p.name + "' " +
                       shape_str(p.value.shape()));
    }
    auto vals = p.value.values();
    auto grad = p.value.grad_view();
    auto v = state.first_moment[pi].values();
    auto s = state.second_moment[pi].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T g = grad[i];
      v[i] = b1 * v[i] + (T(1) - b1) * g;
      s[i] = b2 * s[i] + (T(1) - b2) * g * g;
      const T v_hat = v[i] / corr1;
      const T s_hat = s[i] / corr2;
      vals[i] -= state.lr * v_hat / std::sqrt(s_hat + state.delta);
    }
  }
}

template <typename T>
void sgd_step(std::span<Parameter<T>> params, T lr) {
  for (const auto& p : params) check_gradient(p);
  for (auto& p : params) {
    auto vals = p.value.values();
    auto grad = p.value.grad_view();
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * grad[i];
  }
}

template void adam_step<float>(std::span<Parameter<float>>, AdamState<float>&);
template void adam_step<double>(std::span<Parameter<double>>, AdamState<double>&);
template void sgd_step<float>(std::span<Parameter<float>>, float);
template void sgd_step<double>(std::span<Parameter<double>>, double);

}  // namespace fgan
