#include "fgan/layers.hpp"

#include <cmath>
#include <memory>

namespace fgan {

namespace {

template <typename T>
std::vector<T>& ensure_grad(detail::TensorData<T>* n) {
  if (n->grad.empty()) n->grad.assign(n->values.size(), T(0));
  return n->grad;
}

}  // namespace

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha) {
  if (!std::isfinite(alpha)) throw NumericError("leaky_relu: slope must be finite");
  const std::size_t n = x.numel();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* px = x.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] >= T(0) ? px[i] : alpha * px[i];
  }
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh, alpha, n]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      const T* px = xh.values().data();
      T* gx = ensure_grad(xh.node()).data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += px[i] >= T(0) ? g[i] : alpha * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return leaky_relu(x, T(0));
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* px = x.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  }
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh, n]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      const T* py = oh.values().data();
      T* gx = ensure_grad(xh.node()).data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += (T(1) - py[i] * py[i]) * g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization. Both modes standardize disjoint element groups:
//   batch mode:    one group per channel, spanning (batch, h, w)
//   instance mode: one group per (sample, channel), spanning (h, w)
// Backward per group, with ghat = dL/dxhat:
//   dL/dx_i = (ghat_i - mean(ghat) - xhat_i * mean(ghat * xhat)) / sqrt(var + delta)
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct NormSaved {
  std::vector<T> xhat;      // standardized values
  std::vector<T> inv_std;   // per group
  std::size_t groups = 0, group_len = 0;
  std::size_t batch = 0, channels = 0;
};

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const NormState<T>& st, NormMode mode) {
  if (x.rank() != 4) {
    throw ShapeError("normalization: input must be 4-D, got " + shape_str(x.shape()));
  }
  if (!(st.delta > T(0))) throw NumericError("normalization: delta must be > 0");
  const std::size_t batch = x.extent(0), channels = x.extent(1);
  const std::size_t spatial = x.extent(2) * x.extent(3);
  if (st.affine() &&
      (st.gamma.numel() != channels || st.beta.numel() != channels)) {
    throw ShapeError("normalization: affine parameters must have one entry per channel (" +
                     std::to_string(channels) + "), got " + shape_str(st.gamma.shape()));
  }

  auto saved = std::make_shared<NormSaved<T>>();
  saved->batch = batch;
  saved->channels = channels;
  if (mode == NormMode::kInstance) {
    saved->groups = batch * channels;
    saved->group_len = spatial;
  } else {
    saved->groups = channels;
    saved->group_len = batch * spatial;
  }
  saved->xhat.resize(x.numel());
  saved->inv_std.resize(saved->groups);

  const T* px = x.values().data();
  const std::size_t plane = spatial;
  const T inv_len = T(1) / static_cast<T>(saved->group_len);

  // Gathers a group's element offsets: contiguous for instance mode, strided
  // across the batch for batch mode.
  auto for_group = [&](std::size_t gi, auto&& fn) {
    if (mode == NormMode::kInstance) {
      const std::size_t base = gi * plane;
      for (std::size_t i = 0; i < plane; ++i) fn(base + i);
    } else {
      const std::size_t c = gi;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) fn(base + i);
      }
    }
  };

  for (std::size_t gi = 0; gi < saved->groups; ++gi) {
    T mu = 0;
    for_group(gi, [&](std::size_t off) { mu += px[off]; });
    mu *= inv_len;
    T var = 0;
    for_group(gi, [&](std::size_t off) {
      const T dv = px[off] - mu;
      var += dv * dv;
    });
    var *= inv_len;
    const T inv_std = T(1) / std::sqrt(var + st.delta);
    saved->inv_std[gi] = inv_std;
    for_group(gi, [&](std::size_t off) { saved->xhat[off] = (px[off] - mu) * inv_std; });
  }

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  T* po = out.values().data();
  if (st.affine()) {
    const T* gamma = st.gamma.values().data();
    const T* beta = st.beta.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          po[base + i] = gamma[c] * saved->xhat[base + i] + beta[c];
      }
    }
  } else {
    for (std::size_t i = 0; i < x.numel(); ++i) po[i] = saved->xhat[i];
  }

  const bool needs_grad = x.requires_grad() ||
                          (st.affine() && (st.gamma.requires_grad() || st.beta.requires_grad()));
  if (taping() && needs_grad) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out, gamma_h = st.gamma, beta_h = st.beta;
    const bool instance = mode == NormMode::kInstance;
    GradientTape::active()->record([xh, oh, gamma_h, beta_h, saved, instance, plane,
                                    inv_len]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      const std::size_t batch = saved->batch, channels = saved->channels;
      const bool affine = gamma_h.defined();
      const T* gamma = affine ? gamma_h.values().data() : nullptr;

      if (affine && gamma_h.requires_grad()) {
        T* gg = ensure_grad(gamma_h.node()).data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * plane;
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += g[base + i] * saved->xhat[base + i];
            gg[c] += acc;
          }
      }
      if (affine && beta_h.requires_grad()) {
        T* gb = ensure_grad(beta_h.node()).data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * plane;
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += g[base + i];
            gb[c] += acc;
          }
      }
      if (!xh.requires_grad()) return;

      T* gx = ensure_grad(xh.node()).data();
      auto for_group = [&](std::size_t gi, auto&& fn) {
        if (instance) {
          const std::size_t base = gi * plane;
          for (std::size_t i = 0; i < plane; ++i) fn(base + i);
        } else {
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + gi) * plane;
            for (std::size_t i = 0; i < plane; ++i) fn(base + i);
          }
        }
      };
      auto channel_of = [&](std::size_t gi) { return instance ? gi % channels : gi; };

      for (std::size_t gi = 0; gi < saved->groups; ++gi) {
        const T gscale = affine ? gamma[channel_of(gi)] : T(1);
        T sum_g = 0, sum_gx = 0;
        for_group(gi, [&](std::size_t off) {
          const T gh = g[off] * gscale;
          sum_g += gh;
          sum_gx += gh * saved->xhat[off];
        });
        const T mg = sum_g * inv_len;
        const T mgx = sum_gx * inv_len;
        const T istd = saved->inv_std[gi];
        for_group(gi, [&](std::size_t off) {
          const T gh = g[off] * gscale;
          gx[off] += (gh - mg - saved->xhat[off] * mgx) * istd;
        });
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const NormState<T>& state) {
  if (state.mode != NormMode::kBatch) {
    throw ConfigError("batch_norm: state mode is not batch");
  }
  return norm_forward(x, state, NormMode::kBatch);
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const NormState<T>& state) {
  if (state.mode != NormMode::kInstance) {
    throw ConfigError("instance_norm: state mode is not instance");
  }
  return norm_forward(x, state, NormMode::kInstance);
}

template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const ResidualBlockParams<T>& params) {
  if (x.rank() != 4) {
    throw ShapeError("residual_block: input must be 4-D, got " + shape_str(x.shape()));
  }
  if (x.extent(1) != params.channels) {
    throw ShapeError("residual_block: channel axis 1 mismatch: input has " +
                     std::to_string(x.extent(1)) + " channels, block expects " +
                     std::to_string(params.channels));
  }
  const ConvPadding pad = ConvPadding::symmetric({1, 1}, PadMode::kReflect);
  Tensor<T> h = conv2d(x, params.conv1_weight, params.conv1_bias, {1, 1}, pad);
  h = instance_norm(h, params.norm1);
  h = relu(h);
  h = conv2d(h, params.conv2_weight, params.conv2_bias, {1, 1}, pad);
  h = instance_norm(h, params.norm2);
  return add(x, h);
}

#define FGAN_INSTANTIATE_LAYERS(T)                                              \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                        \
  template Tensor<T> relu<T>(const Tensor<T>&);                                 \
  template Tensor<T> tanh_act<T>(const Tensor<T>&);                            \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const NormState<T>&);      \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, const NormState<T>&);   \
  template Tensor<T> residual_block<T>(const Tensor<T>&,                        \
                                       const ResidualBlockParams<T>&);

FGAN_INSTANTIATE_LAYERS(float)
FGAN_INSTANTIATE_LAYERS(double)

#undef FGAN_INSTANTIATE_LAYERS

}  // namespace fgan
