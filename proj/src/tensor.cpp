#include "fgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace fgan {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("shape " + shape_str(shape) + " has a zero extent");
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

namespace {

thread_local GradientTape* g_active_tape = nullptr;

template <typename T>
std::vector<T>& ensure_grad(detail::TensorData<T>* n) {
  if (n->grad.empty()) n->grad.assign(n->values.size(), T(0));
  return n->grad;
}

constexpr std::size_t kLanes = 8;

/// Fixed-order lane accumulator: vectorizable yet bit-deterministic.
template <typename T>
struct LaneSum {
  T lane[kLanes] = {};
  void tail(std::size_t i, T v) { lane[i & (kLanes - 1)] += v; }
  T total() const {
    T s = 0;
    for (std::size_t l = 0; l < kLanes; ++l) s += lane[l];
    return s;
  }
};

}  // namespace

GradientTape* GradientTape::active() { return g_active_tape; }

bool taping() {
  return g_active_tape != nullptr && !g_active_tape->consumed();
}

TapeScope::TapeScope(GradientTape& tape) {
  previous_ = g_active_tape;
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

namespace {

// Per padded index: source index within the unpadded axis, or -1 for zero.
std::vector<std::ptrdiff_t> pad_axis_map(std::size_t n, std::size_t before,
                                         std::size_t after, PadMode mode,
                                         const char* axis_name) {
  if (mode == PadMode::kReflect && (before >= n || after >= n)) {
    throw ShapeError(std::string("reflect padding ") +
                     std::to_string(std::max(before, after)) + " >= extent " +
                     std::to_string(n) + " on axis " + axis_name);
  }
  std::vector<std::ptrdiff_t> map(n + before + after);
  for (std::size_t p = 0; p < map.size(); ++p) {
    std::ptrdiff_t s = static_cast<std::ptrdiff_t>(p) - static_cast<std::ptrdiff_t>(before);
    if (mode == PadMode::kZero) {
      map[p] = (s >= 0 && s < static_cast<std::ptrdiff_t>(n)) ? s : -1;
    } else {
      // Mirror without repeating the border pixel.
      while (s < 0 || s >= static_cast<std::ptrdiff_t>(n)) {
        if (s < 0) s = -s;
        if (s >= static_cast<std::ptrdiff_t>(n)) s = 2 * static_cast<std::ptrdiff_t>(n) - 2 - s;
      }
      map[p] = s;
    }
  }
  return map;
}

struct ConvDims {
  std::size_t batch, cin, cout, in_h, in_w, k_h, k_w;
  std::size_t stride_h, stride_w;
  std::size_t pad_h, pad_w;  // padded extents
  std::size_t out_h, out_w;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& weight,
                   const Tensor<T>& bias, HW stride, const ConvPadding& pad) {
  if (input.rank() != 4) {
    throw ShapeError("conv2d: input must be 4-D (batch x channels x h x w), got " +
                     shape_str(input.shape()));
  }
  if (weight.rank() != 4) {
    throw ShapeError("conv2d: weight must be 4-D (out x in x kH x kW), got " +
                     shape_str(weight.shape()));
  }
  ConvDims d;
  d.batch = input.extent(0);
  d.cin = input.extent(1);
  d.in_h = input.extent(2);
  d.in_w = input.extent(3);
  d.cout = weight.extent(0);
  d.k_h = weight.extent(2);
  d.k_w = weight.extent(3);
  if (weight.extent(1) != d.cin) {
    throw ShapeError("conv2d: channel axis 1 mismatch: input has " +
                     std::to_string(d.cin) + ", weight expects " +
                     std::to_string(weight.extent(1)));
  }
  if (stride.first == 0 || stride.second == 0) {
    throw ShapeError("conv2d: stride must be positive");
  }
  d.stride_h = stride.first;
  d.stride_w = stride.second;
  d.pad_h = d.in_h + pad.top + pad.bottom;
  d.pad_w = d.in_w + pad.left + pad.right;
  if (d.pad_h < d.k_h) {
    throw ShapeError("conv2d: padded height " + std::to_string(d.pad_h) +
                     " < kernel height " + std::to_string(d.k_h) + " (axis 2)");
  }
  if (d.pad_w < d.k_w) {
    throw ShapeError("conv2d: padded width " + std::to_string(d.pad_w) +
                     " < kernel width " + std::to_string(d.k_w) + " (axis 3)");
  }
  d.out_h = (d.pad_h - d.k_h) / d.stride_h + 1;
  d.out_w = (d.pad_w - d.k_w) / d.stride_w + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != d.cout)) {
    throw ShapeError("conv2d: bias must be 1-D of " + std::to_string(d.cout) +
                     " channels, got " + shape_str(bias.shape()));
  }
  return d;
}

// Gathers the padded image plane stack (batch*channels contiguous planes).
template <typename T>
std::shared_ptr<std::vector<T>> pad_planes(std::span<const T> src, std::size_t planes,
                                           std::size_t h, std::size_t w,
                                           const std::vector<std::ptrdiff_t>& map_h,
                                           const std::vector<std::ptrdiff_t>& map_w) {
  const std::size_t ph = map_h.size(), pw = map_w.size();
  auto out = std::make_shared<std::vector<T>>(planes * ph * pw, T(0));
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = src.data() + pl * h * w;
    T* dst = out->data() + pl * ph * pw;
    for (std::size_t r = 0; r < ph; ++r) {
      const std::ptrdiff_t sr = map_h[r];
      T* row = dst + r * pw;
      if (sr < 0) continue;  // stays zero
      const T* srow = s + static_cast<std::size_t>(sr) * w;
      for (std::size_t c = 0; c < pw; ++c) {
        const std::ptrdiff_t sc = map_w[c];
        row[c] = (sc < 0) ? T(0) : srow[static_cast<std::size_t>(sc)];
      }
    }
  }
  return out;
}

// Adjoint of pad_planes: folds a padded-plane gradient back onto the source.
template <typename T>
void unpad_accumulate(std::span<T> dst, const std::vector<T>& padded, std::size_t planes,
                      std::size_t h, std::size_t w,
                      const std::vector<std::ptrdiff_t>& map_h,
                      const std::vector<std::ptrdiff_t>& map_w) {
  const std::size_t ph = map_h.size(), pw = map_w.size();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    T* d = dst.data() + pl * h * w;
    const T* g = padded.data() + pl * ph * pw;
    for (std::size_t r = 0; r < ph; ++r) {
      const std::ptrdiff_t sr = map_h[r];
      if (sr < 0) continue;
      T* drow = d + static_cast<std::size_t>(sr) * w;
      const T* grow = g + r * pw;
      for (std::size_t c = 0; c < pw; ++c) {
        const std::ptrdiff_t sc = map_w[c];
        if (sc >= 0) drow[static_cast<std::size_t>(sc)] += grow[c];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void conv2d_forward_kernel(const ConvDims& d, const T* pad_in, const T* w,
                           const T* bias, T* out) {
  const std::size_t pw = d.pad_w, ow_n = d.out_w, oh_n = d.out_h;
  for (std::size_t b = 0; b < d.batch; ++b) {
    T* ob = out + b * d.cout * oh_n * ow_n;
    for (std::size_t oc = 0; oc < d.cout; ++oc) {
      const T bv = bias ? bias[oc] : T(0);
      std::fill(ob + oc * oh_n * ow_n, ob + (oc + 1) * oh_n * ow_n, bv);
    }
    const T* ib = pad_in + b * d.cin * d.pad_h * pw;
    for (std::size_t ic = 0; ic < d.cin; ++ic) {
      const T* plane = ib + ic * d.pad_h * pw;
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* wk = w + (oc * d.cin + ic) * d.k_h * d.k_w;
        T* oplane = ob + oc * oh_n * ow_n;
        for (std::size_t kh = 0; kh < d.k_h; ++kh) {
          for (std::size_t kw = 0; kw < d.k_w; ++kw) {
            const T wv = wk[kh * d.k_w + kw];
            for (std::size_t oh = 0; oh < oh_n; ++oh) {
              const T* src = plane + (oh * d.stride_h + kh) * pw + kw;
              T* dst = oplane + oh * ow_n;
              if (d.stride_w == 1) {
                for (std::size_t ow = 0; ow < ow_n; ++ow) dst[ow] += wv * src[ow];
              } else {
                for (std::size_t ow = 0; ow < ow_n; ++ow)
                  dst[ow] += wv * src[ow * d.stride_w];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_kernel(const ConvDims& d, const T* pad_in, const T* w,
                            const T* gout, T* gpad_in, T* gw, T* gbias) {
  const std::size_t pw = d.pad_w, ow_n = d.out_w, oh_n = d.out_h;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* gb = gout + b * d.cout * oh_n * ow_n;
    if (gbias) {
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* g = gb + oc * oh_n * ow_n;
        LaneSum<T> acc;
        std::size_t i = 0, n = oh_n * ow_n;
        for (; i + kLanes <= n; i += kLanes)
          for (std::size_t l = 0; l < kLanes; ++l) acc.lane[l] += g[i + l];
        for (; i < n; ++i) acc.tail(i, g[i]);
        gbias[oc] += acc.total();
      }
    }
    const T* ib = pad_in + b * d.cin * d.pad_h * pw;
    T* gib = gpad_in ? gpad_in + b * d.cin * d.pad_h * pw : nullptr;
    for (std::size_t ic = 0; ic < d.cin; ++ic) {
      const T* plane = ib + ic * d.pad_h * pw;
      T* gplane = gib ? gib + ic * d.pad_h * pw : nullptr;
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* g = gb + oc * oh_n * ow_n;
        const T* wk = w + (oc * d.cin + ic) * d.k_h * d.k_w;
        T* gwk = gw ? gw + (oc * d.cin + ic) * d.k_h * d.k_w : nullptr;
        for (std::size_t kh = 0; kh < d.k_h; ++kh) {
          for (std::size_t kw = 0; kw < d.k_w; ++kw) {
            if (gwk) {
              LaneSum<T> acc;
              for (std::size_t oh = 0; oh < oh_n; ++oh) {
                const T* src = plane + (oh * d.stride_h + kh) * pw + kw;
                const T* gr = g + oh * ow_n;
                std::size_t ow = 0;
                if (d.stride_w == 1) {
                  for (; ow + kLanes <= ow_n; ow += kLanes)
                    for (std::size_t l = 0; l < kLanes; ++l)
                      acc.lane[l] += src[ow + l] * gr[ow + l];
                  for (; ow < ow_n; ++ow) acc.tail(ow, src[ow] * gr[ow]);
                } else {
                  for (; ow < ow_n; ++ow)
                    acc.tail(ow, src[ow * d.stride_w] * gr[ow]);
                }
              }
              gwk[kh * d.k_w + kw] += acc.total();
            }
            if (gplane) {
              const T wv = wk[kh * d.k_w + kw];
              for (std::size_t oh = 0; oh < oh_n; ++oh) {
                T* gdst = gplane + (oh * d.stride_h + kh) * pw + kw;
                const T* gr = g + oh * ow_n;
                if (d.stride_w == 1) {
                  for (std::size_t ow = 0; ow < ow_n; ++ow) gdst[ow] += wv * gr[ow];
                } else {
                  for (std::size_t ow = 0; ow < ow_n; ++ow)
                    gdst[ow * d.stride_w] += wv * gr[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, HW stride, const ConvPadding& padding) {
  const ConvDims d = conv_dims(input, weight, bias, stride, padding);
  auto map_h = pad_axis_map(d.in_h, padding.top, padding.bottom, padding.mode, "2 (height)");
  auto map_w = pad_axis_map(d.in_w, padding.left, padding.right, padding.mode, "3 (width)");
  auto padded = pad_planes<T>(input.values(), d.batch * d.cin, d.in_h, d.in_w, map_h, map_w);

  Tensor<T> out = Tensor<T>::zeros({d.batch, d.cout, d.out_h, d.out_w});
  conv2d_forward_kernel(d, padded->data(), weight.values().data(),
                        bias.defined() ? bias.values().data() : nullptr,
                        out.values().data());

  const bool needs_grad =
      input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  if (taping() && needs_grad) {
    out.set_requires_grad(true);
    auto* tape = GradientTape::active();
    Tensor<T> in_h_ = input, w_h = weight, b_h = bias, out_h_ = out;
    tape->record([d, map_h, map_w, padded, in_h_, w_h, b_h, out_h_]() mutable {
      if (!out_h_.has_grad()) return;
      const T* g = out_h_.grad_view().data();
      std::vector<T> gpad;
      T* gpad_ptr = nullptr;
      if (in_h_.requires_grad()) {
        gpad.assign(padded->size(), T(0));
        gpad_ptr = gpad.data();
      }
      T* gw = w_h.requires_grad() ? ensure_grad(w_h.node()).data() : nullptr;
      T* gb = (b_h.defined() && b_h.requires_grad()) ? ensure_grad(b_h.node()).data() : nullptr;
      conv2d_backward_kernel(d, padded->data(), w_h.values().data(), g, gpad_ptr, gw, gb);
      if (gpad_ptr) {
        ensure_grad(in_h_.node());
        unpad_accumulate<T>(in_h_.grad(), gpad, d.batch * d.cin, d.in_h, d.in_w, map_h, map_w);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, HW stride, HW padding, PadMode mode) {
  return conv2d(input, weight, bias, stride, ConvPadding::symmetric(padding, mode));
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

namespace {

struct ConvTDims {
  std::size_t batch, cin, cout, in_h, in_w, k_h, k_w;
  std::size_t stride_h, stride_w, pad_h, pad_w, opad_h, opad_w;
  std::size_t out_h, out_w;
};

template <typename T>
ConvTDims convt_dims(const Tensor<T>& input, const Tensor<T>& weight,
                     const Tensor<T>& bias, HW stride, HW padding, HW opad) {
  if (input.rank() != 4) {
    throw ShapeError("conv_transpose2d: input must be 4-D, got " + shape_str(input.shape()));
  }
  if (weight.rank() != 4) {
    throw ShapeError("conv_transpose2d: weight must be 4-D (in x out x kH x kW), got " +
                     shape_str(weight.shape()));
  }
  ConvTDims d;
  d.batch = input.extent(0);
  d.cin = input.extent(1);
  d.in_h = input.extent(2);
  d.in_w = input.extent(3);
  if (weight.extent(0) != d.cin) {
    throw ShapeError("conv_transpose2d: channel axis 1 mismatch: input has " +
                     std::to_string(d.cin) + ", weight expects " +
                     std::to_string(weight.extent(0)));
  }
  d.cout = weight.extent(1);
  d.k_h = weight.extent(2);
  d.k_w = weight.extent(3);
  d.stride_h = stride.first;
  d.stride_w = stride.second;
  if (d.stride_h == 0 || d.stride_w == 0) {
    throw ShapeError("conv_transpose2d: stride must be positive");
  }
  d.pad_h = padding.first;
  d.pad_w = padding.second;
  d.opad_h = opad.first;
  d.opad_w = opad.second;
  if (d.opad_h >= d.stride_h || d.opad_w >= d.stride_w) {
    throw ShapeError("conv_transpose2d: output_padding (" + std::to_string(d.opad_h) +
                     "," + std::to_string(d.opad_w) + ") must be < stride (" +
                     std::to_string(d.stride_h) + "," + std::to_string(d.stride_w) + ")");
  }
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((d.in_h - 1) * d.stride_h + d.k_h + d.opad_h) -
                            2 * static_cast<std::ptrdiff_t>(d.pad_h);
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((d.in_w - 1) * d.stride_w + d.k_w + d.opad_w) -
                            2 * static_cast<std::ptrdiff_t>(d.pad_w);
  if (oh < 1) throw ShapeError("conv_transpose2d: non-positive output height (axis 2)");
  if (ow < 1) throw ShapeError("conv_transpose2d: non-positive output width (axis 3)");
  d.out_h = static_cast<std::size_t>(oh);
  d.out_w = static_cast<std::size_t>(ow);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != d.cout)) {
    throw ShapeError("conv_transpose2d: bias must be 1-D of " + std::to_string(d.cout) +
                     " channels, got " + shape_str(bias.shape()));
  }
  return d;
}

// Index range of the source axis whose scattered positions land in-bounds.
inline void scatter_range(std::size_t n, std::size_t stride, std::ptrdiff_t offset,
                          std::size_t bound, std::size_t& lo, std::size_t& hi) {
  // want 0 <= i*stride + offset < bound, i in [0, n)
  std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t last_excl =
      (static_cast<std::ptrdiff_t>(bound) - offset + s - 1) / s;  // ceil((bound-offset)/s)
  if (last_excl > static_cast<std::ptrdiff_t>(n)) last_excl = static_cast<std::ptrdiff_t>(n);
  if (first < 0) first = 0;
  if (last_excl < first) last_excl = first;
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(last_excl);
}

template <typename T>
void convt_forward_kernel(const ConvTDims& d, const T* in, const T* w, const T* bias,
                          T* out) {
  const std::size_t ohn = d.out_h, own = d.out_w;
  for (std::size_t b = 0; b < d.batch; ++b) {
    T* ob = out + b * d.cout * ohn * own;
    for (std::size_t oc = 0; oc < d.cout; ++oc) {
      const T bv = bias ? bias[oc] : T(0);
      std::fill(ob + oc * ohn * own, ob + (oc + 1) * ohn * own, bv);
    }
    const T* ib = in + b * d.cin * d.in_h * d.in_w;
    for (std::size_t ic = 0; ic < d.cin; ++ic) {
      const T* plane = ib + ic * d.in_h * d.in_w;
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* wk = w + (ic * d.cout + oc) * d.k_h * d.k_w;
        T* oplane = ob + oc * ohn * own;
        for (std::size_t kh = 0; kh < d.k_h; ++kh) {
          const std::ptrdiff_t oh_off =
              static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.pad_h);
          std::size_t ih_lo, ih_hi;
          scatter_range(d.in_h, d.stride_h, oh_off, ohn, ih_lo, ih_hi);
          for (std::size_t kw = 0; kw < d.k_w; ++kw) {
            const std::ptrdiff_t ow_off =
                static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pad_w);
            std::size_t iw_lo, iw_hi;
            scatter_range(d.in_w, d.stride_w, ow_off, own, iw_lo, iw_hi);
            const T wv = wk[kh * d.k_w + kw];
            for (std::size_t ih = ih_lo; ih < ih_hi; ++ih) {
              const std::size_t oh_idx =
                  static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ih * d.stride_h) + oh_off);
              const T* src = plane + ih * d.in_w;
              T* dst = oplane + oh_idx * own;
              if (d.stride_w == 1) {
                T* dd = dst + static_cast<std::ptrdiff_t>(iw_lo) + ow_off;
                for (std::size_t iw = iw_lo; iw < iw_hi; ++iw)
                  dd[iw - iw_lo] += wv * src[iw];
              } else {
                for (std::size_t iw = iw_lo; iw < iw_hi; ++iw)
                  dst[static_cast<std::size_t>(
                      static_cast<std::ptrdiff_t>(iw * d.stride_w) + ow_off)] += wv * src[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void convt_backward_kernel(const ConvTDims& d, const T* in, const T* w, const T* gout,
                           T* gin, T* gw, T* gbias) {
  const std::size_t ohn = d.out_h, own = d.out_w;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* gb = gout + b * d.cout * ohn * own;
    if (gbias) {
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* g = gb + oc * ohn * own;
        LaneSum<T> acc;
        std::size_t i = 0, n = ohn * own;
        for (; i + kLanes <= n; i += kLanes)
          for (std::size_t l = 0; l < kLanes; ++l) acc.lane[l] += g[i + l];
        for (; i < n; ++i) acc.tail(i, g[i]);
        gbias[oc] += acc.total();
      }
    }
    const T* ib = in + b * d.cin * d.in_h * d.in_w;
    T* gib = gin ? gin + b * d.cin * d.in_h * d.in_w : nullptr;
    for (std::size_t ic = 0; ic < d.cin; ++ic) {
      const T* plane = ib + ic * d.in_h * d.in_w;
      T* gplane = gib ? gib + ic * d.in_h * d.in_w : nullptr;
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const T* g = gb + oc * ohn * own;
        const T* wk = w + (ic * d.cout + oc) * d.k_h * d.k_w;
        T* gwk = gw ? gw + (ic * d.cout + oc) * d.k_h * d.k_w : nullptr;
        for (std::size_t kh = 0; kh < d.k_h; ++kh) {
          const std::ptrdiff_t oh_off =
              static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.pad_h);
          std::size_t ih_lo, ih_hi;
          scatter_range(d.in_h, d.stride_h, oh_off, ohn, ih_lo, ih_hi);
          for (std::size_t kw = 0; kw < d.k_w; ++kw) {
            const std::ptrdiff_t ow_off =
                static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pad_w);
            std::size_t iw_lo, iw_hi;
            scatter_range(d.in_w, d.stride_w, ow_off, own, iw_lo, iw_hi);
            const T wv = wk[kh * d.k_w + kw];
            LaneSum<T> acc;
            for (std::size_t ih = ih_lo; ih < ih_hi; ++ih) {
              const std::size_t oh_idx =
                  static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ih * d.stride_h) + oh_off);
              const T* grow = g + oh_idx * own;
              const T* src = plane + ih * d.in_w;
              T* gsrc = gplane ? gplane + ih * d.in_w : nullptr;
              if (d.stride_w == 1) {
                const T* gg = grow + static_cast<std::ptrdiff_t>(iw_lo) + ow_off;
                const std::size_t n = iw_hi - iw_lo;
                if (gsrc) {
                  T* gd = gsrc + iw_lo;
                  for (std::size_t i = 0; i < n; ++i) gd[i] += wv * gg[i];
                }
                if (gwk) {
                  const T* ss = src + iw_lo;
                  std::size_t i = 0;
                  for (; i + kLanes <= n; i += kLanes)
                    for (std::size_t l = 0; l < kLanes; ++l)
                      acc.lane[l] += ss[i + l] * gg[i + l];
                  for (; i < n; ++i) acc.tail(i, ss[i] * gg[i]);
                }
              } else {
                for (std::size_t iw = iw_lo; iw < iw_hi; ++iw) {
                  const std::size_t ow_idx = static_cast<std::size_t>(
                      static_cast<std::ptrdiff_t>(iw * d.stride_w) + ow_off);
                  if (gsrc) gsrc[iw] += wv * grow[ow_idx];
                  if (gwk) acc.tail(iw, src[iw] * grow[ow_idx]);
                }
              }
            }
            if (gwk) gwk[kh * d.k_w + kw] += acc.total();
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, HW stride, HW padding,
                           HW output_padding) {
  const ConvTDims d = convt_dims(input, weight, bias, stride, padding, output_padding);
  Tensor<T> out = Tensor<T>::zeros({d.batch, d.cout, d.out_h, d.out_w});
  convt_forward_kernel(d, input.values().data(), weight.values().data(),
                       bias.defined() ? bias.values().data() : nullptr,
                       out.values().data());

  const bool needs_grad =
      input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  if (taping() && needs_grad) {
    out.set_requires_grad(true);
    Tensor<T> in_h_ = input, w_h = weight, b_h = bias, out_h_ = out;
    GradientTape::active()->record([d, in_h_, w_h, b_h, out_h_]() mutable {
      if (!out_h_.has_grad()) return;
      const T* g = out_h_.grad_view().data();
      T* gin = in_h_.requires_grad() ? ensure_grad(in_h_.node()).data() : nullptr;
      T* gw = w_h.requires_grad() ? ensure_grad(w_h.node()).data() : nullptr;
      T* gb = (b_h.defined() && b_h.requires_grad()) ? ensure_grad(b_h.node()).data() : nullptr;
      convt_backward_kernel(d, in_h_.values().data(), w_h.values().data(), g, gin, gw, gb);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

// Builds the output of a binary elementwise op and wires its backward step.
// dfa/dfb map (a_i, b_i, g_i) -> gradient contribution for a / b.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                    Da dfa, Db dfb) {
  check_same_shape(a, b, name);
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  {
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  }
  if (taping() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ah = a, bh = b, oh = out;
    GradientTape::active()->record([ah, bh, oh, dfa, dfb, n]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      const T* pa = ah.values().data();
      const T* pb = bh.values().data();
      if (ah.requires_grad()) {
        T* ga = ensure_grad(ah.node()).data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += dfa(pa[i], pb[i], g[i]);
      }
      if (bh.requires_grad()) {
        T* gb = ensure_grad(bh.node()).data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += dfb(pa[i], pb[i], g[i]);
      }
    });
  }
  return out;
}

template <typename T, typename Fwd, typename Da>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Da dfa) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  {
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  }
  if (taping() && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ah = a, oh = out;
    GradientTape::active()->record([ah, oh, dfa, n]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      const T* pa = ah.values().data();
      T* ga = ensure_grad(ah.node()).data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += dfa(pa[i], g[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T g) { return y * g; }, [](T x, T, T g) { return x * g; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T b) {
  return unary_op<T>(a, [b](T x) { return x + b; }, [](T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T b) {
  return unary_op<T>(a, [b](T x) { return x - b; }, [](T, T g) { return g; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary_op<T>(a, [s](T x) { return s * x; }, [s](T, T g) { return s * g; });
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& a) {
  return unary_op<T>(
      a, [](T x) { return std::abs(x); },
      [](T x, T g) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op<T>(a, [](T x) { return x * x; },
                     [](T x, T g) { return T(2) * x * g; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const T* p = x.values().data();
  const std::size_t n = x.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += p[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh, n]() mutable {
      if (!oh.has_grad()) return;
      const T g = oh.grad_view()[0];
      T* gx = ensure_grad(xh.node()).data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T* p = x.values().data();
  const std::size_t n = x.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += p[i];
  const T inv = T(1) / static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(s * inv);
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh, n, inv]() mutable {
      if (!oh.has_grad()) return;
      const T g = oh.grad_view()[0] * inv;
      T* gx = ensure_grad(xh.node()).data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

namespace {

struct AxisReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index_of;  // per input element
  std::size_t count = 1;                  // reduced element count
};

AxisReducePlan axis_reduce_plan(const Shape& shape, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError("reduce: empty axis list");
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= shape.size()) {
      throw ShapeError("reduce: axis " + std::to_string(axes[i]) + " out of range for " +
                       shape_str(shape));
    }
    if (i && axes[i] == axes[i - 1]) {
      throw ShapeError("reduce: duplicate axis " + std::to_string(axes[i]));
    }
  }
  AxisReducePlan plan;
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t a : axes) {
    reduced[a] = true;
    plan.count *= shape[a];
  }
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (!reduced[a]) plan.out_shape.push_back(shape[a]);
  }
  const std::size_t n = numel_of(shape);
  plan.out_index_of.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < shape.size(); ++a) {
      if (!reduced[a]) off = off * shape[a] + idx[a];
    }
    plan.out_index_of[i] = off;
    for (std::size_t a = shape.size(); a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  return plan;
}

template <typename T>
Tensor<T> axis_reduce(const Tensor<T>& x, const std::vector<std::size_t>& axes,
                      bool take_mean) {
  auto plan = std::make_shared<AxisReducePlan>(axis_reduce_plan(x.shape(), axes));
  Tensor<T> out = Tensor<T>::zeros(plan->out_shape);
  const T* p = x.values().data();
  T* po = out.values().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[plan->out_index_of[i]] += p[i];
  const T inv = take_mean ? T(1) / static_cast<T>(plan->count) : T(1);
  if (take_mean) {
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] *= inv;
  }
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh, plan, inv, n]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      T* gx = ensure_grad(xh.node()).data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[plan->out_index_of[i]] * inv;
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  return axis_reduce(x, axes, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  return axis_reduce(x, axes, true);
}

// ---------------------------------------------------------------------------
// Structure ops and utilities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  Tensor<T> out = Tensor<T>::from_values(std::move(new_shape),
                                         std::vector<T>(x.values().begin(), x.values().end()));
  if (taping() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xh = x, oh = out;
    GradientTape::active()->record([xh, oh]() mutable {
      if (!oh.has_grad()) return;
      const T* g = oh.grad_view().data();
      T* gx = ensure_grad(xh.node()).data();
      const std::size_t n = xh.numel();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone_values();
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& x, T step) {
  if (!(step > T(0))) throw Error("finite_diff_grad: step must be positive");
  Tensor<T> probe = x.clone_values();
  Tensor<T> grad = Tensor<T>::zeros(x.shape());
  auto vals = probe.values();
  auto out = grad.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const T orig = vals[i];
    vals[i] = orig + step;
    const T fp = f(probe);
    vals[i] = orig - step;
    const T fm = f(probe);
    vals[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite objective at element " +
                         std::to_string(i));
    }
    out[i] = (fp - fm) / (T(2) * step);
  }
  return grad;
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937& rng, T mean, T stddev) {
  std::normal_distribution<T> dist(mean, stddev);
  for (T& v : t.values()) v = dist(rng);
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937& rng, T lo, T hi) {
  std::uniform_real_distribution<T> dist(lo, hi);
  for (T& v : t.values()) v = dist(rng);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;

#define FGAN_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                               HW, const ConvPadding&);                                  \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                               HW, HW, PadMode);                                         \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&,            \
                                         const Tensor<T>&, HW, HW, HW);                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> add<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> sub<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                     \
  template Tensor<T> abs_val<T>(const Tensor<T>&);                                      \
  template Tensor<T> square<T>(const Tensor<T>&);                                       \
  template Tensor<T> sum<T>(const Tensor<T>&);                                          \
  template Tensor<T> mean<T>(const Tensor<T>&);                                         \
  template Tensor<T> sum<T>(const Tensor<T>&, const std::vector<std::size_t>&);         \
  template Tensor<T> mean<T>(const Tensor<T>&, const std::vector<std::size_t>&);        \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                               \
  template Tensor<T> detach<T>(const Tensor<T>&);                                       \
  template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&,     \
                                         const Tensor<T>&, T);                          \
  template void fill_normal<T>(Tensor<T>&, std::mt19937&, T, T);                        \
  template void fill_uniform<T>(Tensor<T>&, std::mt19937&, T, T);                       \
  template bool all_finite<T>(const Tensor<T>&);

FGAN_INSTANTIATE_OPS(float)
FGAN_INSTANTIATE_OPS(double)

#undef FGAN_INSTANTIATE_OPS

}  // namespace fgan
