#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmasknas/autodiff/tape.hpp"
#include "dmasknas/autodiff/tensor.hpp"

namespace dmasknas {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("conv stride must be positive");
  if (in + 2 * padding < kernel)
    throw ShapeError("conv kernel " + std::to_string(kernel) +
                     " larger than padded input " + std::to_string(in + 2 * padding));
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, ho, wo, stride, pad, groups, cin_g, cout_g;
};

inline ConvGeometry conv_geometry(const Shape& xs, const Shape& ws,
                                  const Conv2dOptions& o) {
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d expects 4-d input and weight, got " + to_string(xs) +
                     " and " + to_string(ws));
  if (o.groups == 0) throw ShapeError("conv2d groups must be positive");
  ConvGeometry g{};
  g.n = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.k = ws[2];
  g.stride = o.stride;
  g.pad = o.padding;
  g.groups = o.groups;
  if (ws[2] != ws[3]) throw ShapeError("conv2d expects a square kernel");
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0)
    throw ShapeError("conv2d channels (" + std::to_string(g.cin) + " in, " +
                     std::to_string(g.cout) + " out) not divisible by groups " +
                     std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (ws[1] != g.cin_g)
    throw ShapeError("conv2d weight " + to_string(ws) + " incompatible with input " +
                     to_string(xs) + " and groups " + std::to_string(g.groups));
  g.ho = conv_out_extent(g.h, g.k, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.k, g.stride, g.pad);
  return g;
}

// Output index range [lo, hi) with 0 <= o*stride + k - pad < in.
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad,
                        std::size_t k, std::size_t& lo, std::size_t& hi) {
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t l = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t h = static_cast<std::ptrdiff_t>(in) - 1 - off;
  h = h < 0 ? 0 : h / s + 1;
  h = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(out));
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(l, 0));
  hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(lo)));
}

// One kernel tap with the output window it touches; empty taps are dropped.
struct Tap {
  std::size_t widx, oy_lo, oy_hi, ox_lo, ox_hi;
  std::ptrdiff_t in_off;  // input offset of output (0, 0) for this tap
};

inline std::vector<Tap> conv_taps(const ConvGeometry& g) {
  std::vector<Tap> taps;
  for (std::size_t ky = 0; ky < g.k; ++ky)
    for (std::size_t kx = 0; kx < g.k; ++kx) {
      Tap t{ky * g.k + kx, 0, 0, 0, 0,
            (static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.pad)) *
                    static_cast<std::ptrdiff_t>(g.w) +
                static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad)};
      valid_range(g.h, g.ho, g.stride, g.pad, ky, t.oy_lo, t.oy_hi);
      valid_range(g.w, g.wo, g.stride, g.pad, kx, t.ox_lo, t.ox_hi);
      if (t.oy_lo < t.oy_hi && t.ox_lo < t.ox_hi) taps.push_back(t);
    }
  return taps;
}

// Calls f(y_row, x_row, count, x_step) for every output row a tap touches;
// x_row already points at the input of the first valid output column.
template <class F>
inline void for_tap_rows(const ConvGeometry& g, const Tap& t, F&& f) {
  const std::size_t s = g.stride, n = t.ox_hi - t.ox_lo;
  for (std::size_t oy = t.oy_lo; oy < t.oy_hi; ++oy) {
    const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(oy * s * g.w + t.ox_lo * s) + t.in_off;
    f(oy * g.wo + t.ox_lo, static_cast<std::size_t>(xi), n);
  }
}

// out[r, p] (+)= sum_c a[r * a_row + c * a_col] * b[c, p], summed in ascending c
// so the result matches a plain loop over input channels. `init` seeds rows
// with a bias; `accumulate` keeps the existing contents instead.
template <class T>
void pointwise_gemm(std::size_t rows, std::size_t inner, std::size_t plane, const T* a,
                    std::size_t a_row, std::size_t a_col, const T* b, T* out, const T* init,
                    bool accumulate = false) {
  constexpr std::size_t B = 8;
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out + r * plane;
    const T* ar = a + r * a_row;
    std::size_t p0 = 0;
    for (; p0 + B <= plane; p0 += B) {
      T acc[B];
      for (std::size_t j = 0; j < B; ++j) acc[j] = accumulate ? o[p0 + j] : init ? init[r] : T(0);
      for (std::size_t c = 0; c < inner; ++c) {
        const T wv = ar[c * a_col];
        const T* br = b + c * plane + p0;
        for (std::size_t j = 0; j < B; ++j) acc[j] += wv * br[j];
      }
      for (std::size_t j = 0; j < B; ++j) o[p0 + j] = acc[j];
    }
    for (std::size_t p = p0; p < plane; ++p) {
      T acc = accumulate ? o[p] : init ? init[r] : T(0);
      for (std::size_t c = 0; c < inner; ++c) acc += ar[c * a_col] * b[c * plane + p];
      o[p] = acc;
    }
  }
}

// Depthwise kernels (one input channel per group) over a zero-padded copy of
// each plane, so every output sees all k*k taps without bounds checks.
inline bool is_depthwise(const ConvGeometry& g) {
  return g.cin_g == 1 && g.cout_g == 1 && g.k > 1;
}

template <class T>
void pad_plane(const ConvGeometry& g, const T* src, std::vector<T>& dst) {
  const std::size_t wp = g.w + 2 * g.pad;
  dst.assign((g.h + 2 * g.pad) * wp, T(0));
  for (std::size_t y = 0; y < g.h; ++y)
    std::copy(src + y * g.w, src + (y + 1) * g.w, dst.data() + (y + g.pad) * wp + g.pad);
}

// K > 0 fixes the kernel size at compile time; K == 0 reads it from g.
template <std::size_t K, class T>
void depthwise_forward_k(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const std::size_t k = K ? K : g.k;
  const std::size_t in_plane = g.h * g.w, out_plane = g.ho * g.wo, kk = k * k;
  const std::size_t wp = g.w + 2 * g.pad, s = g.stride;
  std::vector<T> buf;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.cout; ++c) {
      pad_plane(g, x + (n * g.cin + c) * in_plane, buf);
      const T* wc = w + c * kk;
      T* yp = y + (n * g.cout + c) * out_plane;
      for (std::size_t oy = 0; oy < g.ho; ++oy)
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          T acc = bias ? bias[c] : T(0);
          const T* base = buf.data() + oy * s * wp + ox * s;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) acc += wc[ky * k + kx] * base[ky * wp + kx];
          yp[oy * g.wo + ox] = acc;
        }
    }
}

template <std::size_t K, class T>
void depthwise_backward_k(const ConvGeometry& g, const T* dy, const T* x, const T* w, T* dx,
                          T* dw) {
  const std::size_t k = K ? K : g.k;
  const std::size_t in_plane = g.h * g.w, out_plane = g.ho * g.wo, kk = k * k;
  const std::size_t wp = g.w + 2 * g.pad, s = g.stride;
  std::vector<T> buf, dbuf;
  std::vector<T> acc(kk);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.cout; ++c) {
      const T* dyp = dy + (n * g.cout + c) * out_plane;
      const T* wc = w + c * kk;
      if (dw) {
        pad_plane(g, x + (n * g.cin + c) * in_plane, buf);
        std::fill(acc.begin(), acc.end(), T(0));
      }
      if (dx) dbuf.assign((g.h + 2 * g.pad) * wp, T(0));
      for (std::size_t oy = 0; oy < g.ho; ++oy)
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          const T d = dyp[oy * g.wo + ox];
          const std::size_t off = oy * s * wp + ox * s;
          if (dw)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) acc[ky * k + kx] += d * buf[off + ky * wp + kx];
          if (dx)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) dbuf[off + ky * wp + kx] += wc[ky * k + kx] * d;
        }
      if (dw)
        for (std::size_t t = 0; t < kk; ++t) dw[c * kk + t] += acc[t];
      if (dx) {
        T* dxp = dx + (n * g.cin + c) * in_plane;
        for (std::size_t yy = 0; yy < g.h; ++yy)
          for (std::size_t xx = 0; xx < g.w; ++xx)
            dxp[yy * g.w + xx] += dbuf[(yy + g.pad) * wp + xx + g.pad];
      }
    }
}

template <class T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  if (g.k == 3) return depthwise_forward_k<3>(g, x, w, bias, y);
  if (g.k == 5) return depthwise_forward_k<5>(g, x, w, bias, y);
  depthwise_forward_k<0>(g, x, w, bias, y);
}

template <class T>
void depthwise_backward(const ConvGeometry& g, const T* dy, const T* x, const T* w, T* dx,
                        T* dw) {
  if (g.k == 3) return depthwise_backward_k<3>(g, dy, x, w, dx, dw);
  if (g.k == 5) return depthwise_backward_k<5>(g, dy, x, w, dx, dw);
  depthwise_backward_k<0>(g, dy, x, w, dx, dw);
}

template <class T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const std::size_t in_plane = g.h * g.w, out_plane = g.ho * g.wo, kk = g.k * g.k;
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  const auto taps = conv_taps(g);
  const std::size_t s = g.stride;
  if (pointwise && g.groups == 1) {
    for (std::size_t n = 0; n < g.n; ++n)
      pointwise_gemm(g.cout, g.cin, out_plane, w, g.cin, 1, x + n * g.cin * in_plane,
                     y + n * g.cout * out_plane, bias);
    return;
  }
  if (is_depthwise(g)) return depthwise_forward(g, x, w, bias, y);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oc = 0; oc < g.cout; ++oc) {
      T* yp = y + (n * g.cout + oc) * out_plane;
      std::fill(yp, yp + out_plane, bias ? bias[oc] : T(0));
      const std::size_t grp = oc / g.cout_g;
      for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
        const std::size_t ic = grp * g.cin_g + icl;
        const T* xp = x + (n * g.cin + ic) * in_plane;
        const T* wp = w + (oc * g.cin_g + icl) * kk;
        if (pointwise) {
          const T wv = wp[0];
          for (std::size_t p = 0; p < out_plane; ++p) yp[p] += wv * xp[p];
          continue;
        }
        for (const Tap& t : taps) {
          const T wv = wp[t.widx];
          for_tap_rows(g, t, [&](std::size_t yi, std::size_t xi, std::size_t cnt) {
            T* yr = yp + yi;
            const T* xr = xp + xi;
            if (s == 1) {
              for (std::size_t j = 0; j < cnt; ++j) yr[j] += wv * xr[j];
            } else {
              for (std::size_t j = 0; j < cnt; ++j) yr[j] += wv * xr[j * s];
            }
          });
        }
      }
    }
  }
}

template <class T>
void conv_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  const std::size_t in_plane = g.h * g.w, out_plane = g.ho * g.wo, kk = g.k * g.k;
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  const auto taps = conv_taps(g);
  const std::size_t s = g.stride;
  if (pointwise && g.groups == 1) {
    for (std::size_t n = 0; n < g.n; ++n)
      pointwise_gemm(g.cin, g.cout, out_plane, w, 1, g.cin, dy + n * g.cout * out_plane,
                     dx + n * g.cin * in_plane, static_cast<const T*>(nullptr), true);
    return;
  }
  if (is_depthwise(g)) return depthwise_backward(g, dy, static_cast<const T*>(nullptr), w, dx,
                                                 static_cast<T*>(nullptr));
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oc = 0; oc < g.cout; ++oc) {
      const T* dyp = dy + (n * g.cout + oc) * out_plane;
      const std::size_t grp = oc / g.cout_g;
      for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
        const std::size_t ic = grp * g.cin_g + icl;
        T* dxp = dx + (n * g.cin + ic) * in_plane;
        const T* wp = w + (oc * g.cin_g + icl) * kk;
        if (pointwise) {
          const T wv = wp[0];
          for (std::size_t p = 0; p < out_plane; ++p) dxp[p] += wv * dyp[p];
          continue;
        }
        for (const Tap& t : taps) {
          const T wv = wp[t.widx];
          for_tap_rows(g, t, [&](std::size_t yi, std::size_t xi, std::size_t cnt) {
            const T* dyr = dyp + yi;
            T* dxr = dxp + xi;
            for (std::size_t j = 0; j < cnt; ++j) dxr[j * s] += wv * dyr[j];
          });
        }
      }
    }
  }
}

template <class T>
void conv_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw) {
  const std::size_t in_plane = g.h * g.w, out_plane = g.ho * g.wo, kk = g.k * g.k;
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  if (is_depthwise(g)) return depthwise_backward(g, dy, x, static_cast<const T*>(nullptr),
                                                 static_cast<T*>(nullptr), dw);
  const auto taps = conv_taps(g);
  const std::size_t s = g.stride;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oc = 0; oc < g.cout; ++oc) {
      const T* dyp = dy + (n * g.cout + oc) * out_plane;
      const std::size_t grp = oc / g.cout_g;
      for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
        const std::size_t ic = grp * g.cin_g + icl;
        const T* xp = x + (n * g.cin + ic) * in_plane;
        T* dwp = dw + (oc * g.cin_g + icl) * kk;
        if (pointwise) {
          // eight interleaved partial sums so the loop vectorizes
          T lanes[8] = {};
          std::size_t p = 0;
          for (; p + 8 <= out_plane; p += 8)
            for (std::size_t j = 0; j < 8; ++j) lanes[j] += dyp[p + j] * xp[p + j];
          T acc = 0;
          for (std::size_t j = 0; j < 8; ++j) acc += lanes[j];
          for (; p < out_plane; ++p) acc += dyp[p] * xp[p];
          dwp[0] += acc;
          continue;
        }
        for (const Tap& t : taps) {
          T acc = 0;
          for_tap_rows(g, t, [&](std::size_t yi, std::size_t xi, std::size_t cnt) {
            const T* dyr = dyp + yi;
            const T* xr = xp + xi;
            for (std::size_t j = 0; j < cnt; ++j) acc += dyr[j] * xr[j * s];
          });
          dwp[t.widx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

// x: [N, Cin, H, W], w: [Cout, Cin/groups, k, k], bias: [Cout] or invalid.
// Depthwise convolution is groups == Cin == Cout.
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var bias, Conv2dOptions o = {}) {
  const auto g = detail::conv_geometry(t.shape(x), t.shape(w), o);
  if (bias.valid() && (t.shape(bias).size() != 1 || t.shape(bias)[0] != g.cout))
    throw ShapeError("conv2d bias shape " + to_string(t.shape(bias)) +
                     " does not match " + std::to_string(g.cout) + " output channels");
  Tensor<T> y(Shape{g.n, g.cout, g.ho, g.wo});
  detail::conv_forward(g, t.value(x).data().data(), t.value(w).data().data(),
                       bias.valid() ? t.value(bias).data().data() : nullptr,
                       y.data().data());
  const bool gx = t.requires_grad(x), gw = t.requires_grad(w);
  return t.record("conv2d", std::move(y), {x, w, bias}, {gw ? x : Var{}, gx ? w : Var{}},
                  0, [x, w, bias, g](Tape<T>& tp, const Tensor<T>& dy) {
                    if (tp.wants_grad(x)) {
                      Tensor<T> dx(tp.shape(x));
                      detail::conv_backward_input(g, dy.data().data(),
                                                  tp.value(w).data().data(),
                                                  dx.data().data());
                      tp.accumulate(x, std::move(dx));
                    }
                    if (tp.wants_grad(w)) {
                      Tensor<T> dw(tp.shape(w));
                      detail::conv_backward_weight(g, dy.data().data(),
                                                   tp.value(x).data().data(),
                                                   dw.data().data());
                      tp.accumulate(w, std::move(dw));
                    }
                    if (bias.valid() && tp.wants_grad(bias)) {
                      Tensor<T> db(Shape{g.cout});
                      const std::size_t plane = g.ho * g.wo;
                      for (std::size_t n = 0; n < g.n; ++n)
                        for (std::size_t c = 0; c < g.cout; ++c) {
                          const T* p = dy.data().data() + (n * g.cout + c) * plane;
                          T acc = 0;
                          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                          db[c] += acc;
                        }
                      tp.accumulate(bias, std::move(db));
                    }
                  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

enum class Activation { relu, hswish, sigmoid };

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "hswish") return Activation::hswish;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::hswish: return "hswish";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

namespace detail {

template <class T>
T sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
T activate(Activation a, T v) {
  switch (a) {
    case Activation::relu: return v > 0 ? v : T(0);
    case Activation::hswish: return v * std::clamp(v + T(3), T(0), T(6)) / T(6);
    case Activation::sigmoid: return sigmoid(v);
  }
  return v;
}

// Derivative with subgradient 0 at kinks.
template <class T>
T activate_grad(Activation a, T v) {
  switch (a) {
    case Activation::relu: return v > 0 ? T(1) : T(0);
    case Activation::hswish:
      if (v <= T(-3) || v == T(3)) return T(0);
      if (v > T(3)) return T(1);
      return (T(2) * v + T(3)) / T(6);
    case Activation::sigmoid: {
      const T s = sigmoid(v);
      return s * (T(1) - s);
    }
  }
  return T(0);
}

// Piece index of v; changes whenever v crosses a kink.
template <class T>
std::uint8_t region(Activation a, T v) {
  switch (a) {
    case Activation::relu: return v < 0 ? 0 : (v == 0 ? 1 : 2);
    case Activation::hswish:
      if (v < T(-3)) return 0;
      if (v == T(-3)) return 1;
      if (v < T(3)) return 2;
      if (v == T(3)) return 3;
      return 4;
    case Activation::sigmoid: return 0;
  }
  return 0;
}

}  // namespace detail

template <class T>
Var activation(Tape<T>& t, Var x, Activation kind) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = detail::activate(kind, xv[i]);
  if (t.region_log_enabled() && kind != Activation::sigmoid) {
    auto& log = t.region_log();
    for (std::size_t i = 0; i < xv.size(); ++i) log.push_back(detail::region(kind, xv[i]));
  }
  return t.record(to_string(kind), std::move(y), {x}, {x}, 0,
                  [x, kind](Tape<T>& tp, const Tensor<T>& dy) {
                    const Tensor<T>& xv = tp.value(x);
                    Tensor<T> dx(xv.shape());
                    for (std::size_t i = 0; i < xv.size(); ++i)
                      dx[i] = dy[i] * detail::activate_grad(kind, xv[i]);
                    tp.accumulate(x, std::move(dx));
                  });
}

// ---------------------------------------------------------------------------
// Broadcasting arithmetic (b broadcasts into a; rank <= 4)
// ---------------------------------------------------------------------------

namespace detail {

struct Broadcast {
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  std::array<std::size_t, 4> bstride{0, 0, 0, 0};
};

inline Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() > 4 || b.size() != a.size())
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " into " +
                     to_string(a));
  Broadcast bc;
  const std::size_t off = 4 - a.size();
  std::array<std::size_t, 4> bd{1, 1, 1, 1};
  for (std::size_t i = 0; i < a.size(); ++i) {
    bc.dims[off + i] = a[i];
    bd[off + i] = b[i];
    if (b[i] != a[i] && b[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) +
                       " into " + to_string(a));
  }
  std::size_t s = 1;
  for (int i = 3; i >= 0; --i) {
    bc.bstride[i] = bd[i] == 1 ? 0 : s;
    s *= bd[i];
  }
  return bc;
}

// f(flat index into a, flat index into b)
template <class F>
void for_broadcast(const Broadcast& bc, F&& f) {
  std::size_t ai = 0;
  for (std::size_t i0 = 0; i0 < bc.dims[0]; ++i0)
    for (std::size_t i1 = 0; i1 < bc.dims[1]; ++i1)
      for (std::size_t i2 = 0; i2 < bc.dims[2]; ++i2) {
        const std::size_t base =
            i0 * bc.bstride[0] + i1 * bc.bstride[1] + i2 * bc.bstride[2];
        if (bc.bstride[3] == 0) {
          for (std::size_t i3 = 0; i3 < bc.dims[3]; ++i3) f(ai++, base);
        } else {
          for (std::size_t i3 = 0; i3 < bc.dims[3]; ++i3) f(ai++, base + i3);
        }
      }
}

}  // namespace detail

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto bc = detail::make_broadcast(t.shape(a), t.shape(b), "add");
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  Tensor<T> y(av.shape());
  detail::for_broadcast(bc, [&](std::size_t i, std::size_t j) { y[i] = av[i] + bv[j]; });
  return t.record("add", std::move(y), {a, b}, {}, 0,
                  [a, b, bc](Tape<T>& tp, const Tensor<T>& dy) {
                    if (tp.wants_grad(a)) tp.accumulate(a, dy);
                    if (tp.wants_grad(b)) {
                      Tensor<T> db(tp.shape(b));
                      detail::for_broadcast(
                          bc, [&](std::size_t i, std::size_t j) { db[j] += dy[i]; });
                      tp.accumulate(b, std::move(db));
                    }
                  });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto bc = detail::make_broadcast(t.shape(a), t.shape(b), "mul");
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  Tensor<T> y(av.shape());
  detail::for_broadcast(bc, [&](std::size_t i, std::size_t j) { y[i] = av[i] * bv[j]; });
  const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  return t.record("mul", std::move(y), {a, b}, {gb ? a : Var{}, ga ? b : Var{}}, 0,
                  [a, b, bc](Tape<T>& tp, const Tensor<T>& dy) {
                    const Tensor<T>& av = tp.value(a);
                    const Tensor<T>& bv = tp.value(b);
                    if (tp.wants_grad(a)) {
                      Tensor<T> da(av.shape());
                      detail::for_broadcast(
                          bc, [&](std::size_t i, std::size_t j) { da[i] = dy[i] * bv[j]; });
                      tp.accumulate(a, std::move(da));
                    }
                    if (tp.wants_grad(b)) {
                      Tensor<T> db(bv.shape());
                      detail::for_broadcast(
                          bc, [&](std::size_t i, std::size_t j) { db[j] += dy[i] * av[i]; });
                      tp.accumulate(b, std::move(db));
                    }
                  });
}

enum class Elementwise { add, mul };

template <class T>
Var elementwise(Tape<T>& t, Var a, Var b, Elementwise kind) {
  return kind == Elementwise::add ? add(t, a, b) : mul(t, a, b);
}

template <class T>
Var reshape(Tape<T>& t, Var x, Shape s) {
  Tensor<T> y = t.value(x).reshaped(std::move(s));
  return t.record("reshape", std::move(y), {x}, {}, 0,
                  [x](Tape<T>& tp, const Tensor<T>& dy) {
                    tp.accumulate(x, dy.reshaped(tp.shape(x)));
                  });
}

// x: [N, C, H, W] scaled per channel by m: [C].
template <class T>
Var scale_channels(Tape<T>& t, Var x, Var m) {
  const Shape& xs = t.shape(x);
  const Shape& ms = t.shape(m);
  if (xs.size() != 4 || ms.size() != 1 || ms[0] != xs[1])
    throw ShapeError("scale_channels: mask " + to_string(ms) +
                     " does not match channels of " + to_string(xs));
  return mul(t, x, reshape(t, m, Shape{1, xs[1], 1, 1}));
}

// Multiplies by a compile-time constant.
template <class T>
Var scale(Tape<T>& t, Var x, T c) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * c;
  return t.record("scale", std::move(y), {x}, {}, 0,
                  [x, c](Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dx(dy.shape());
                    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * c;
                    tp.accumulate(x, std::move(dx));
                  });
}

// y = x * g[index].
template <class T>
Var scale_by_element(Tape<T>& t, Var x, Var g, std::size_t index) {
  const Tensor<T>& gv = t.value(g);
  if (index >= gv.size())
    throw ShapeError("scale_by_element index " + std::to_string(index) + " out of range");
  const Tensor<T>& xv = t.value(x);
  const T s = gv[index];
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * s;
  const bool gx = t.requires_grad(x), gg = t.requires_grad(g);
  return t.record("scale_by_element", std::move(y), {x, g}, {gg ? x : Var{}, gx ? g : Var{}},
                  0, [x, g, index](Tape<T>& tp, const Tensor<T>& dy) {
                    if (tp.wants_grad(x)) {
                      const T s = tp.value(g)[index];
                      Tensor<T> dx(dy.shape());
                      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * s;
                      tp.accumulate(x, std::move(dx));
                    }
                    if (tp.wants_grad(g)) {
                      const Tensor<T>& xv = tp.value(x);
                      T acc = 0;
                      for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
                      Tensor<T> dg(tp.shape(g));
                      dg[index] = acc;
                      tp.accumulate(g, std::move(dg));
                    }
                  });
}

template <class T>
Var sum(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  T acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  return t.record("sum", Tensor<T>::scalar(acc), {x}, {}, 0,
                  [x](Tape<T>& tp, const Tensor<T>& dy) {
                    tp.accumulate(x, Tensor<T>(tp.shape(x), dy[0]));
                  });
}

// Σ x_i c_i for a constant vector c.
template <class T>
Var dot_const(Tape<T>& t, Var x, std::vector<double> c) {
  const Tensor<T>& xv = t.value(x);
  if (xv.size() != c.size())
    throw ShapeError("dot_const: length " + std::to_string(xv.size()) + " vs " +
                     std::to_string(c.size()));
  T acc = 0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += xv[i] * static_cast<T>(c[i]);
  return t.record("dot_const", Tensor<T>::scalar(acc), {x}, {}, 0,
                  [x, c = std::move(c)](Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dx(tp.shape(x));
                    for (std::size_t i = 0; i < c.size(); ++i)
                      dx[i] = dy[0] * static_cast<T>(c[i]);
                    tp.accumulate(x, std::move(dx));
                  });
}

// 1 / ||x||_2 as a scalar.
template <class T>
Var inverse_norm(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  double sq = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) sq += double(xv[i]) * double(xv[i]);
  if (!(sq > 0)) throw NumericError("inverse_norm: zero vector");
  const double inv = 1 / std::sqrt(sq);
  return t.record("inverse_norm", Tensor<T>::scalar(T(inv)), {x}, {x}, 0,
                  [x, inv](Tape<T>& tp, const Tensor<T>& dy) {
                    // d/dx_i = -x_i / ||x||^3
                    const Tensor<T>& xv = tp.value(x);
                    Tensor<T> dx(tp.shape(x));
                    const double k = -double(dy[0]) * inv * inv * inv;
                    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = T(k * double(xv[i]));
                    tp.accumulate(x, std::move(dx));
                  });
}

// ---------------------------------------------------------------------------
// Normalization, pooling, dense layers, loss
// ---------------------------------------------------------------------------

// Learnable per-channel affine on [N, C, H, W]: y = x * scale[c] + shift[c].
template <class T>
Var channel_affine(Tape<T>& t, Var x, Var scale_v, Var shift_v) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 4 || t.shape(scale_v) != Shape{xs[1]} || t.shape(shift_v) != Shape{xs[1]})
    throw ShapeError("channel_affine: parameters do not match channels of " + to_string(xs));
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& sv = t.value(scale_v);
  const Tensor<T>& bv = t.value(shift_v);
  Tensor<T> y(xs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      const T s = sv[ch], b = bv[ch];
      for (std::size_t p = 0; p < plane; ++p) y[base + p] = xv[base + p] * s + b;
    }
  const bool gx = t.requires_grad(x), gs = t.requires_grad(scale_v);
  return t.record(
      "channel_affine", std::move(y), {x, scale_v, shift_v},
      {gs ? x : Var{}, gx ? scale_v : Var{}}, 0,
      [x, scale_v, shift_v, n, c, plane](Tape<T>& tp, const Tensor<T>& dy) {
        if (tp.wants_grad(x)) {
          const Tensor<T>& sv = tp.value(scale_v);
          Tensor<T> dx(dy.shape());
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (i * c + ch) * plane;
              for (std::size_t p = 0; p < plane; ++p) dx[base + p] = dy[base + p] * sv[ch];
            }
          tp.accumulate(x, std::move(dx));
        }
        const bool gs = tp.wants_grad(scale_v), gb = tp.wants_grad(shift_v);
        if (gs || gb) {
          Tensor<T> ds(Shape{c}), db(Shape{c});
          const Tensor<T>* xv = gs ? &tp.value(x) : nullptr;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (i * c + ch) * plane;
              T as = 0, ab = 0;
              for (std::size_t p = 0; p < plane; ++p) {
                ab += dy[base + p];
                if (xv) as += dy[base + p] * (*xv)[base + p];
              }
              ds[ch] += as;
              db[ch] += ab;
            }
          if (gs) tp.accumulate(scale_v, std::move(ds));
          if (gb) tp.accumulate(shift_v, std::move(db));
        }
      });
}

template <class T>
Var global_avgpool(Tape<T>& t, Var x) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 4) throw ShapeError("global_avgpool expects [N,C,H,W], got " + to_string(xs));
  const std::size_t nc = xs[0] * xs[1], plane = xs[2] * xs[3];
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(Shape{xs[0], xs[1], 1, 1});
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += xv[i * plane + p];
    y[i] = acc / static_cast<T>(plane);
  }
  return t.record("global_avgpool", std::move(y), {x}, {}, 0,
                  [x, nc, plane](Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dx(tp.shape(x));
                    for (std::size_t i = 0; i < nc; ++i) {
                      const T v = dy[i] / static_cast<T>(plane);
                      for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] = v;
                    }
                    tp.accumulate(x, std::move(dx));
                  });
}

// x: [N, F, ...] flattened to [N, F]; w: [O, F]; b: [O] or invalid -> [N, O].
template <class T>
Var fully_connected(Tape<T>& t, Var x, Var w, Var b) {
  const Shape& xs = t.shape(x);
  const Shape& ws = t.shape(w);
  if (xs.empty() || ws.size() != 2)
    throw ShapeError("fully_connected: bad shapes " + to_string(xs) + ", " + to_string(ws));
  const std::size_t n = xs[0], f = t.value(x).size() / n, o = ws[0];
  if (ws[1] != f)
    throw ShapeError("fully_connected: weight " + to_string(ws) + " does not match " +
                     std::to_string(f) + " input features");
  if (b.valid() && t.shape(b) != Shape{o})
    throw ShapeError("fully_connected: bias shape " + to_string(t.shape(b)));
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  Tensor<T> y(Shape{n, o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      T acc = b.valid() ? t.value(b)[j] : T(0);
      for (std::size_t k = 0; k < f; ++k) acc += xv[i * f + k] * wv[j * f + k];
      y[i * o + j] = acc;
    }
  const bool gx = t.requires_grad(x), gw = t.requires_grad(w);
  return t.record(
      "fully_connected", std::move(y), {x, w, b}, {gw ? x : Var{}, gx ? w : Var{}}, 0,
      [x, w, b, n, f, o](Tape<T>& tp, const Tensor<T>& dy) {
        if (tp.wants_grad(x)) {
          const Tensor<T>& wv = tp.value(w);
          Tensor<T> dx(tp.shape(x));
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) {
              const T d = dy[i * o + j];
              for (std::size_t k = 0; k < f; ++k) dx[i * f + k] += d * wv[j * f + k];
            }
          tp.accumulate(x, std::move(dx));
        }
        if (tp.wants_grad(w)) {
          const Tensor<T>& xv = tp.value(x);
          Tensor<T> dw(tp.shape(w));
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) {
              const T d = dy[i * o + j];
              for (std::size_t k = 0; k < f; ++k) dw[j * f + k] += d * xv[i * f + k];
            }
          tp.accumulate(w, std::move(dw));
        }
        if (b.valid() && tp.wants_grad(b)) {
          Tensor<T> db(Shape{o});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) db[j] += dy[i * o + j];
          tp.accumulate(b, std::move(db));
        }
      });
}

// Mean cross-entropy over the batch. logits: [N, K].
template <class T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels) {
  const Shape& ls = t.shape(logits);
  if (ls.size() != 2 || ls[0] != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + to_string(ls) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = ls[0], k = ls[1];
  const Tensor<T>& lv = t.value(logits);
  std::vector<T> probs(n * k);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ShapeError("label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(k) + " classes");
    const T* row = lv.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / z;
    loss += -(row[labels[i]] - mx - std::log(z));
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return t.record("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits}, {}, n * k,
                  [logits, probs = std::move(probs), lab = std::move(lab), n, k](
                      Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dl(Shape{n, k});
                    const T s = dy[0] / static_cast<T>(n);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < k; ++j)
                        dl[i * k + j] =
                            s * (probs[i * k + j] - (static_cast<int>(j) == lab[i] ? T(1) : T(0)));
                    tp.accumulate(logits, std::move(dl));
                  });
}

// Squeeze-and-excite: avgpool -> fc+relu -> fc+sigmoid -> channelwise scale.
// w_reduce: [R, C], b_reduce: [R], w_expand: [C, R], b_expand: [C].
template <class T>
Var squeeze_excite(Tape<T>& t, Var x, Var w_reduce, Var b_reduce, Var w_expand,
                   Var b_expand) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 4) throw ShapeError("squeeze_excite expects [N,C,H,W]");
  if (t.shape(w_expand).size() != 2 || t.shape(w_expand)[0] != xs[1])
    throw ShapeError("squeeze_excite: gate width " + to_string(t.shape(w_expand)) +
                     " does not match " + std::to_string(xs[1]) + " channels");
  Var pooled = global_avgpool(t, x);
  Var hidden = activation(t, fully_connected(t, pooled, w_reduce, b_reduce), Activation::relu);
  Var gate = activation(t, fully_connected(t, hidden, w_expand, b_expand), Activation::sigmoid);
  return mul(t, x, reshape(t, gate, Shape{xs[0], xs[1], 1, 1}));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

namespace detail {
inline void outer_inner(const Shape& s, std::size_t dim, std::size_t& outer,
                        std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
  for (std::size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

// Slice [start, start+len) along `dim`.
template <class T>
Var narrow(Tape<T>& t, Var x, std::size_t dim, std::size_t start, std::size_t len) {
  const Shape xs = t.shape(x);
  if (dim >= xs.size() || len == 0 || start + len > xs[dim])
    throw ShapeError("narrow out of range on " + to_string(xs));
  if (start == 0 && len == xs[dim]) return x;
  std::size_t outer, inner;
  detail::outer_inner(xs, dim, outer, inner);
  Shape ys = xs;
  ys[dim] = len;
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(ys);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data().data() + (o * xs[dim] + start) * inner, len * inner,
                y.data().data() + o * len * inner);
  return t.record("narrow", std::move(y), {x}, {}, 0,
                  [x, xs, dim, start, len, outer, inner](Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dx(xs);
                    for (std::size_t o = 0; o < outer; ++o)
                      std::copy_n(dy.data().data() + o * len * inner, len * inner,
                                  dx.data().data() + (o * xs[dim] + start) * inner);
                    tp.accumulate(x, std::move(dx));
                  });
}

// Zero-extend `dim` to `size` (trailing zeros).
template <class T>
Var pad_dim(Tape<T>& t, Var x, std::size_t dim, std::size_t size) {
  const Shape xs = t.shape(x);
  if (dim >= xs.size() || size < xs[dim])
    throw ShapeError("pad target " + std::to_string(size) + " smaller than extent of " +
                     to_string(xs));
  if (size == xs[dim]) return x;
  std::size_t outer, inner;
  detail::outer_inner(xs, dim, outer, inner);
  Shape ys = xs;
  ys[dim] = size;
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(ys);
  const std::size_t len = xs[dim];
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data().data() + o * len * inner, len * inner,
                y.data().data() + o * size * inner);
  return t.record("pad", std::move(y), {x}, {}, 0,
                  [x, xs, size, len, outer, inner](Tape<T>& tp, const Tensor<T>& dy) {
                    Tensor<T> dx(xs);
                    for (std::size_t o = 0; o < outer; ++o)
                      std::copy_n(dy.data().data() + o * size * inner, len * inner,
                                  dx.data().data() + o * len * inner);
                    tp.accumulate(x, std::move(dx));
                  });
}

// Truncate or zero-extend channels of [N, C, H, W] to c.
template <class T>
Var resize_channels(Tape<T>& t, Var x, std::size_t c) {
  const std::size_t have = t.shape(x).at(1);
  if (c == have) return x;
  return c < have ? narrow(t, x, 1, 0, c) : pad_dim(t, x, 1, c);
}

// Gather rows/cols of [N, C, H, W] -> [N, C, |rows|, |cols|].
template <class T>
Var gather2d(Tape<T>& t, Var x, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  const Shape xs = t.shape(x);
  if (xs.size() != 4) throw ShapeError("gather2d expects [N,C,H,W]");
  for (auto r : rows)
    if (r >= xs[2]) throw ShapeError("gather2d row index out of range");
  for (auto c : cols)
    if (c >= xs[3]) throw ShapeError("gather2d column index out of range");
  const std::size_t nc = xs[0] * xs[1], h = rows.size(), w = cols.size();
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(Shape{xs[0], xs[1], h, w});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        y[(i * h + r) * w + c] = xv[(i * xs[2] + rows[r]) * xs[3] + cols[c]];
  return t.record("gather2d", std::move(y), {x}, {}, 0,
                  [x, xs, rows = std::move(rows), cols = std::move(cols), nc](
                      Tape<T>& tp, const Tensor<T>& dy) {
                    const std::size_t h = rows.size(), w = cols.size();
                    Tensor<T> dx(xs);
                    for (std::size_t i = 0; i < nc; ++i)
                      for (std::size_t r = 0; r < h; ++r)
                        for (std::size_t c = 0; c < w; ++c)
                          dx[(i * xs[2] + rows[r]) * xs[3] + cols[c]] += dy[(i * h + r) * w + c];
                    tp.accumulate(x, std::move(dx));
                  });
}

// Place y: [N, C, |rows|, |cols|] onto a zero [N, C, H, W] canvas.
template <class T>
Var scatter2d(Tape<T>& t, Var y, std::vector<std::size_t> rows, std::vector<std::size_t> cols,
              std::size_t height, std::size_t width) {
  const Shape ys = t.shape(y);
  if (ys.size() != 4 || ys[2] != rows.size() || ys[3] != cols.size())
    throw ShapeError("scatter2d: input " + to_string(ys) + " does not match index grid " +
                     std::to_string(rows.size()) + "x" + std::to_string(cols.size()));
  for (auto r : rows)
    if (r >= height) throw ShapeError("scatter2d row index out of range");
  for (auto c : cols)
    if (c >= width) throw ShapeError("scatter2d column index out of range");
  const std::size_t nc = ys[0] * ys[1], h = rows.size(), w = cols.size();
  const Tensor<T>& yv = t.value(y);
  Tensor<T> out(Shape{ys[0], ys[1], height, width});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        out[(i * height + rows[r]) * width + cols[c]] = yv[(i * h + r) * w + c];
  return t.record("scatter2d", std::move(out), {y}, {}, 0,
                  [y, ys, rows = std::move(rows), cols = std::move(cols), nc, height, width](
                      Tape<T>& tp, const Tensor<T>& dout) {
                    const std::size_t h = rows.size(), w = cols.size();
                    Tensor<T> dy(ys);
                    for (std::size_t i = 0; i < nc; ++i)
                      for (std::size_t r = 0; r < h; ++r)
                        for (std::size_t c = 0; c < w; ++c)
                          dy[(i * h + r) * w + c] =
                              dout[(i * height + rows[r]) * width + cols[c]];
                    tp.accumulate(y, std::move(dy));
                  });
}

}  // namespace dmasknas
