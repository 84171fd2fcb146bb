#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hob/autodiff.hpp"
#include "hob/errors.hpp"
#include "hob/tensor.hpp"

namespace hob {

struct Stride {
  std::size_t t = 1, h = 1, w = 1;
  constexpr bool operator==(const Stride&) const = default;
  constexpr bool unit() const { return t == 1 && h == 1 && w == 1; }
};

// Output length of a zero-padded ("same") window op with the given stride.
constexpr std::size_t same_out(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

inline Shape5 strided_shape(Shape5 in, std::size_t channels, Stride s) {
  return {in.n, channels, same_out(in.t, s.t), same_out(in.h, s.h), same_out(in.w, s.w)};
}

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  OffsetGrid grid;
  std::size_t groups = 1;
  Stride stride;
  bool bias = false;

  void validate() const {
    if (in_channels == 0 || out_channels == 0 || groups == 0) throw ConfigError("conv with zero channels or groups");
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ConfigError("conv channels (" + std::to_string(in_channels) + " -> " + std::to_string(out_channels) +
                        ") not divisible by groups " + std::to_string(groups));
    }
    if (stride.t == 0 || stride.h == 0 || stride.w == 0) throw ConfigError("conv stride must be positive");
  }

  // (out, in / groups, Kt, Kh, Kw)
  Shape5 weight_shape() const {
    auto k = grid.kernel();
    return {out_channels, in_channels / groups, static_cast<std::size_t>(k[0]), static_cast<std::size_t>(k[1]),
            static_cast<std::size_t>(k[2])};
  }
  Shape5 bias_shape() const { return {1, out_channels, 1, 1, 1}; }
  std::size_t weight_count() const { return out_channels * (in_channels / groups) * grid.size(); }
  std::size_t param_count() const { return weight_count() + (bias ? out_channels : 0); }
  Shape5 output_shape(Shape5 in) const { return strided_shape(in, out_channels, stride); }
};

namespace kernels {

// Outputs o in [lo, hi) for which the input index o * stride + d lies inside [0, in).
struct AxisRange {
  std::size_t lo = 0, hi = 0;
};

inline AxisRange valid_outputs(std::size_t out, std::size_t in, std::size_t stride, int d) {
  const long s = static_cast<long>(stride);
  long lo = d < 0 ? (-d + s - 1) / s : 0;
  long last = static_cast<long>(in) - 1 - d;
  if (last < 0) return {0, 0};
  long hi = std::min<long>(last / s + 1, static_cast<long>(out));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Visits every (output row, input row, column range) touched by one kernel offset.
// fn(out_row_offset, in_row_offset, ow_lo, ow_hi) with in column = ow * stride_w + dw.
template <class Fn>
void for_each_row(const Shape5& in, const Shape5& out, Stride s, const Offset& q, Fn&& fn) {
  const AxisRange rt = valid_outputs(out.t, in.t, s.t, q.dt);
  const AxisRange rh = valid_outputs(out.h, in.h, s.h, q.dh);
  const AxisRange rw = valid_outputs(out.w, in.w, s.w, q.dw);
  if (rw.lo >= rw.hi) return;
  for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
    const std::size_t it = static_cast<std::size_t>(static_cast<long>(ot * s.t) + q.dt);
    for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
      const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh * s.h) + q.dh);
      fn((ot * out.h + oh) * out.w, (it * in.h + ih) * in.w, rw.lo, rw.hi);
    }
  }
}

// Convolutions run as im2col + GEMM per (sample, group). Row r = icl * |grid| + k of the
// column matrix holds input channel icl shifted by offset k, zero where it falls outside.
template <class T>
void im2col(const Tensor5<T>& x, std::size_t n, std::size_t c0, std::size_t channels, const ConvSpec& spec,
            const Shape5& out, std::vector<T>& col) {
  const Shape5 in = x.shape();
  const std::size_t kvol = spec.grid.size(), P = out.volume();
  col.assign(channels * kvol * P, T{0});
  for (std::size_t icl = 0; icl < channels; ++icl) {
    const T* xp = x.plane(n, c0 + icl);
    for (std::size_t k = 0; k < kvol; ++k) {
      const Offset& q = spec.grid[k];
      T* row = col.data() + (icl * kvol + k) * P;
      const Stride s = spec.stride;
      for_each_row(in, out, s, q, [&](std::size_t yo, std::size_t xo, std::size_t lo, std::size_t hi) {
        T* dst = row + yo;
        const T* src = xp + xo;
        if (s.w == 1) {
          std::copy(src + static_cast<long>(lo) + q.dw, src + static_cast<long>(hi) + q.dw, dst + lo);
        } else {
          for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[static_cast<long>(ow * s.w) + q.dw];
        }
      });
    }
  }
}

// Adjoint of im2col: scatter-adds the column matrix back into dx.
template <class T>
void col2im(const std::vector<T>& col, std::size_t n, std::size_t c0, std::size_t channels, const ConvSpec& spec,
            const Shape5& out, Tensor5<T>& dx) {
  const Shape5 in = dx.shape();
  const std::size_t kvol = spec.grid.size(), P = out.volume();
  for (std::size_t icl = 0; icl < channels; ++icl) {
    T* dxp = dx.plane(n, c0 + icl);
    for (std::size_t k = 0; k < kvol; ++k) {
      const Offset& q = spec.grid[k];
      const T* row = col.data() + (icl * kvol + k) * P;
      const Stride s = spec.stride;
      for_each_row(in, out, s, q, [&](std::size_t yo, std::size_t xo, std::size_t lo, std::size_t hi) {
        const T* src = row + yo;
        T* dst = dxp + xo;
        if (s.w == 1) {
          T* d = dst + static_cast<long>(lo) + q.dw;
          for (std::size_t i = 0; i < hi - lo; ++i) d[i] += src[lo + i];
        } else {
          for (std::size_t ow = lo; ow < hi; ++ow) dst[static_cast<long>(ow * s.w) + q.dw] += src[ow];
        }
      });
    }
  }
}

// C[M, P] += A[M, K] * B[K, P], all row-major. Four rows of C share each load of B.
template <class T>
void gemm_acc(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, T* C) {
  constexpr std::size_t kTile = 512;
  for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
    const std::size_t pn = std::min(kTile, P - p0);
    std::size_t m = 0;
    for (; m + 4 <= M; m += 4) {
      T* c0 = C + m * P + p0;
      T* c1 = c0 + P;
      T* c2 = c1 + P;
      T* c3 = c2 + P;
      for (std::size_t k = 0; k < K; ++k) {
        const T a0 = A[m * K + k], a1 = A[(m + 1) * K + k], a2 = A[(m + 2) * K + k], a3 = A[(m + 3) * K + k];
        const T* b = B + k * P + p0;
        for (std::size_t p = 0; p < pn; ++p) {
          const T bv = b[p];
          c0[p] += a0 * bv;
          c1[p] += a1 * bv;
          c2[p] += a2 * bv;
          c3[p] += a3 * bv;
        }
      }
    }
    for (; m < M; ++m) {
      T* c = C + m * P + p0;
      for (std::size_t k = 0; k < K; ++k) {
        const T a = A[m * K + k];
        const T* b = B + k * P + p0;
        for (std::size_t p = 0; p < pn; ++p) c[p] += a * b[p];
      }
    }
  }
}

// C[M, K] += A[M, P] * B[K, P]^T, i.e. row dot products with eight fixed partial sums.
template <class T>
void gemm_nt_acc(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* a = A + m * P;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * P;
      T part[8] = {};
      std::size_t p = 0;
      for (; p + 8 <= P; p += 8)
        for (std::size_t j = 0; j < 8; ++j) part[j] += a[p + j] * b[p + j];
      T acc = ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
      for (; p < P; ++p) acc += a[p] * b[p];
      C[m * K + k] += acc;
    }
  }
}

// C[K, P] = A[M, K]^T * B[M, P]
template <class T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, T* C) {
  std::fill(C, C + K * P, T{0});
  std::vector<T> At(K * M);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t k = 0; k < K; ++k) At[k * M + m] = A[m * K + k];
  gemm_acc(K, M, P, At.data(), B, C);
}

template <class T>
Tensor5<T> conv3d_forward(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>* bias, const ConvSpec& spec) {
  const Shape5 in = x.shape();
  const Shape5 out = spec.output_shape(in);
  Tensor5<T> y(out);
  const std::size_t in_g = spec.in_channels / spec.groups, out_g = spec.out_channels / spec.groups;
  const std::size_t K = in_g * spec.grid.size(), P = out.volume();
  std::vector<T> col;
  for (std::size_t n = 0; n < in.n; ++n) {
    if (bias)
      for (std::size_t oc = 0; oc < spec.out_channels; ++oc) std::fill_n(y.plane(n, oc), P, bias->data()[oc]);
    for (std::size_t g = 0; g < spec.groups; ++g) {
      im2col(x, n, g * in_g, in_g, spec, out, col);
      gemm_acc(out_g, K, P, w.data().data() + g * out_g * K, col.data(), y.plane(n, g * out_g));
    }
  }
  return y;
}

template <class T>
void conv3d_backward_input(const Tensor5<T>& dy, const Tensor5<T>& w, const ConvSpec& spec, Tensor5<T>& dx) {
  const Shape5 out = dy.shape();
  const std::size_t in_g = spec.in_channels / spec.groups, out_g = spec.out_channels / spec.groups;
  const std::size_t K = in_g * spec.grid.size(), P = out.volume();
  std::vector<T> col(K * P);
  for (std::size_t n = 0; n < out.n; ++n)
    for (std::size_t g = 0; g < spec.groups; ++g) {
      gemm_tn(out_g, K, P, w.data().data() + g * out_g * K, dy.plane(n, g * out_g), col.data());
      col2im(col, n, g * in_g, in_g, spec, out, dx);
    }
}

template <class T>
void conv3d_backward_weight(const Tensor5<T>& dy, const Tensor5<T>& x, const ConvSpec& spec, Tensor5<T>& dw) {
  const Shape5 out = dy.shape();
  const std::size_t in_g = spec.in_channels / spec.groups, out_g = spec.out_channels / spec.groups;
  const std::size_t K = in_g * spec.grid.size(), P = out.volume();
  std::vector<T> col;
  for (std::size_t n = 0; n < out.n; ++n)
    for (std::size_t g = 0; g < spec.groups; ++g) {
      im2col(x, n, g * in_g, in_g, spec, out, col);
      gemm_nt_acc(out_g, K, P, dy.plane(n, g * out_g), col.data(), dw.data().data() + g * out_g * K);
    }
}
}  // namespace kernels

// ---------------------------------------------------------------------------
// Differentiable ops

template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b, const ConvSpec& spec) {
  spec.validate();
  if (x.shape().c != spec.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(x.shape().c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape()) {
    throw ShapeError("conv3d: weight shape " + w.shape().str() + ", expected " + spec.weight_shape().str());
  }
  if (spec.bias != b.has_value()) throw ContractError("conv3d: bias operand does not match spec.bias");
  if (b && b->shape() != spec.bias_shape()) throw ShapeError("conv3d: bias shape " + b->shape().str());

  Tape<T>& tape = *x.tape;
  Tensor5<T> y = kernels::conv3d_forward(x.value(), w.value(), b ? &b->value() : nullptr, spec);
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return tape.record(std::move(y), inputs, [xi, wi, bi, spec](Tape<T>& t, const Tensor5<T>& dy) {
    if (t.requires_grad(xi)) kernels::conv3d_backward_input(dy, t.value(wi), spec, t.grad_slot(xi));
    if (t.requires_grad(wi)) kernels::conv3d_backward_weight(dy, t.value(xi), spec, t.grad_slot(wi));
    if (bi && t.requires_grad(*bi)) {
      auto& db = t.grad_slot(*bi);
      const Shape5 s = dy.shape();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
          const T* p = dy.plane(n, c);
          T acc{0};
          for (std::size_t i = 0; i < s.volume(); ++i) acc += p[i];
          db.data()[c] += acc;
        }
    }
  });
}

namespace detail {

template <class T, class F, class D>
Var<T> pointwise(Var<T> x, F&& f, D&& df) {
  Tensor5<T> y = map(x.value(), f);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(y), {x}, [xi, df](Tape<T>& t, const Tensor5<T>& dy) {
    auto& dx = t.grad_slot(xi);
    const auto xs = t.value(xi).data();
    for (std::size_t i = 0; i < xs.size(); ++i) dx.data()[i] += dy.data()[i] * df(xs[i]);
  });
}

}  // namespace detail

// Self-normalising activation constants.
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;

template <class T>
T selu_value(T x) {
  const T l = static_cast<T>(kSeluLambda), a = static_cast<T>(kSeluAlpha);
  return x > T{0} ? l * x : l * a * std::expm1(x);
}

template <class T>
Var<T> selu(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return selu_value(v); },
      [](T v) {
        const T l = static_cast<T>(kSeluLambda), a = static_cast<T>(kSeluAlpha);
        return v > T{0} ? l : l * a * std::exp(v);
      });
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return std::tanh(v); },
      [](T v) {
        const T th = std::tanh(v);
        return T{1} - th * th;
      });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tensor5<T> y = add(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(y), {a, b}, [ai, bi](Tape<T>& t, const Tensor5<T>& dy) {
    if (t.requires_grad(ai)) accumulate(t.grad_slot(ai), dy);
    if (t.requires_grad(bi)) accumulate(t.grad_slot(bi), dy);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tensor5<T> y = mul(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(y), {a, b}, [ai, bi](Tape<T>& t, const Tensor5<T>& dy) {
    if (t.requires_grad(ai)) accumulate(t.grad_slot(ai), mul(dy, t.value(bi)));
    if (t.requires_grad(bi)) accumulate(t.grad_slot(bi), mul(dy, t.value(ai)));
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  const std::size_t xi = x.id;
  return x.tape->record(scale(x.value(), s), {x},
                        [xi, s](Tape<T>& t, const Tensor5<T>& dy) { accumulate(t.grad_slot(xi), scale(dy, s)); });
}

template <class T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  const std::size_t xi = x.id;
  return x.tape->record(Tensor5<T>::scalar(acc), {x}, [xi](Tape<T>& t, const Tensor5<T>& dy) {
    auto& dx = t.grad_slot(xi);
    const T g = dy.data()[0];
    for (T& v : dx.data()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

// Softmax across the offset axis of an offset-major (q * C + c) channel layout.
template <class T>
Tensor5<T> softmax_offsets_value(const Tensor5<T>& z, std::size_t offsets) {
  const Shape5 s = z.shape();
  if (offsets == 0 || s.c % offsets != 0) {
    throw ShapeError("softmax over offsets: " + std::to_string(s.c) + " channels not divisible by " +
                     std::to_string(offsets) + " offsets");
  }
  const std::size_t C = s.c / offsets;
  const std::size_t V = s.volume();
  Tensor5<T> y(s);
  std::vector<T> m(V), acc(V);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      std::fill(m.begin(), m.end(), -std::numeric_limits<T>::infinity());
      for (std::size_t q = 0; q < offsets; ++q) {
        const T* zp = z.plane(n, q * C + c);
        for (std::size_t i = 0; i < V; ++i) m[i] = std::max(m[i], zp[i]);
      }
      std::fill(acc.begin(), acc.end(), T{0});
      for (std::size_t q = 0; q < offsets; ++q) {
        const T* zp = z.plane(n, q * C + c);
        T* yp = y.plane(n, q * C + c);
        for (std::size_t i = 0; i < V; ++i) {
          yp[i] = std::exp(zp[i] - m[i]);
          acc[i] += yp[i];
        }
      }
      for (std::size_t q = 0; q < offsets; ++q) {
        T* yp = y.plane(n, q * C + c);
        for (std::size_t i = 0; i < V; ++i) yp[i] /= acc[i];
      }
    }
  }
  return y;
}

template <class T>
Var<T> softmax_over_offsets(Var<T> z, std::size_t offsets) {
  Tensor5<T> y = softmax_offsets_value(z.value(), offsets);
  const std::size_t zi = z.id;
  // The backward pass reads the softmax output from this node itself.
  const std::size_t yi = z.tape->size();
  return z.tape->record(std::move(y), {z}, [zi, yi, offsets](Tape<T>& t, const Tensor5<T>& dy) {
    const Tensor5<T>& y = t.value(yi);
    const Shape5 s = y.shape();
    const std::size_t C = s.c / offsets;
    const std::size_t V = s.volume();
    auto& dz = t.grad_slot(zi);
    std::vector<T> dot(V);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        std::fill(dot.begin(), dot.end(), T{0});
        for (std::size_t q = 0; q < offsets; ++q) {
          const T* yp = y.plane(n, q * C + c);
          const T* gp = dy.plane(n, q * C + c);
          for (std::size_t i = 0; i < V; ++i) dot[i] += yp[i] * gp[i];
        }
        for (std::size_t q = 0; q < offsets; ++q) {
          const T* yp = y.plane(n, q * C + c);
          const T* gp = dy.plane(n, q * C + c);
          T* dp = dz.plane(n, q * C + c);
          for (std::size_t i = 0; i < V; ++i) dp[i] += yp[i] * (gp[i] - dot[i]);
        }
      }
  });
}

// Max pooling over a centred window; positions outside the volume are ignored.
template <class T>
Var<T> maxpool3d(Var<T> x, const OffsetGrid& window, Stride stride) {
  const Shape5 in = x.shape();
  const Extents e = window.extents();
  const auto k = window.kernel();
  if (in.numel() == 0 || static_cast<std::size_t>(k[0]) > in.t + 2 * static_cast<std::size_t>(e.t) ||
      static_cast<std::size_t>(k[1]) > in.h + 2 * static_cast<std::size_t>(e.h) ||
      static_cast<std::size_t>(k[2]) > in.w + 2 * static_cast<std::size_t>(e.w)) {
    throw ShapeError("maxpool3d: window " + window.str() + " larger than padded input " + in.str());
  }
  const Shape5 out = strided_shape(in, in.c, stride);
  Tensor5<T> y(out);
  std::vector<std::uint32_t> arg(out.numel());
  const Tensor5<T>& xv = x.value();
  std::size_t o = 0;
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t c = 0; c < in.c; ++c) {
      const T* xp = xv.plane(n, c);
      for (std::size_t ot = 0; ot < out.t; ++ot)
        for (std::size_t oh = 0; oh < out.h; ++oh)
          for (std::size_t ow = 0; ow < out.w; ++ow, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::uint32_t best_i = 0;
            for (const Offset& q : window.offsets()) {
              const long it = static_cast<long>(ot * stride.t) + q.dt;
              const long ih = static_cast<long>(oh * stride.h) + q.dh;
              const long iw = static_cast<long>(ow * stride.w) + q.dw;
              if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long>(in.t) || ih >= static_cast<long>(in.h) ||
                  iw >= static_cast<long>(in.w))
                continue;
              const auto idx = static_cast<std::uint32_t>((static_cast<std::size_t>(it) * in.h +
                                                           static_cast<std::size_t>(ih)) * in.w +
                                                          static_cast<std::size_t>(iw));
              if (xp[idx] > best) {
                best = xp[idx];
                best_i = idx;
              }
            }
            y.data()[o] = best;
            arg[o] = best_i;
          }
    }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(y), {x}, [xi, arg = std::move(arg)](Tape<T>& t, const Tensor5<T>& dy) {
    auto& dx = t.grad_slot(xi);
    const Shape5 s = dy.shape();
    const std::size_t ov = s.volume();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        T* dp = dx.plane(n, c);
        const T* gp = dy.plane(n, c);
        const std::uint32_t* ap = arg.data() + (n * s.c + c) * ov;
        for (std::size_t i = 0; i < ov; ++i) dp[ap[i]] += gp[i];
      }
  });
}

// (n, c, t, h, w) -> (n, c, 1, 1, 1)
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  const Shape5 s = x.shape();
  Tensor5<T> y({s.n, s.c, 1, 1, 1});
  const T inv = T{1} / static_cast<T>(s.volume());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T acc{0};
      for (std::size_t i = 0; i < s.volume(); ++i) acc += p[i];
      y(n, c, 0, 0, 0) = acc * inv;
    }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(y), {x}, [xi, inv](Tape<T>& t, const Tensor5<T>& dy) {
    auto& dx = t.grad_slot(xi);
    const Shape5 s = dx.shape();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        T* p = dx.plane(n, c);
        const T g = dy(n, c, 0, 0, 0) * inv;
        for (std::size_t i = 0; i < s.volume(); ++i) p[i] += g;
      }
  });
}

// x: (n, in, 1, 1, 1), w: (out, in, 1, 1, 1), b: (1, out, 1, 1, 1) -> (n, out, 1, 1, 1)
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b) {
  const Shape5 xs = x.shape(), ws = w.shape();
  if (xs.volume() != 1 || ws.volume() != 1 || ws.c != xs.c) {
    throw ShapeError("linear: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  if (b && b->shape() != Shape5{1, ws.n, 1, 1, 1}) throw ShapeError("linear: bias shape " + b->shape().str());
  const std::size_t N = xs.n, I = xs.c, O = ws.n;
  Tensor5<T> y({N, O, 1, 1, 1});
  const auto xv = x.value().data(), wv = w.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      T acc = b ? b->value().data()[o] : T{0};
      for (std::size_t i = 0; i < I; ++i) acc += wv[o * I + i] * xv[n * I + i];
      y.data()[n * O + o] = acc;
    }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return x.tape->record(std::move(y), inputs, [xi, wi, bi, N, I, O](Tape<T>& t, const Tensor5<T>& dy) {
    const auto g = dy.data();
    if (t.requires_grad(xi)) {
      auto dx = t.grad_slot(xi).data();
      const auto wv = t.value(wi).data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < I; ++i) dx[n * I + i] += g[n * O + o] * wv[o * I + i];
    }
    if (t.requires_grad(wi)) {
      auto dw = t.grad_slot(wi).data();
      const auto xv = t.value(xi).data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < I; ++i) dw[o * I + i] += g[n * O + o] * xv[n * I + i];
    }
    if (bi && t.requires_grad(*bi)) {
      auto db = t.grad_slot(*bi).data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) db[o] += g[n * O + o];
    }
  });
}

// Row-wise log-softmax of (n, classes, 1, 1, 1) logits.
template <class T>
std::vector<T> log_softmax_rows(const Tensor5<T>& logits) {
  const std::size_t N = logits.shape().n, K = logits.shape().c;
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * K;
    T m = *std::max_element(z, z + K);
    T acc{0};
    for (std::size_t k = 0; k < K; ++k) acc += std::exp(z[k] - m);
    const T lse = m + std::log(acc);
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = z[k] - lse;
  }
  return out;
}

namespace detail {
template <class T>
void check_labels(const Shape5& s, std::span<const int> labels, const char* op) {
  if (s.volume() != 1) throw ShapeError(std::string(op) + ": logits must be (n, classes, 1, 1, 1), got " + s.str());
  if (labels.size() != s.n) throw ContractError(std::string(op) + ": label count does not match batch");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= s.c) {
      throw ContractError(std::string(op) + ": label " + std::to_string(l) + " outside [0, " + std::to_string(s.c) +
                          ")");
    }
  }
}
}  // namespace detail

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Shape5 s = logits.shape();
  detail::check_labels<T>(s, labels, "cross_entropy");
  const std::size_t N = s.n, K = s.c;
  std::vector<T> lsm = log_softmax_rows(logits.value());
  T loss{0};
  for (std::size_t n = 0; n < N; ++n) loss -= lsm[n * K + static_cast<std::size_t>(labels[n])];
  loss /= static_cast<T>(N);
  const std::size_t zi = logits.id;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor5<T>::scalar(loss), {logits}, [zi, N, K, lsm = std::move(lsm), lab](Tape<T>& t, const Tensor5<T>& dy) {
        auto dz = t.grad_slot(zi).data();
        const T g = dy.data()[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k) {
            const T p = std::exp(lsm[n * K + k]);
            dz[n * K + k] += g * (p - (static_cast<std::size_t>(lab[n]) == k ? T{1} : T{0}));
          }
      });
}

// Mean binary cross-entropy of sigmoid(logits) against one-hot targets.
template <class T>
Var<T> binary_sigmoid_loss(Var<T> logits, std::span<const int> labels) {
  const Shape5 s = logits.shape();
  detail::check_labels<T>(s, labels, "binary_sigmoid_loss");
  const std::size_t N = s.n, K = s.c;
  const auto z = logits.value().data();
  T loss{0};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const T v = z[n * K + k];
      const T y = static_cast<std::size_t>(labels[n]) == k ? T{1} : T{0};
      // log(1 + exp(v)) - y * v, evaluated stably
      loss += std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v))) - y * v;
    }
  const T denom = static_cast<T>(N * K);
  loss /= denom;
  const std::size_t zi = logits.id;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(Tensor5<T>::scalar(loss), {logits}, [zi, N, K, denom, lab](Tape<T>& t, const Tensor5<T>& dy) {
    auto dz = t.grad_slot(zi).data();
    const auto z = t.value(zi).data();
    const T g = dy.data()[0] / denom;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const T p = T{1} / (T{1} + std::exp(-z[n * K + k]));
        dz[n * K + k] += g * (p - (static_cast<std::size_t>(lab[n]) == k ? T{1} : T{0}));
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalisation over (n, t, h, w) per channel.

template <class T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased
};

template <class T>
Var<T> batchnorm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps, BatchStats<T>* stats = nullptr) {
  const Shape5 s = x.shape();
  if (gamma.shape() != Shape5{1, s.c, 1, 1, 1} || beta.shape() != gamma.shape()) {
    throw ShapeError("batchnorm: scale/shift must be (1, C, 1, 1, 1) for input " + s.str());
  }
  const std::size_t C = s.c, V = s.volume();
  const T m = static_cast<T>(s.n * V);
  std::vector<T> mu(C, T{0}), var(C, T{0}), inv_std(C);
  const Tensor5<T>& xv = x.value();
  for (std::size_t c = 0; c < C; ++c) {
    T acc{0};
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < V; ++i) acc += p[i];
    }
    mu[c] = acc / m;
    T sq{0};
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < V; ++i) sq += (p[i] - mu[c]) * (p[i] - mu[c]);
    }
    var[c] = sq / m;
    inv_std[c] = T{1} / std::sqrt(var[c] + eps);
  }
  Tensor5<T> xhat(s), y(s);
  const auto gv = gamma.value().data(), bv = beta.value().data();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv.plane(n, c);
      T* h = xhat.plane(n, c);
      T* o = y.plane(n, c);
      for (std::size_t i = 0; i < V; ++i) {
        h[i] = (p[i] - mu[c]) * inv_std[c];
        o[i] = gv[c] * h[i] + bv[c];
      }
    }
  if (stats) *stats = {mu, var};
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(std::move(y), {x, gamma, beta},
                        [xi, gi, bi, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                                              const Tensor5<T>& dy) {
                          const Shape5 s = dy.shape();
                          const std::size_t C = s.c, V = s.volume();
                          std::vector<T> sum_dy(C, T{0}), sum_dy_xhat(C, T{0});
                          for (std::size_t n = 0; n < s.n; ++n)
                            for (std::size_t c = 0; c < C; ++c) {
                              const T* g = dy.plane(n, c);
                              const T* h = xhat.plane(n, c);
                              for (std::size_t i = 0; i < V; ++i) {
                                sum_dy[c] += g[i];
                                sum_dy_xhat[c] += g[i] * h[i];
                              }
                            }
                          if (t.requires_grad(gi)) {
                            auto dg = t.grad_slot(gi).data();
                            for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
                          }
                          if (t.requires_grad(bi)) {
                            auto db = t.grad_slot(bi).data();
                            for (std::size_t c = 0; c < C; ++c) db[c] += sum_dy[c];
                          }
                          if (t.requires_grad(xi)) {
                            auto& dx = t.grad_slot(xi);
                            const auto gv = t.value(gi).data();
                            for (std::size_t n = 0; n < s.n; ++n)
                              for (std::size_t c = 0; c < C; ++c) {
                                const T k = gv[c] * inv_std[c] / m;
                                const T* g = dy.plane(n, c);
                                const T* h = xhat.plane(n, c);
                                T* d = dx.plane(n, c);
                                for (std::size_t i = 0; i < V; ++i)
                                  d[i] += k * (m * g[i] - sum_dy[c] - h[i] * sum_dy_xhat[c]);
                              }
                          }
                        });
}

// Normalisation with fixed statistics (evaluation mode).
template <class T>
Var<T> batchnorm_eval(Var<T> x, Var<T> gamma, Var<T> beta, std::type_identity_t<std::span<const T>> mean,
                      std::type_identity_t<std::span<const T>> var, std::type_identity_t<T> eps) {
  const Shape5 s = x.shape();
  const std::size_t C = s.c, V = s.volume();
  if (mean.size() != C || var.size() != C) throw ShapeError("batchnorm: running statistics size mismatch");
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T{1} / std::sqrt(var[c] + eps);
  std::vector<T> mu(mean.begin(), mean.end());
  Tensor5<T> y(s);
  const auto gv = gamma.value().data(), bv = beta.value().data();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.value().plane(n, c);
      T* o = y.plane(n, c);
      for (std::size_t i = 0; i < V; ++i) o[i] = gv[c] * (p[i] - mu[c]) * inv_std[c] + bv[c];
    }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(std::move(y), {x, gamma, beta}, [xi, gi, bi, mu, inv_std](Tape<T>& t, const Tensor5<T>& dy) {
    const Shape5 s = dy.shape();
    const std::size_t C = s.c, V = s.volume();
    const auto gv = t.value(gi).data();
    const Tensor5<T>& xv = t.value(xi);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* g = dy.plane(n, c);
        const T* p = xv.plane(n, c);
        T sdy{0}, sdyh{0};
        for (std::size_t i = 0; i < V; ++i) {
          sdy += g[i];
          sdyh += g[i] * (p[i] - mu[c]) * inv_std[c];
        }
        if (t.requires_grad(gi)) t.grad_slot(gi).data()[c] += sdyh;
        if (t.requires_grad(bi)) t.grad_slot(bi).data()[c] += sdy;
        if (t.requires_grad(xi)) {
          T* d = t.grad_slot(xi).plane(n, c);
          for (std::size_t i = 0; i < V; ++i) d[i] += g[i] * gv[c] * inv_std[c];
        }
      }
  });
}

enum class NormMode { off, batch };

// Switchable per-channel normalisation with learned scale/shift and running statistics.
template <class T>
class BatchNorm3d {
 public:
  static constexpr T kEps = static_cast<T>(1e-5);
  static constexpr T kMomentum = static_cast<T>(0.1);

  BatchNorm3d() = default;
  BatchNorm3d(ParameterStore<T>& store, const std::string& name, std::size_t channels, NormMode mode,
              T init_scale = T{1})
      : mode_(mode), channels_(channels) {
    if (mode_ == NormMode::off) return;
    const Shape5 s{1, channels, 1, 1, 1};
    gamma_ = &store.add(name + ".scale", Tensor5<T>(s, init_scale), false);
    beta_ = &store.add(name + ".shift", Tensor5<T>::zeros(s), false);
    running_mean_ = &store.add_buffer(name + ".running_mean", Tensor5<T>::zeros(s));
    running_var_ = &store.add_buffer(name + ".running_var", Tensor5<T>::ones(s));
  }

  NormMode mode() const { return mode_; }
  std::size_t channels() const { return channels_; }
  std::size_t param_count() const { return mode_ == NormMode::off ? 0 : 2 * channels_; }

  Var<T> forward(Var<T> x, bool training) {
    if (mode_ == NormMode::off) return x;
    Tape<T>& tape = *x.tape;
    Var<T> g = tape.parameter(*gamma_), b = tape.parameter(*beta_);
    if (!training) {
      return batchnorm_eval(x, g, b, running_mean_->value.data(), running_var_->value.data(), kEps);
    }
    BatchStats<T> stats;
    Var<T> y = batchnorm_train(x, g, b, kEps, &stats);
    const T m = static_cast<T>(x.shape().n * x.shape().volume());
    const T unbias = m > T{1} ? m / (m - T{1}) : T{1};
    auto rm = running_mean_->value.data();
    auto rv = running_var_->value.data();
    for (std::size_t c = 0; c < channels_; ++c) {
      rm[c] = (T{1} - kMomentum) * rm[c] + kMomentum * stats.mean[c];
      rv[c] = (T{1} - kMomentum) * rv[c] + kMomentum * stats.var[c] * unbias;
    }
    return y;
  }

 private:
  NormMode mode_ = NormMode::off;
  std::size_t channels_ = 0;
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
  Buffer<T>* running_mean_ = nullptr;
  Buffer<T>* running_var_ = nullptr;
};

// ---------------------------------------------------------------------------
// Initialisation helpers

using Rng = std::mt19937_64;

template <class T>
Tensor5<T> uniform_tensor(Shape5 s, T lo, T hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Tensor5<T> x(s);
  for (T& v : x.data()) v = static_cast<T>(dist(rng));
  return x;
}

// He-style fan-in scaling: uniform in +-sqrt(6 / fan_in).
template <class T>
Tensor5<T> he_uniform(const ConvSpec& spec, Rng& rng) {
  const double fan_in = static_cast<double>((spec.in_channels / spec.groups) * spec.grid.size());
  const double bound = std::sqrt(6.0 / fan_in);
  return uniform_tensor<T>(spec.weight_shape(), static_cast<T>(-bound), static_cast<T>(bound), rng);
}

// Conv layer owning its parameters.
template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(ParameterStore<T>& store, const std::string& name, ConvSpec spec, Tensor5<T> init_weight)
      : spec_(std::move(spec)) {
    spec_.validate();
    if (init_weight.shape() != spec_.weight_shape()) throw ShapeError("Conv3d: init weight shape mismatch");
    weight_ = &store.add(name + ".weight", std::move(init_weight), true);
    if (spec_.bias) bias_ = &store.add(name + ".bias", Tensor5<T>::zeros(spec_.bias_shape()), false);
  }

  const ConvSpec& spec() const { return spec_; }
  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>* bias() const { return bias_; }

  Var<T> forward(Var<T> x) const {
    Tape<T>& tape = *x.tape;
    std::optional<Var<T>> b;
    if (bias_) b = tape.parameter(*bias_);
    return conv3d(x, tape.parameter(*weight_), b, spec_);
  }

 private:
  ConvSpec spec_;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

}  // namespace hob
