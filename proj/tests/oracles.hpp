#pragma once

// Naive reference implementations used only by tests. They share no code with the
// library kernels beyond the Tensor5 container.

#include <cstdint>
#include <random>

#include "hob/tensor.hpp"

namespace oracle {

using hob::Shape5;
using hob::Tensor5;

inline Tensor5<double> randn(Shape5 s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sd);
  Tensor5<double> x(s);
  for (double& v : x.data()) v = d(rng);
  return x;
}

inline double at_or_zero(const Tensor5<double>& x, long n, long c, long t, long h, long w) {
  const Shape5 s = x.shape();
  if (t < 0 || h < 0 || w < 0 || t >= static_cast<long>(s.t) || h >= static_cast<long>(s.h) ||
      w >= static_cast<long>(s.w))
    return 0.0;
  return x(static_cast<std::size_t>(n), static_cast<std::size_t>(c), static_cast<std::size_t>(t),
           static_cast<std::size_t>(h), static_cast<std::size_t>(w));
}

// y[n,o,p] = b[o] + sum_{i in group(o)} sum_{kt,kh,kw} W[o,i,kt,kh,kw] x[n, i, p*s + k - K]
inline Tensor5<double> conv3d(const Tensor5<double>& x, const Tensor5<double>& wt, const Tensor5<double>* bias,
                              std::size_t groups, std::size_t st, std::size_t sh, std::size_t sw) {
  const Shape5 xs = x.shape(), ws = wt.shape();
  const std::size_t O = ws.n, Ig = ws.c;
  const long Kt = static_cast<long>(ws.t / 2), Kh = static_cast<long>(ws.h / 2), Kw = static_cast<long>(ws.w / 2);
  const std::size_t OT = (xs.t + st - 1) / st, OH = (xs.h + sh - 1) / sh, OW = (xs.w + sw - 1) / sw;
  Tensor5<double> y({xs.n, O, OT, OH, OW});
  const std::size_t Og = O / groups;
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t t = 0; t < OT; ++t)
        for (std::size_t h = 0; h < OH; ++h)
          for (std::size_t w = 0; w < OW; ++w) {
            double acc = bias ? bias->data()[o] : 0.0;
            for (std::size_t i = 0; i < Ig; ++i)
              for (long a = 0; a < static_cast<long>(ws.t); ++a)
                for (long b = 0; b < static_cast<long>(ws.h); ++b)
                  for (long c = 0; c < static_cast<long>(ws.w); ++c)
                    acc += wt(o, i, static_cast<std::size_t>(a), static_cast<std::size_t>(b),
                              static_cast<std::size_t>(c)) *
                           at_or_zero(x, static_cast<long>(n), static_cast<long>((o / Og) * Ig + i),
                                      static_cast<long>(t * st) + a - Kt, static_cast<long>(h * sh) + b - Kh,
                                      static_cast<long>(w * sw) + c - Kw);
            y(n, o, t, h, w) = acc;
          }
  return y;
}

// y[n,c,p] = sum_{q} w[n, q*C + c, p] x[n, c, p+q], offsets in lexicographic order.
inline Tensor5<double> dynamic_apply(const Tensor5<double>& x, const Tensor5<double>& w, int Kt, int Kh, int Kw) {
  const Shape5 s = x.shape();
  Tensor5<double> y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t t = 0; t < s.t; ++t)
        for (std::size_t h = 0; h < s.h; ++h)
          for (std::size_t ww = 0; ww < s.w; ++ww) {
            double acc = 0.0;
            std::size_t q = 0;
            for (int a = -Kt; a <= Kt; ++a)
              for (int b = -Kh; b <= Kh; ++b)
                for (int d = -Kw; d <= Kw; ++d, ++q)
                  acc += w(n, q * s.c + c, t, h, ww) *
                         at_or_zero(x, static_cast<long>(n), static_cast<long>(c), static_cast<long>(t) + a,
                                    static_cast<long>(h) + b, static_cast<long>(ww) + d);
            y(n, c, t, h, ww) = acc;
          }
  return y;
}

// Single-convolution generator as a literal double sum:
// w_{p,q}[c] = sum_{r in R'} sum_{c'} Theta[q*C + c, c', r] x_{p+r}[c'].
inline Tensor5<double> singleconv_logits(const Tensor5<double>& x, const Tensor5<double>& theta, std::size_t R,
                                         int Ct, int Ch, int Cw) {
  const Shape5 s = x.shape();
  const std::size_t C = s.c;
  Tensor5<double> out({s.n, C * R, s.t, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t q = 0; q < R; ++q)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < s.t; ++t)
          for (std::size_t h = 0; h < s.h; ++h)
            for (std::size_t w = 0; w < s.w; ++w) {
              double acc = 0.0;
              std::size_t r = 0;
              for (int a = -Ct; a <= Ct; ++a)
                for (int b = -Ch; b <= Ch; ++b)
                  for (int d = -Cw; d <= Cw; ++d, ++r)
                    for (std::size_t cp = 0; cp < C; ++cp)
                      acc += theta.data()[((q * C + c) * C + cp) * ((2 * Ct + 1) * (2 * Ch + 1) * (2 * Cw + 1)) + r] *
                             at_or_zero(x, static_cast<long>(n), static_cast<long>(cp), static_cast<long>(t) + a,
                                        static_cast<long>(h) + b, static_cast<long>(w) + d);
              out(n, q * C + c, t, h, w) = acc;
            }
  return out;
}

// Zero-padded box average of x over a (2Kt+1)(2Kh+1)(2Kw+1) window (divides by the full window size).
inline Tensor5<double> box_average(const Tensor5<double>& x, int Kt, int Kh, int Kw) {
  const Shape5 s = x.shape();
  const double size = (2.0 * Kt + 1) * (2.0 * Kh + 1) * (2.0 * Kw + 1);
  Tensor5<double> y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t t = 0; t < s.t; ++t)
        for (std::size_t h = 0; h < s.h; ++h)
          for (std::size_t w = 0; w < s.w; ++w) {
            double acc = 0.0;
            for (int a = -Kt; a <= Kt; ++a)
              for (int b = -Kh; b <= Kh; ++b)
                for (int d = -Kw; d <= Kw; ++d)
                  acc += at_or_zero(x, static_cast<long>(n), static_cast<long>(c), static_cast<long>(t) + a,
                                    static_cast<long>(h) + b, static_cast<long>(w) + d);
            y(n, c, t, h, w) = acc / size;
          }
  return y;
}

}  // namespace oracle
