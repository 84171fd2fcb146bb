#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hob/errors.hpp"

namespace hob {

// (batch, channel, time, height, width)
struct Shape5 {
  std::size_t n = 0, c = 0, t = 0, h = 0, w = 0;

  constexpr std::size_t numel() const { return n * c * t * h * w; }
  constexpr std::size_t volume() const { return t * h * w; }
  constexpr bool operator==(const Shape5&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << t << ',' << h << ',' << w << ')';
    return os.str();
  }
};

inline Shape5 scalar_shape() { return {1, 1, 1, 1, 1}; }

template <class T>
class Tensor5 {
 public:
  using value_type = T;

  Tensor5() = default;
  explicit Tensor5(Shape5 shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor5(Shape5 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor5 zeros(Shape5 s) { return Tensor5(s, T{0}); }
  static Tensor5 ones(Shape5 s) { return Tensor5(s, T{1}); }
  static Tensor5 scalar(T v) { return Tensor5(scalar_shape(), v); }

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t t, std::size_t h,
                     std::size_t w) const {
    return (((n * shape_.c + c) * shape_.t + t) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    return data_[offset(n, c, t, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t t, std::size_t h,
                      std::size_t w) const {
    return data_[offset(n, c, t, h, w)];
  }

  // Bounds-checked element access.
  const T& at(std::size_t n, std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    check_index(n, c, t, h, w);
    return (*this)(n, c, t, h, w);
  }
  T& at(std::size_t n, std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    check_index(n, c, t, h, w);
    return (*this)(n, c, t, h, w);
  }

  // Start of the (t,h,w) volume for sample n, channel c.
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.volume();
  }
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.volume(); }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor5<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor5<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  void check_index(std::size_t n, std::size_t c, std::size_t t, std::size_t h,
                   std::size_t w) const {
    if (n >= shape_.n || c >= shape_.c || t >= shape_.t || h >= shape_.h || w >= shape_.w) {
      std::ostringstream os;
      os << "index (" << n << ',' << c << ',' << t << ',' << h << ',' << w
         << ") out of bounds for shape " << shape_.str();
      throw IndexError(os.str());
    }
  }

  Shape5 shape_{};
  std::vector<T> data_;
};

// A kernel support offset (dt, dh, dw).
struct Offset {
  int dt = 0, dh = 0, dw = 0;
  constexpr bool operator==(const Offset&) const = default;
};

// Half-widths of a box-shaped offset grid.
struct Extents {
  int t = 0, h = 0, w = 0;
  constexpr bool operator==(const Extents&) const = default;
  constexpr bool covers(const Extents& o) const { return t >= o.t && h >= o.h && w >= o.w; }
};

// Full cartesian offset grid {|dt|<=Kt, |dh|<=Kh, |dw|<=Kw}, lexicographic (dt, dh, dw) order.
class OffsetGrid {
 public:
  OffsetGrid() : OffsetGrid(Extents{}) {}
  explicit OffsetGrid(Extents e) : extents_(e) {
    if (e.t < 0 || e.h < 0 || e.w < 0) throw ConfigError("negative offset grid extent");
    offsets_.reserve(size());
    for (int dt = -e.t; dt <= e.t; ++dt)
      for (int dh = -e.h; dh <= e.h; ++dh)
        for (int dw = -e.w; dw <= e.w; ++dw) offsets_.push_back({dt, dh, dw});
  }
  OffsetGrid(int kt, int kh, int kw) : OffsetGrid(Extents{kt, kh, kw}) {}

  // From odd kernel sizes, e.g. (3, 5, 5).
  static OffsetGrid from_kernel(int st, int sh, int sw) {
    if (st < 1 || sh < 1 || sw < 1 || st % 2 == 0 || sh % 2 == 0 || sw % 2 == 0) {
      throw ConfigError("kernel sizes must be odd and positive, got " + std::to_string(st) + "x" +
                        std::to_string(sh) + "x" + std::to_string(sw));
    }
    return OffsetGrid(Extents{st / 2, sh / 2, sw / 2});
  }

  // Parses "TxHxW", e.g. "3x5x5".
  static OffsetGrid parse(std::string_view text) {
    std::array<int, 3> v{};
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
      std::size_t end = text.find('x', pos);
      if ((i < 2) != (end != std::string_view::npos)) {
        throw ConfigError("malformed kernel size '" + std::string(text) + "', expected TxHxW");
      }
      auto part = text.substr(pos, i < 2 ? end - pos : std::string_view::npos);
      if (part.empty() || !std::all_of(part.begin(), part.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        throw ConfigError("malformed kernel size '" + std::string(text) + "', expected TxHxW");
      }
      v[static_cast<std::size_t>(i)] = std::stoi(std::string(part));
      pos = end + 1;
    }
    return from_kernel(v[0], v[1], v[2]);
  }

  const Extents& extents() const { return extents_; }
  std::size_t size() const {
    return static_cast<std::size_t>((2 * extents_.t + 1) * (2 * extents_.h + 1) * (2 * extents_.w + 1));
  }
  std::span<const Offset> offsets() const { return offsets_; }
  const Offset& operator[](std::size_t i) const { return offsets_[i]; }

  std::array<int, 3> kernel() const {
    return {2 * extents_.t + 1, 2 * extents_.h + 1, 2 * extents_.w + 1};
  }
  std::string str() const {
    auto k = kernel();
    return std::to_string(k[0]) + "x" + std::to_string(k[1]) + "x" + std::to_string(k[2]);
  }

  bool operator==(const OffsetGrid& o) const { return extents_ == o.extents_; }

 private:
  Extents extents_;
  std::vector<Offset> offsets_;
};

// A spatiotemporal position p = (t, h, w).
struct Position {
  std::size_t t = 0, h = 0, w = 0;
};

// Values x[n, c, p + q] for every q in the grid, zero outside the volume.
template <class T>
std::vector<T> padded_gather(const Tensor5<T>& x, std::size_t n, std::size_t c, Position p,
                             const OffsetGrid& grid) {
  const Shape5& s = x.shape();
  if (n >= s.n || c >= s.c || p.t >= s.t || p.h >= s.h || p.w >= s.w) {
    throw IndexError("padded_gather position outside tensor of shape " + s.str());
  }
  std::vector<T> out;
  out.reserve(grid.size());
  for (const Offset& q : grid.offsets()) {
    const long t = static_cast<long>(p.t) + q.dt;
    const long h = static_cast<long>(p.h) + q.dh;
    const long w = static_cast<long>(p.w) + q.dw;
    const bool inside = t >= 0 && h >= 0 && w >= 0 && t < static_cast<long>(s.t) &&
                        h < static_cast<long>(s.h) && w < static_cast<long>(s.w);
    out.push_back(inside ? x(n, c, static_cast<std::size_t>(t), static_cast<std::size_t>(h),
                             static_cast<std::size_t>(w))
                         : T{0});
  }
  return out;
}

namespace detail {
template <class T>
void require_same_shape(const Tensor5<T>& a, const Tensor5<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}
}  // namespace detail

template <class T, class F>
Tensor5<T> map(const Tensor5<T>& x, F&& f) {
  Tensor5<T> y(x.shape());
  auto src = x.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return y;
}

template <class T>
Tensor5<T> add(const Tensor5<T>& a, const Tensor5<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor5<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  return y;
}

template <class T>
Tensor5<T> mul(const Tensor5<T>& a, const Tensor5<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor5<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  return y;
}

template <class T>
Tensor5<T> scale(const Tensor5<T>& x, T s) {
  return map(x, [s](T v) { return v * s; });
}

// dst += src
template <class T>
void accumulate(Tensor5<T>& dst, const Tensor5<T>& src) {
  detail::require_same_shape(dst, src, "accumulate");
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class T>
T max_abs_diff(const Tensor5<T>& a, const Tensor5<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace hob
