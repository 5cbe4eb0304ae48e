#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "driftadapt/errors.hpp"

namespace driftadapt {

using cplx = std::complex<double>;

enum class DType : std::uint8_t { real = 0, complex = 1 };

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::size_t elements() const { return static_cast<std::size_t>(channels) * pixels(); }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(channels) + ", " + std::to_string(height) + ", " +
           std::to_string(width) + ")";
  }
};

/// Dense channel-major, row-major 2-D tensor of doubles.
///
/// Complex tensors store interleaved (re, im) pairs, so the raw scalar view
/// of a complex tensor is its realification. Every inner product in the
/// library is taken over that raw view, which makes it Re<a, b>.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::real)
      : shape_(shape), dtype_(dtype), data_(scalar_count_for(shape, dtype), 0.0) {
    if (shape.channels < 0 || shape.height < 0 || shape.width < 0)
      throw ShapeError("negative tensor dimension " + shape.str());
  }
  Tensor(Shape shape, DType dtype, std::vector<double> data)
      : shape_(shape), dtype_(dtype), data_(std::move(data)) {
    if (data_.size() != scalar_count_for(shape, dtype))
      throw ShapeError("tensor payload length " + std::to_string(data_.size()) +
                       " does not match shape " + shape.str());
  }

  static Tensor zeros(Shape shape, DType dtype = DType::real) { return Tensor(shape, dtype); }
  static Tensor filled(Shape shape, double value) {
    Tensor t(shape);
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, t.dtype_); }

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  bool is_complex() const { return dtype_ == DType::complex; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  bool empty() const { return data_.empty(); }

  std::size_t elements() const { return shape_.elements(); }
  std::size_t scalar_count() const { return data_.size(); }

  std::span<double> raw() { return data_; }
  std::span<const double> raw() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& vec() const { return data_; }

  // Channel plane views (in scalars, so a complex plane is 2*H*W long).
  std::span<double> plane(int c) {
    const std::size_t n = plane_scalars();
    return {data_.data() + c * n, n};
  }
  std::span<const double> plane(int c) const {
    const std::size_t n = plane_scalars();
    return {data_.data() + c * n, n};
  }

  cplx* cdata() {
    require_complex();
    return reinterpret_cast<cplx*>(data_.data());
  }
  const cplx* cdata() const {
    require_complex();
    return reinterpret_cast<const cplx*>(data_.data());
  }

  double& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  double operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
  cplx& c_at(int c, int y, int x) { return cdata()[index(c, y, x)]; }
  cplx c_at(int c, int y, int x) const { return cdata()[index(c, y, x)]; }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  Tensor& operator+=(double s) {
    if (is_complex()) {
      for (std::size_t i = 0; i < data_.size(); i += 2) data_[i] += s;
    } else {
      for (double& v : data_) v += s;
    }
    return *this;
  }
  /// this += alpha * x
  Tensor& axpy(double alpha, const Tensor& x) {
    check_same(x, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * x.data_[i];
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  bool same_layout(const Tensor& o) const { return shape_ == o.shape_ && dtype_ == o.dtype_; }

  void check_same(const Tensor& o, const char* what) const {
    if (!same_layout(o))
      throw ShapeError(std::string(what) + ": layout mismatch " + shape_.str() + " vs " +
                       o.shape_.str());
  }

 private:
  static std::size_t scalar_count_for(Shape s, DType d) {
    return s.elements() * (d == DType::complex ? 2 : 1);
  }
  std::size_t plane_scalars() const { return shape_.pixels() * (is_complex() ? 2 : 1); }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x;
  }
  void require_complex() const {
    if (!is_complex()) throw DTypeError("complex access on a real tensor");
  }

  Shape shape_{};
  DType dtype_ = DType::real;
  std::vector<double> data_;
};

/// Re<a, b> over the raw scalar view.
inline double dot(const Tensor& a, const Tensor& b) {
  a.check_same(b, "dot");
  const double* pa = a.data();
  const double* pb = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.scalar_count(); ++i) s += pa[i] * pb[i];
  return s;
}

/// Conjugate-linear inner product sum(conj(a) * b); equals dot() for real tensors.
inline cplx cdot(const Tensor& a, const Tensor& b) {
  a.check_same(b, "cdot");
  if (!a.is_complex()) return {dot(a, b), 0.0};
  const cplx* pa = a.cdata();
  const cplx* pb = b.cdata();
  cplx s{};
  for (std::size_t i = 0; i < a.elements(); ++i) s += std::conj(pa[i]) * pb[i];
  return s;
}

inline double squared_norm(const Tensor& a) { return dot(a, a); }
inline double norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.raw().begin(), t.raw().end(), [](double v) { return std::isfinite(v); });
}

inline double mean(const Tensor& t) {
  if (t.scalar_count() == 0) return 0.0;
  double s = 0.0;
  for (double v : t.raw()) s += v;
  return s / static_cast<double>(t.scalar_count());
}

inline Tensor to_complex(const Tensor& t) {
  if (t.is_complex()) return t;
  Tensor out(t.shape(), DType::complex);
  cplx* o = out.cdata();
  for (std::size_t i = 0; i < t.elements(); ++i) o[i] = {t.data()[i], 0.0};
  return out;
}

inline Tensor real_part(const Tensor& t) {
  if (!t.is_complex()) return t;
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.elements(); ++i) out.data()[i] = t.cdata()[i].real();
  return out;
}

inline Tensor magnitude(const Tensor& t) {
  if (!t.is_complex()) return t;
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.elements(); ++i) out.data()[i] = std::abs(t.cdata()[i]);
  return out;
}

/// Complex C-channel tensor -> real 2C-channel tensor (re planes then im planes per channel).
inline Tensor complex_to_channels(const Tensor& t) {
  if (!t.is_complex()) throw DTypeError("complex_to_channels expects a complex tensor");
  const Shape s = t.shape();
  Tensor out({2 * s.channels, s.height, s.width});
  const std::size_t n = s.pixels();
  for (int c = 0; c < s.channels; ++c) {
    const cplx* src = t.cdata() + c * n;
    double* re = out.plane(2 * c).data();
    double* im = out.plane(2 * c + 1).data();
    for (std::size_t i = 0; i < n; ++i) {
      re[i] = src[i].real();
      im[i] = src[i].imag();
    }
  }
  return out;
}

/// Inverse of complex_to_channels.
inline Tensor channels_to_complex(const Tensor& t) {
  if (t.is_complex()) throw DTypeError("channels_to_complex expects a real tensor");
  const Shape s = t.shape();
  if (s.channels % 2 != 0) throw ShapeError("channels_to_complex needs an even channel count");
  Tensor out({s.channels / 2, s.height, s.width}, DType::complex);
  const std::size_t n = s.pixels();
  for (int c = 0; c < s.channels / 2; ++c) {
    const double* re = t.plane(2 * c).data();
    const double* im = t.plane(2 * c + 1).data();
    cplx* dst = out.cdata() + c * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] = {re[i], im[i]};
  }
  return out;
}

}  // namespace driftadapt
