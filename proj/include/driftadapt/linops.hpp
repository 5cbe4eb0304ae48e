#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "driftadapt/cg.hpp"
#include "driftadapt/fft.hpp"
#include "driftadapt/kspace_mask.hpp"
#include "driftadapt/tensor.hpp"

namespace driftadapt {

enum class OperatorKind { identity, blur, downsample, fourier_mask, composite };

inline const char* to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::identity: return "identity";
    case OperatorKind::blur: return "blur";
    case OperatorKind::downsample: return "downsample";
    case OperatorKind::fourier_mask: return "fourier_mask";
    case OperatorKind::composite: return "composite";
  }
  return "?";
}

class LinearOperator;
using Operator = std::shared_ptr<const LinearOperator>;

/// A forward model A(sigma). Immutable once built; the parameter vector
/// sigma can be swapped with with_params(), which returns a new operator.
///
/// Operators are shape-polymorphic where that makes sense (convolutions
/// accept any image size); out_shape() maps an input shape to the output.
/// Derivatives with respect to sigma come in three flavours:
///   d_apply      (dA . dir) x
///   d_adjoint    (dA . dir)^H y
///   sigma_vjp    g_j = Re<v, (dA/dsigma_j) x>
class LinearOperator {
 public:
  virtual ~LinearOperator() = default;

  virtual OperatorKind kind() const = 0;
  virtual DType in_dtype() const = 0;
  virtual DType out_dtype() const { return in_dtype(); }
  /// Throws ShapeError if the operator cannot act on inputs of this shape.
  virtual Shape out_shape(Shape in) const = 0;
  /// Inverse of out_shape for operators with a fixed input shape; otherwise
  /// derived from the measurement shape.
  virtual Shape in_shape(Shape out) const = 0;

  virtual Tensor apply(const Tensor& x) const = 0;
  virtual Tensor adjoint(const Tensor& y) const = 0;

  virtual std::vector<double> params() const { return {}; }
  std::size_t num_params() const { return params().size(); }
  virtual Operator with_params(std::span<const double> sigma) const;

  virtual Tensor d_apply(const Tensor& x, std::span<const double> dir) const;
  virtual Tensor d_adjoint(const Tensor& y, std::span<const double> dir) const;
  virtual std::vector<double> sigma_vjp(const Tensor& x, const Tensor& v) const;

  /// When A^H A = F^-1 diag(s) F for the unitary 2-D DFT on planes of
  /// `in` shape, returns s in DFT index order (one plane, shared by channels).
  virtual std::optional<std::vector<double>> gram_spectrum(Shape /*in*/) const {
    return std::nullopt;
  }

  virtual std::string describe() const { return to_string(kind()); }

 protected:
  void check_input(const Tensor& x) const {
    if (x.dtype() != in_dtype())
      throw DTypeError(describe() + ": input dtype mismatch");
    (void)out_shape(x.shape());
  }
  void check_output(const Tensor& y) const {
    if (y.dtype() != out_dtype())
      throw DTypeError(describe() + ": measurement dtype mismatch");
    (void)in_shape(y.shape());
  }
  [[noreturn]] void no_params() const {
    throw std::logic_error(describe() + " has no sigma parameters");
  }
};

inline Operator LinearOperator::with_params(std::span<const double> sigma) const {
  if (!sigma.empty()) no_params();
  throw std::logic_error(describe() + ": with_params unsupported");
}
inline Tensor LinearOperator::d_apply(const Tensor&, std::span<const double>) const { no_params(); }
inline Tensor LinearOperator::d_adjoint(const Tensor&, std::span<const double>) const { no_params(); }
inline std::vector<double> LinearOperator::sigma_vjp(const Tensor&, const Tensor&) const {
  no_params();
}

// ---------------------------------------------------------------------------
// Free-function API.

inline Tensor apply(const LinearOperator& A, const Tensor& x) { return A.apply(x); }
inline Tensor adjoint(const LinearOperator& A, const Tensor& y) { return A.adjoint(y); }
inline Tensor gram(const LinearOperator& A, const Tensor& x) { return A.adjoint(A.apply(x)); }

/// Jacobian-vector product d(A(sigma) x)/dsigma . dir.
inline Tensor d_apply_dsigma(const LinearOperator& A, const Tensor& x,
                             std::span<const double> dir) {
  if (A.num_params() == 0) throw std::logic_error(A.describe() + " has no sigma parameters");
  if (dir.size() != A.num_params()) throw ShapeError("sigma direction has wrong length");
  return A.d_apply(x, dir);
}

// ---------------------------------------------------------------------------
// Identity.

class IdentityOperator final : public LinearOperator {
 public:
  explicit IdentityOperator(DType dtype = DType::real) : dtype_(dtype) {}
  OperatorKind kind() const override { return OperatorKind::identity; }
  DType in_dtype() const override { return dtype_; }
  Shape out_shape(Shape in) const override { return in; }
  Shape in_shape(Shape out) const override { return out; }
  Tensor apply(const Tensor& x) const override {
    check_input(x);
    return x;
  }
  Tensor adjoint(const Tensor& y) const override {
    check_output(y);
    return y;
  }
  Operator with_params(std::span<const double> sigma) const override {
    if (!sigma.empty()) no_params();
    return std::make_shared<IdentityOperator>(dtype_);
  }
  std::optional<std::vector<double>> gram_spectrum(Shape in) const override {
    return std::vector<double>(in.pixels(), 1.0);
  }

 private:
  DType dtype_;
};

inline Operator make_identity(DType dtype = DType::real) {
  return std::make_shared<IdentityOperator>(dtype);
}

// ---------------------------------------------------------------------------
// Periodic convolution helpers.

namespace detail {

// out[i, j] += w * in[(i - dy) mod H, (j - dx) mod W] on one real plane.
inline void shift_add(double* out, const double* in, int h, int w, int dy, int dx, double weight) {
  dy = ((dy % h) + h) % h;
  dx = ((dx % w) + w) % w;
  for (int i = 0; i < h; ++i) {
    int si = i - dy;
    if (si < 0) si += h;
    const double* src = in + static_cast<std::size_t>(si) * w;
    double* dst = out + static_cast<std::size_t>(i) * w;
    // dst[j] += src[j - dx]: j in [dx, w) reads src[0, w - dx); j in [0, dx) reads src[w - dx, w).
    const double* s1 = src;
    double* d1 = dst + dx;
    for (int j = 0; j < w - dx; ++j) d1[j] += weight * s1[j];
    const double* s2 = src + (w - dx);
    for (int j = 0; j < dx; ++j) dst[j] += weight * s2[j];
  }
}

// sum_ij a[i, j] * b[(i - dy) mod H, (j - dx) mod W]
inline double shifted_dot(const double* a, const double* b, int h, int w, int dy, int dx) {
  dy = ((dy % h) + h) % h;
  dx = ((dx % w) + w) % w;
  double s = 0.0;
  for (int i = 0; i < h; ++i) {
    int si = i - dy;
    if (si < 0) si += h;
    const double* src = b + static_cast<std::size_t>(si) * w;
    const double* row = a + static_cast<std::size_t>(i) * w;
    for (int j = 0; j < w - dx; ++j) s += row[dx + j] * src[j];
    for (int j = 0; j < dx; ++j) s += row[j] * src[w - dx + j];
  }
  return s;
}

inline void require_real(const Tensor& t, const std::string& who) {
  if (t.is_complex()) throw DTypeError(who + " acts on real tensors");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Circular 2-D convolution with an odd square kernel centred at the origin:
//   (A x)[i, j] = sum_{a,b} K[a, b] x[i - (a - r), j - (b - r)].

class ConvolutionOperator final : public LinearOperator {
 public:
  ConvolutionOperator(int size, std::vector<double> kernel) : size_(size), kernel_(std::move(kernel)) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("blur kernel size must be odd");
    if (kernel_.size() != static_cast<std::size_t>(size) * size)
      throw ShapeError("blur kernel has " + std::to_string(kernel_.size()) + " taps, expected " +
                       std::to_string(size * size));
  }

  OperatorKind kind() const override { return OperatorKind::blur; }
  DType in_dtype() const override { return DType::real; }
  Shape out_shape(Shape in) const override { return in; }
  Shape in_shape(Shape out) const override { return out; }
  int size() const { return size_; }
  const std::vector<double>& kernel() const { return kernel_; }

  Tensor apply(const Tensor& x) const override {
    detail::require_real(x, "blur");
    return convolve(x, kernel_, +1);
  }
  Tensor adjoint(const Tensor& y) const override {
    detail::require_real(y, "blur");
    return convolve(y, kernel_, -1);
  }

  std::vector<double> params() const override { return kernel_; }
  Operator with_params(std::span<const double> sigma) const override {
    return std::make_shared<ConvolutionOperator>(size_, std::vector<double>(sigma.begin(), sigma.end()));
  }
  // Linear in sigma: the derivative along dir is convolution with dir.
  Tensor d_apply(const Tensor& x, std::span<const double> dir) const override {
    detail::require_real(x, "blur");
    return convolve(x, std::vector<double>(dir.begin(), dir.end()), +1);
  }
  Tensor d_adjoint(const Tensor& y, std::span<const double> dir) const override {
    detail::require_real(y, "blur");
    return convolve(y, std::vector<double>(dir.begin(), dir.end()), -1);
  }
  std::vector<double> sigma_vjp(const Tensor& x, const Tensor& v) const override {
    x.check_same(v, "blur sigma_vjp");
    const Shape s = x.shape();
    const int r = size_ / 2;
    std::vector<double> g(kernel_.size(), 0.0);
    for (int c = 0; c < s.channels; ++c)
      for (int a = 0; a < size_; ++a)
        for (int b = 0; b < size_; ++b)
          g[a * size_ + b] += detail::shifted_dot(v.plane(c).data(), x.plane(c).data(), s.height,
                                                  s.width, a - r, b - r);
    return g;
  }

  std::optional<std::vector<double>> gram_spectrum(Shape in) const override {
    return transfer_power(in.height, in.width);
  }

  /// DFT of the kernel wrapped onto an h x w grid, in DFT index order (unnormalized).
  std::vector<cplx> transfer_function(int h, int w) const {
    Tensor k({1, h, w}, DType::complex);
    const int r = size_ / 2;
    for (int a = 0; a < size_; ++a)
      for (int b = 0; b < size_; ++b) {
        const int yy = ((a - r) % h + h) % h;
        const int xx = ((b - r) % w + w) % w;
        k.c_at(0, yy, xx) += kernel_[a * size_ + b];
      }
    const Tensor kf = fft2(k);
    const double scale = std::sqrt(static_cast<double>(h) * w);
    std::vector<cplx> hf(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < hf.size(); ++i) hf[i] = kf.cdata()[i] * scale;
    return hf;
  }
  std::vector<double> transfer_power(int h, int w) const {
    const auto hf = transfer_function(h, w);
    std::vector<double> p(hf.size());
    for (std::size_t i = 0; i < hf.size(); ++i) p[i] = std::norm(hf[i]);
    return p;
  }

  std::string describe() const override { return "blur(" + std::to_string(size_) + "x" + std::to_string(size_) + ")"; }

 private:
  Tensor convolve(const Tensor& x, const std::vector<double>& k, int sign) const {
    const Shape s = x.shape();
    Tensor out(s);
    const int r = size_ / 2;
    for (int c = 0; c < s.channels; ++c)
      for (int a = 0; a < size_; ++a)
        for (int b = 0; b < size_; ++b) {
          const double wgt = k[a * size_ + b];
          if (wgt == 0.0) continue;
          detail::shift_add(out.plane(c).data(), x.plane(c).data(), s.height, s.width, sign * (a - r),
                            sign * (b - r), wgt);
        }
    return out;
  }

  int size_;
  std::vector<double> kernel_;
};

/// Unit-mass anti-aliased line of length `size` through the kernel centre at
/// `angle_deg` from the horizontal axis (counter-clockwise, rows grow down).
/// Coverage of the width-1 segment is measured by 32x32 supersampling per pixel.
inline std::vector<double> motion_blur_kernel(int size, double angle_deg) {
  if (size < 1 || size % 2 == 0) throw std::invalid_argument("motion blur size must be odd");
  if (!(angle_deg >= 0.0 && angle_deg < 180.0))
    throw std::invalid_argument("motion blur angle must lie in [0, 180)");
  if (size == 1) return {1.0};
  constexpr int kSub = 32;
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double ux = std::cos(th);
  const double uy = std::sin(th);  // y axis pointing up
  const double half_len = 0.5 * size;
  const int r = size / 2;
  std::vector<double> k(static_cast<std::size_t>(size) * size, 0.0);
  double total = 0.0;
  for (int a = 0; a < size; ++a)
    for (int b = 0; b < size; ++b) {
      int hits = 0;
      for (int si = 0; si < kSub; ++si)
        for (int sj = 0; sj < kSub; ++sj) {
          const double px = (b - r) + (sj + 0.5) / kSub - 0.5;
          const double py = -((a - r) + (si + 0.5) / kSub - 0.5);
          const double along = px * ux + py * uy;
          const double across = -px * uy + py * ux;
          if (std::abs(along) <= half_len && std::abs(across) <= 0.5) ++hits;
        }
      k[a * size + b] = hits;
      total += hits;
    }
  for (double& v : k) v /= total;
  return k;
}

inline Operator make_motion_blur(int size, double angle_deg) {
  return std::make_shared<ConvolutionOperator>(size, motion_blur_kernel(size, angle_deg));
}

inline Operator make_blur(int size, std::vector<double> kernel) {
  return std::make_shared<ConvolutionOperator>(size, std::move(kernel));
}

// ---------------------------------------------------------------------------
// Strided anti-aliased downsampling:
//   (A x)[i, j] = sum_{a,b} K[a, b] x[f i + a - o, f j + b - o]   (periodic),
// with the L x L filter centred on the output sample at f i + (f - 1)/2.

enum class DownsampleKernel { bilinear, bicubic };

inline const char* to_string(DownsampleKernel k) {
  return k == DownsampleKernel::bilinear ? "bilinear" : "bicubic";
}

/// Separable unit-mass anti-alias filter for decimation by `factor`:
/// tent (bilinear) or Keys cubic with a = -0.5, support stretched by factor.
inline std::vector<double> downsample_filter_1d(int factor, DownsampleKernel kind) {
  const double support = kind == DownsampleKernel::bilinear ? 1.0 : 2.0;
  auto profile = [kind](double t) {
    t = std::abs(t);
    if (kind == DownsampleKernel::bilinear) return std::max(0.0, 1.0 - t);
    constexpr double a = -0.5;
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
  };
  // Taps sit at offsets d = j - (L - 1)/2 from the output centre, |d| < support * factor.
  const double reach = support * factor;
  int len = static_cast<int>(std::ceil(2.0 * reach));
  if ((len - factor) % 2 != 0) ++len;
  std::vector<double> taps;
  for (int j = 0; j < len; ++j) taps.push_back(profile((j - (len - 1) / 2.0) / factor));
  while (!taps.empty() && taps.front() == 0.0 && taps.back() == 0.0 && taps.size() > 2) {
    taps.erase(taps.begin());
    taps.pop_back();
  }
  double s = 0.0;
  for (double t : taps) s += t;
  for (double& t : taps) t /= s;
  return taps;
}

class DownsampleOperator final : public LinearOperator {
 public:
  DownsampleOperator(int factor, int taps, std::vector<double> filter)
      : factor_(factor), taps_(taps), filter_(std::move(filter)) {
    if (factor < 2) throw std::invalid_argument("downsample factor must be >= 2");
    if (filter_.size() != static_cast<std::size_t>(taps) * taps)
      throw ShapeError("downsample filter size mismatch");
    if ((taps - factor) % 2 != 0) throw std::invalid_argument("filter length parity must match factor");
    offset_ = (taps - factor) / 2;
  }

  OperatorKind kind() const override { return OperatorKind::downsample; }
  DType in_dtype() const override { return DType::real; }
  Shape out_shape(Shape in) const override {
    if (in.height % factor_ != 0 || in.width % factor_ != 0)
      throw ShapeError("downsample factor " + std::to_string(factor_) + " does not divide " + in.str());
    return {in.channels, in.height / factor_, in.width / factor_};
  }
  Shape in_shape(Shape out) const override {
    return {out.channels, out.height * factor_, out.width * factor_};
  }
  int factor() const { return factor_; }
  int taps() const { return taps_; }

  Tensor apply(const Tensor& x) const override {
    detail::require_real(x, "downsample");
    return forward(x, filter_);
  }
  Tensor adjoint(const Tensor& y) const override {
    detail::require_real(y, "downsample");
    return transpose(y, filter_);
  }

  std::vector<double> params() const override { return filter_; }
  Operator with_params(std::span<const double> sigma) const override {
    return std::make_shared<DownsampleOperator>(factor_, taps_, std::vector<double>(sigma.begin(), sigma.end()));
  }
  Tensor d_apply(const Tensor& x, std::span<const double> dir) const override {
    return forward(x, std::vector<double>(dir.begin(), dir.end()));
  }
  Tensor d_adjoint(const Tensor& y, std::span<const double> dir) const override {
    return transpose(y, std::vector<double>(dir.begin(), dir.end()));
  }
  std::vector<double> sigma_vjp(const Tensor& x, const Tensor& v) const override {
    const Shape os = out_shape(x.shape());
    if (v.shape() != os) throw ShapeError("downsample sigma_vjp cotangent shape");
    const Shape s = x.shape();
    std::vector<double> g(filter_.size(), 0.0);
    for (int c = 0; c < s.channels; ++c)
      for (int i = 0; i < os.height; ++i)
        for (int j = 0; j < os.width; ++j) {
          const double vv = v(c, i, j);
          for (int a = 0; a < taps_; ++a) {
            const int yy = wrap(factor_ * i + a - offset_, s.height);
            for (int b = 0; b < taps_; ++b)
              g[a * taps_ + b] += vv * x(c, yy, wrap(factor_ * j + b - offset_, s.width));
          }
        }
    return g;
  }

  std::string describe() const override { return "downsample(x" + std::to_string(factor_) + ")"; }

 private:
  static int wrap(int v, int n) { return ((v % n) + n) % n; }

  Tensor forward(const Tensor& x, const std::vector<double>& k) const {
    const Shape os = out_shape(x.shape());
    const Shape s = x.shape();
    Tensor out(os);
    for (int c = 0; c < s.channels; ++c)
      for (int i = 0; i < os.height; ++i)
        for (int j = 0; j < os.width; ++j) {
          double acc = 0.0;
          for (int a = 0; a < taps_; ++a) {
            const int yy = wrap(factor_ * i + a - offset_, s.height);
            for (int b = 0; b < taps_; ++b)
              acc += k[a * taps_ + b] * x(c, yy, wrap(factor_ * j + b - offset_, s.width));
          }
          out(c, i, j) = acc;
        }
    return out;
  }

  // Zero insertion followed by the flipped filter, written as a scatter.
  Tensor transpose(const Tensor& y, const std::vector<double>& k) const {
    const Shape s = in_shape(y.shape());
    Tensor out(s);
    for (int c = 0; c < s.channels; ++c)
      for (int i = 0; i < y.height(); ++i)
        for (int j = 0; j < y.width(); ++j) {
          const double vv = y(c, i, j);
          for (int a = 0; a < taps_; ++a) {
            const int yy = wrap(factor_ * i + a - offset_, s.height);
            for (int b = 0; b < taps_; ++b)
              out(c, yy, wrap(factor_ * j + b - offset_, s.width)) += k[a * taps_ + b] * vv;
          }
        }
    return out;
  }

  int factor_;
  int taps_;
  int offset_ = 0;
  std::vector<double> filter_;
};

inline Operator make_downsample(int factor, DownsampleKernel kind) {
  if (factor < 2) throw std::invalid_argument("downsample factor must be >= 2");
  const auto f1 = downsample_filter_1d(factor, kind);
  const int n = static_cast<int>(f1.size());
  std::vector<double> k(static_cast<std::size_t>(n) * n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) k[a * n + b] = f1[a] * f1[b];
  return std::make_shared<DownsampleOperator>(factor, n, std::move(k));
}

// ---------------------------------------------------------------------------
// Cartesian k-space sampling: unitary DFT along the image height, then for
// every sampled column line l the DFT along the width evaluated at the
// (possibly fractional) frequency  f_l = (line_l - W/2) + offset_l:
//   Y[k, l] = (HW)^(-1/2) sum_{m,n} x[m, n] e^{-2 pi i (k m / H + f_l n / W)}.
// Output shape is (C, H, #lines). sigma = line offsets.

class FourierMaskOperator final : public LinearOperator {
 public:
  FourierMaskOperator(KspaceMask mask, int height) : mask_(std::move(mask)), height_(height) {
    mask_.validate();
    if (height < 1) throw ShapeError("fourier mask needs a positive image height");
    const int w = mask_.width;
    const std::size_t lines = mask_.sampled_lines.size();
    phasors_.resize(lines * w);
    for (std::size_t l = 0; l < lines; ++l) {
      const double f = mask_.frequency(l);
      for (int n = 0; n < w; ++n)
        phasors_[l * w + n] = std::polar(1.0, -2.0 * std::numbers::pi * f * n / w);
    }
  }

  OperatorKind kind() const override { return OperatorKind::fourier_mask; }
  DType in_dtype() const override { return DType::complex; }
  Shape out_shape(Shape in) const override {
    if (in.height != height_ || in.width != mask_.width)
      throw ShapeError("fourier mask built for " + std::to_string(height_) + "x" +
                       std::to_string(mask_.width) + ", got " + in.str());
    return {in.channels, height_, static_cast<int>(mask_.sampled_lines.size())};
  }
  Shape in_shape(Shape out) const override {
    if (out.height != height_ || out.width != static_cast<int>(mask_.sampled_lines.size()))
      throw ShapeError("k-space measurement shape mismatch " + out.str());
    return {out.channels, height_, mask_.width};
  }
  const KspaceMask& mask() const { return mask_; }

  Tensor apply(const Tensor& x) const override {
    check_input(x);
    return forward(x, nullptr);
  }
  Tensor adjoint(const Tensor& y) const override {
    check_output(y);
    return backward(y, nullptr);
  }

  std::vector<double> params() const override { return mask_.line_offsets; }
  Operator with_params(std::span<const double> sigma) const override {
    KspaceMask m = mask_;
    if (sigma.size() != m.line_offsets.size()) throw ShapeError("line offset vector length");
    m.line_offsets.assign(sigma.begin(), sigma.end());
    return std::make_shared<FourierMaskOperator>(std::move(m), height_);
  }
  Tensor d_apply(const Tensor& x, std::span<const double> dir) const override {
    check_input(x);
    return forward(x, &dir);
  }
  Tensor d_adjoint(const Tensor& y, std::span<const double> dir) const override {
    check_output(y);
    return backward(y, &dir);
  }
  std::vector<double> sigma_vjp(const Tensor& x, const Tensor& v) const override {
    const std::size_t lines = mask_.sampled_lines.size();
    std::vector<double> ones(lines, 1.0);
    std::span<const double> dir(ones);
    const Tensor dy = forward(x, &dir);  // column l holds d/d offset_l
    if (v.shape() != dy.shape() || !v.is_complex()) throw ShapeError("fourier sigma_vjp cotangent");
    std::vector<double> g(lines, 0.0);
    const Shape s = dy.shape();
    for (int c = 0; c < s.channels; ++c)
      for (int k = 0; k < s.height; ++k)
        for (std::size_t l = 0; l < lines; ++l) {
          const cplx a = v.c_at(c, k, static_cast<int>(l));
          const cplx b = dy.c_at(c, k, static_cast<int>(l));
          g[l] += a.real() * b.real() + a.imag() * b.imag();
        }
    return g;
  }

  std::optional<std::vector<double>> gram_spectrum(Shape in) const override {
    for (double d : mask_.line_offsets)
      if (d != 0.0) return std::nullopt;
    std::vector<double> s(in.pixels(), 0.0);
    const int w = mask_.width;
    for (int line : mask_.sampled_lines) {
      const int col = ((line - w / 2) % w + w) % w;
      for (int k = 0; k < in.height; ++k) s[static_cast<std::size_t>(k) * w + col] = 1.0;
    }
    return s;
  }

  std::string describe() const override {
    return "fourier_mask(" + std::to_string(mask_.sampled_lines.size()) + "/" + std::to_string(mask_.width) + ")";
  }

 private:
  // With dir != nullptr, evaluates the sigma-derivative along dir instead.
  Tensor forward(const Tensor& x, const std::span<const double>* dir) const {
    const Shape s = x.shape();
    const int h = s.height, w = s.width;
    const int lines = static_cast<int>(mask_.sampled_lines.size());
    const double scale = 1.0 / std::sqrt(static_cast<double>(h) * w);
    Tensor out({s.channels, h, lines}, DType::complex);
    std::vector<cplx> col(static_cast<std::size_t>(h) * w);
    for (int c = 0; c < s.channels; ++c) {
      std::copy(x.cdata() + c * s.pixels(), x.cdata() + (c + 1) * s.pixels(), col.begin());
      detail::fft_plane_axis(col.data(), h, w, 0, false);
      for (int l = 0; l < lines; ++l) {
        const cplx* ph = phasors_.data() + static_cast<std::size_t>(l) * w;
        const double d = dir ? (*dir)[l] : 0.0;
        if (dir && d == 0.0) continue;
        for (int k = 0; k < h; ++k) {
          const cplx* row = col.data() + static_cast<std::size_t>(k) * w;
          cplx acc{};
          if (dir) {
            for (int n = 0; n < w; ++n) acc += row[n] * ph[n] * static_cast<double>(n);
            acc *= cplx(0.0, -2.0 * std::numbers::pi * d / w);
          } else {
            for (int n = 0; n < w; ++n) acc += row[n] * ph[n];
          }
          out.c_at(c, k, l) = acc * scale;
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& y, const std::span<const double>* dir) const {
    const Shape os = y.shape();
    const int h = height_, w = mask_.width;
    const int lines = os.width;
    const double scale = 1.0 / std::sqrt(static_cast<double>(h) * w);
    Tensor out({os.channels, h, w}, DType::complex);
    std::vector<cplx> plane(static_cast<std::size_t>(h) * w);
    for (int c = 0; c < os.channels; ++c) {
      std::fill(plane.begin(), plane.end(), cplx{});
      for (int l = 0; l < lines; ++l) {
        const cplx* ph = phasors_.data() + static_cast<std::size_t>(l) * w;
        const double d = dir ? (*dir)[l] : 0.0;
        if (dir && d == 0.0) continue;
        // conj(-2 pi i d n / W) = +2 pi i d n / W
        const cplx dfac = cplx(0.0, 2.0 * std::numbers::pi * d / w);
        for (int k = 0; k < h; ++k) {
          const cplx v = y.c_at(c, k, l) * scale;
          cplx* row = plane.data() + static_cast<std::size_t>(k) * w;
          if (dir) {
            for (int n = 0; n < w; ++n) row[n] += v * std::conj(ph[n]) * dfac * static_cast<double>(n);
          } else {
            for (int n = 0; n < w; ++n) row[n] += v * std::conj(ph[n]);
          }
        }
      }
      detail::fft_plane_axis(plane.data(), h, w, 0, true);
      std::copy(plane.begin(), plane.end(), out.cdata() + c * static_cast<std::size_t>(h) * w);
    }
    return out;
  }

  KspaceMask mask_;
  int height_;
  std::vector<cplx> phasors_;
};

inline Operator make_fourier_mask(const KspaceMask& mask, Shape shape) {
  if (shape.width != mask.width) throw ShapeError("mask width does not match image width");
  return std::make_shared<FourierMaskOperator>(mask, shape.height);
}

// ---------------------------------------------------------------------------
// Composite outer ∘ inner. sigma = [sigma_inner, sigma_outer].

class CompositeOperator final : public LinearOperator {
 public:
  CompositeOperator(Operator outer, Operator inner) : outer_(std::move(outer)), inner_(std::move(inner)) {
    if (inner_->out_dtype() != outer_->in_dtype())
      throw DTypeError("composite: inner output dtype does not feed outer input");
  }
  OperatorKind kind() const override { return OperatorKind::composite; }
  DType in_dtype() const override { return inner_->in_dtype(); }
  DType out_dtype() const override { return outer_->out_dtype(); }
  Shape out_shape(Shape in) const override { return outer_->out_shape(inner_->out_shape(in)); }
  Shape in_shape(Shape out) const override { return inner_->in_shape(outer_->in_shape(out)); }
  Tensor apply(const Tensor& x) const override { return outer_->apply(inner_->apply(x)); }
  Tensor adjoint(const Tensor& y) const override { return inner_->adjoint(outer_->adjoint(y)); }

  std::vector<double> params() const override {
    auto p = inner_->params();
    const auto q = outer_->params();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }
  Operator with_params(std::span<const double> sigma) const override {
    const std::size_t ni = inner_->num_params();
    if (sigma.size() != ni + outer_->num_params()) throw ShapeError("composite sigma length");
    return std::make_shared<CompositeOperator>(outer_->with_params(sigma.subspan(ni)),
                                               inner_->with_params(sigma.subspan(0, ni)));
  }
  Tensor d_apply(const Tensor& x, std::span<const double> dir) const override {
    const std::size_t ni = inner_->num_params();
    const Tensor cx = inner_->apply(x);
    Tensor out(outer_->out_shape(cx.shape()), outer_->out_dtype());
    if (ni > 0) out += outer_->apply(inner_->d_apply(x, dir.subspan(0, ni)));
    if (outer_->num_params() > 0) out += outer_->d_apply(cx, dir.subspan(ni));
    return out;
  }
  Tensor d_adjoint(const Tensor& y, std::span<const double> dir) const override {
    const std::size_t ni = inner_->num_params();
    const Tensor ay = outer_->adjoint(y);
    Tensor out(inner_->in_shape(ay.shape()), inner_->in_dtype());
    if (ni > 0) out += inner_->d_adjoint(ay, dir.subspan(0, ni));
    if (outer_->num_params() > 0) out += inner_->adjoint(outer_->d_adjoint(y, dir.subspan(ni)));
    return out;
  }
  std::vector<double> sigma_vjp(const Tensor& x, const Tensor& v) const override {
    std::vector<double> g;
    if (inner_->num_params() > 0) g = inner_->sigma_vjp(x, outer_->adjoint(v));
    if (outer_->num_params() > 0) {
      const auto go = outer_->sigma_vjp(inner_->apply(x), v);
      g.insert(g.end(), go.begin(), go.end());
    }
    return g;
  }
  std::string describe() const override { return outer_->describe() + "∘" + inner_->describe(); }

 private:
  Operator outer_;
  Operator inner_;
};

inline Operator compose(Operator outer, Operator inner) {
  return std::make_shared<CompositeOperator>(std::move(outer), std::move(inner));
}

// ---------------------------------------------------------------------------
// Dense materialization (test oracle).

inline constexpr std::size_t kDenseLimit = 4096;

/// Column j = apply(A, e_j) for an input of the given shape.
inline Eigen::MatrixXcd materialize_dense(const LinearOperator& A, Shape in) {
  const std::size_t n = in.elements();
  if (n > kDenseLimit) throw ShapeError("materialize_dense: input size exceeds 4096 guard");
  const Shape os = A.out_shape(in);
  Eigen::MatrixXcd M(static_cast<Eigen::Index>(os.elements()), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    Tensor e(in, A.in_dtype());
    if (e.is_complex())
      e.cdata()[j] = 1.0;
    else
      e.data()[j] = 1.0;
    const Tensor col = A.apply(e);
    for (std::size_t i = 0; i < os.elements(); ++i)
      M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          col.is_complex() ? col.cdata()[i] : cplx(col.data()[i], 0.0);
  }
  return M;
}

/// Column j = adjoint(A, e_j) over the measurement space of an input of shape `in`.
inline Eigen::MatrixXcd materialize_dense_adjoint(const LinearOperator& A, Shape in) {
  const Shape os = A.out_shape(in);
  const std::size_t m = os.elements();
  if (m > kDenseLimit || in.elements() > kDenseLimit)
    throw ShapeError("materialize_dense_adjoint: size exceeds 4096 guard");
  Eigen::MatrixXcd M(static_cast<Eigen::Index>(in.elements()), static_cast<Eigen::Index>(m));
  for (std::size_t j = 0; j < m; ++j) {
    Tensor e(os, A.out_dtype());
    if (e.is_complex())
      e.cdata()[j] = 1.0;
    else
      e.data()[j] = 1.0;
    const Tensor col = A.adjoint(e);
    for (std::size_t i = 0; i < in.elements(); ++i)
      M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          col.is_complex() ? col.cdata()[i] : cplx(col.data()[i], 0.0);
  }
  return M;
}

// ---------------------------------------------------------------------------

/// Minimum-norm least-squares solution A^+ y: CG on A^H A x = A^H y from zero.
/// Throws NumericalError if the residual grows beyond 1e3 x its starting value.
inline Tensor pseudo_inverse_apply(const LinearOperator& A, const Tensor& y, int cg_iters,
                                   double tol = 1e-12, CgReport* report = nullptr, CgTape* tape = nullptr) {
  if (cg_iters < 1) throw std::invalid_argument("pseudo_inverse_apply needs cg_iters >= 1");
  const Tensor b = A.adjoint(y);
  const auto [x, rep] = cg_solve_from_zero([&A](const Tensor& v) { return gram(A, v); }, b, cg_iters, tol, tape);
  if (!(rep.final_residual <= 1e3)) throw NumericalError("pseudo_inverse_apply: CG diverged");
  if (report) *report = rep;
  return x;
}

/// Cotangents of pseudo_inverse_apply(A, y) given the cotangent of its
/// output and the tape of the forward run: returns (grad_y, grad_sigma).
/// grad_sigma is empty when A has no parameters.
inline std::pair<Tensor, std::vector<double>> pseudo_inverse_vjp(const LinearOperator& A, const Tensor& y,
                                                                 const CgTape& tape, const Tensor& x_bar) {
  const std::size_t q = A.num_params();
  std::vector<double> gs(q, 0.0);
  auto add = [&gs](const std::vector<double>& g) {
    for (std::size_t j = 0; j < gs.size(); ++j) gs[j] += g[j];
  };
  const TensorMap op = [&A](const Tensor& v) { return gram(A, v); };
  const Tensor b_bar = cg_backward(op, tape, x_bar, [&](const Tensor& p, const Tensor& q_bar) {
    if (q == 0) return;
    add(A.sigma_vjp(p, A.apply(q_bar)));
    add(A.sigma_vjp(q_bar, A.apply(p)));
  });
  if (q > 0) add(A.sigma_vjp(b_bar, y));
  return {A.apply(b_bar), std::move(gs)};
}

}  // namespace driftadapt
