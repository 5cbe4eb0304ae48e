#pragma once

#include <cmath>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "driftadapt/tensor.hpp"

namespace driftadapt {

namespace detail {

// Eigen's kissfft backend handles any length (mixed radix) and caches plans
// per instance, so each thread keeps its own.
inline Eigen::FFT<double>& fft_engine() {
  thread_local Eigen::FFT<double> engine = [] {
    Eigen::FFT<double> e;
    e.SetFlag(Eigen::FFT<double>::Unscaled);
    return e;
  }();
  return engine;
}

// Unnormalized 1-D transforms along rows (axis 1) or columns (axis 0) of an
// h x w complex plane, in place.
inline void fft_plane_axis(cplx* plane, int h, int w, int axis, bool inverse) {
  auto& eng = fft_engine();
  const int n = axis == 1 ? w : h;
  if (n == 1) return;  // length-1 DFT is the identity (kissfft cannot plan it)
  const int lines = axis == 1 ? h : w;
  std::vector<cplx> in(n), out(n);
  for (int l = 0; l < lines; ++l) {
    for (int i = 0; i < n; ++i) in[i] = axis == 1 ? plane[l * w + i] : plane[i * w + l];
    if (inverse)
      eng.inv(out.data(), in.data(), n);
    else
      eng.fwd(out.data(), in.data(), n);
    for (int i = 0; i < n; ++i) (axis == 1 ? plane[l * w + i] : plane[i * w + l]) = out[i];
  }
}

inline Tensor fft2_impl(const Tensor& t, bool inverse) {
  if (!t.is_complex()) throw DTypeError("fft2 requires a complex tensor");
  const Shape s = t.shape();
  if (s.height < 1 || s.width < 1) throw ShapeError("fft2 requires non-empty planes");
  Tensor out = t;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.pixels()));
  for (int c = 0; c < s.channels; ++c) {
    cplx* p = out.cdata() + c * s.pixels();
    fft_plane_axis(p, s.height, s.width, 1, inverse);
    fft_plane_axis(p, s.height, s.width, 0, inverse);
    for (std::size_t i = 0; i < s.pixels(); ++i) p[i] *= scale;
  }
  return out;
}

}  // namespace detail

/// Unitary 2-D DFT of every channel: X[k,l] = (HW)^(-1/2) sum x[m,n] e^{-2pi i (km/H + ln/W)}.
inline Tensor fft2(const Tensor& t) { return detail::fft2_impl(t, false); }

/// Inverse of fft2 (also its adjoint).
inline Tensor ifft2(const Tensor& t) { return detail::fft2_impl(t, true); }

}  // namespace driftadapt
