#pragma once

#include <cmath>
#include <vector>

#include "driftadapt/tensor.hpp"

namespace driftadapt {

inline constexpr double kPsnrCap = 300.0;

/// Per-element mean squared error; complex elements contribute |a - b|^2.
inline double mse(const Tensor& x, const Tensor& ref) {
  x.check_same(ref, "mse");
  if (x.elements() == 0) throw ShapeError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < x.scalar_count(); ++i) {
    const double d = x.data()[i] - ref.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(x.elements());
}

/// 10 log10(peak^2 / MSE), capped at 300 dB for identical inputs.
inline double psnr(const Tensor& x, const Tensor& ref, double peak = 1.0) {
  if (!(peak > 0.0)) throw std::invalid_argument("psnr peak must be positive");
  const double m = mse(x, ref);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

/// Mean SSIM over all valid window positions and channels, Gaussian window
/// (sigma 1.5), C1 = (0.01 peak)^2, C2 = (0.03 peak)^2. Complex inputs are
/// compared by magnitude.
inline double ssim(const Tensor& x_in, const Tensor& ref_in, int window = 7, double peak = 1.0) {
  x_in.check_same(ref_in, "ssim");
  const Tensor x = magnitude(x_in);
  const Tensor ref = magnitude(ref_in);
  const Shape s = x.shape();
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("ssim window must be odd");
  if (window > std::min(s.height, s.width))
    throw ShapeError("ssim window larger than image " + s.str());

  std::vector<double> g(static_cast<std::size_t>(window) * window);
  const int r = window / 2;
  double gsum = 0.0;
  for (int i = 0; i < window; ++i)
    for (int j = 0; j < window; ++j) {
      const double d2 = (i - r) * (i - r) + (j - r) * (j - r);
      g[i * window + j] = std::exp(-d2 / (2.0 * 1.5 * 1.5));
      gsum += g[i * window + j];
    }
  for (double& v : g) v /= gsum;

  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < s.channels; ++c)
    for (int y = 0; y + window <= s.height; ++y)
      for (int xx = 0; xx + window <= s.width; ++xx) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j) {
            const double w = g[i * window + j];
            const double a = x(c, y + i, xx + j);
            const double b = ref(c, y + i, xx + j);
            mx += w * a;
            my += w * b;
            sxx += w * a * a;
            syy += w * b * b;
            sxy += w * a * b;
          }
        const double vx = sxx - mx * mx;
        const double vy = syy - my * my;
        const double cxy = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace driftadapt
