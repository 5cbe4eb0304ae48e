#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "driftadapt/random.hpp"
#include "driftadapt/tensor.hpp"
#include "driftadapt/tensor_io.hpp"

namespace driftadapt {

/// One piecewise-smooth image: a faint planar background plus 2-6
/// ellipses/rectangles, each with its own linear intensity ramp, painted in
/// order. Values lie in [0, 1].
inline Tensor synthetic_image(int size, Rng& rng) {
  const int n = size;
  Tensor img({1, n, n});
  const double b0 = rng.uniform(0.05, 0.25);
  const double bx = rng.uniform(-0.1, 0.1), by = rng.uniform(-0.1, 0.1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) img(0, i, j) = b0 + bx * (j - n / 2.0) / n + by * (i - n / 2.0) / n;
  const int shapes = 2 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    const bool ellipse = rng.uniform() < 0.6;
    const double cy = rng.uniform(0.15, 0.85) * n, cx = rng.uniform(0.15, 0.85) * n;
    const double ry = rng.uniform(0.08, 0.3) * n, rx = rng.uniform(0.08, 0.3) * n;
    const double ang = rng.uniform(0.0, std::numbers::pi);
    const double ca = std::cos(ang), sa = std::sin(ang);
    const double v0 = rng.uniform(0.3, 0.9);
    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double dy = i - cy, dx = j - cx;
        const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
        const bool inside = ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (inside) img(0, i, j) = v0 + gx * u * 0.5 + gy * v * 0.5;
      }
  }
  for (double& v : img.raw()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Multiplies by a smooth random phase (planar plus one low-frequency
/// sinusoid), for k-space problems.
inline Tensor with_smooth_phase(const Tensor& img, Rng& rng) {
  const int h = img.height(), w = img.width();
  const double p0 = rng.uniform(-0.5, 0.5);
  const double px = rng.uniform(-1.0, 1.0), py = rng.uniform(-1.0, 1.0);
  const double amp = rng.uniform(0.0, 0.4);
  const double fy = rng.uniform(0.5, 1.5), fx = rng.uniform(0.5, 1.5);
  Tensor out(img.shape(), DType::complex);
  for (int c = 0; c < img.channels(); ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double y = static_cast<double>(i) / h - 0.5, x = static_cast<double>(j) / w - 0.5;
        const double phi = p0 + px * x + py * y + amp * std::sin(2 * std::numbers::pi * (fy * y + fx * x));
        out.c_at(c, i, j) = std::polar(img(c, i, j), phi);
      }
  return out;
}

/// Deterministic dataset: image i depends only on (seed, i, size).
inline std::vector<Tensor> gen_synthetic(std::uint64_t seed, int count, int size, bool complex_phase = false) {
  if (size < 16 || size > 128) throw std::invalid_argument("gen_synthetic: size must lie in [16, 128]");
  if (count < 0) throw std::invalid_argument("gen_synthetic: negative count");
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) * 0xD1B54A32D192ED03ULL + 1);
    Tensor img = synthetic_image(size, rng);
    out.push_back(complex_phase ? with_smooth_phase(img, rng) : std::move(img));
  }
  return out;
}

/// Loads every .dat / .pgm file in a directory (sorted by name).
inline std::vector<Tensor> load_image_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("image directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".dat" || ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) out.push_back(f.extension() == ".dat" ? load_tensor(f.string()) : load_pnm(f.string()));
  return out;
}

}  // namespace driftadapt
