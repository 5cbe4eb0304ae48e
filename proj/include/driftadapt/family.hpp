#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftadapt/linops.hpp"

namespace driftadapt {

/// A differentiable map s -> A(s) from family coordinates to operators.
/// pullback() chains a cotangent on the operator's own params() back to s.
class OperatorFamily {
 public:
  virtual ~OperatorFamily() = default;
  virtual std::size_t dim() const = 0;
  virtual Operator at(std::span<const double> s) const = 0;
  virtual std::vector<double> pullback(std::span<const double> s, std::span<const double> g_params) const = 0;
  virtual std::string describe() const = 0;
};

using Family = std::shared_ptr<const OperatorFamily>;

/// The operator's own parametrization (kernel taps, line offsets).
class NativeFamily final : public OperatorFamily {
 public:
  explicit NativeFamily(Operator base) : base_(std::move(base)) {
    if (base_->num_params() == 0) throw std::invalid_argument(base_->describe() + " has no parameters");
  }
  std::size_t dim() const override { return base_->num_params(); }
  Operator at(std::span<const double> s) const override {
    if (s.size() != dim()) throw ShapeError("family coordinate length mismatch");
    return base_->with_params(s);
  }
  std::vector<double> pullback(std::span<const double>, std::span<const double> g) const override {
    return {g.begin(), g.end()};
  }
  std::string describe() const override { return "native:" + base_->describe(); }

 private:
  Operator base_;
};

/// Zero-dimensional family: always the same operator.
class FrozenFamily final : public OperatorFamily {
 public:
  explicit FrozenFamily(Operator op) : op_(std::move(op)) {}
  std::size_t dim() const override { return 0; }
  Operator at(std::span<const double>) const override { return op_; }
  std::vector<double> pullback(std::span<const double>, std::span<const double>) const override { return {}; }
  std::string describe() const override { return "frozen:" + op_->describe(); }

 private:
  Operator op_;
};

/// Unit-mass line kernel with soft edges, smooth in the angle: Gaussian
/// profile across the line (std 0.5 px), logistic fall-off at the ends
/// (scale 0.25 px). d_angle receives dk/d(angle in degrees) when given.
inline std::vector<double> smooth_line_kernel(int size, double angle_deg, std::vector<double>* d_angle = nullptr) {
  if (size < 1 || size % 2 == 0) throw std::invalid_argument("line kernel size must be odd");
  constexpr double sw = 0.5, se = 0.25;
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double ux = std::cos(th), uy = std::sin(th);
  const double half = 0.5 * size;
  const int r = size / 2;
  const std::size_t n = static_cast<std::size_t>(size) * size;
  std::vector<double> w(n), dw(n);
  double total = 0.0, dtotal = 0.0;
  for (int a = 0; a < size; ++a)
    for (int b = 0; b < size; ++b) {
      const double px = b - r, py = -(a - r);
      const double along = px * ux + py * uy;
      const double across = -px * uy + py * ux;
      // d along/dth = across, d across/dth = -along
      const double g = std::exp(-across * across / (2 * sw * sw));
      const double e = std::exp((std::abs(along) - half) / se);
      const double s = 1.0 / (1.0 + e);
      const double dg = g * (-across / (sw * sw)) * (-along);
      const double ds = -s * s * e / se * (along >= 0 ? 1.0 : -1.0) * across;
      const std::size_t i = static_cast<std::size_t>(a) * size + b;
      w[i] = g * s;
      dw[i] = dg * s + g * ds;
      total += w[i];
      dtotal += dw[i];
    }
  const double deg = std::numbers::pi / 180.0;
  std::vector<double> k(n);
  for (std::size_t i = 0; i < n; ++i) k[i] = w[i] / total;
  if (d_angle) {
    d_angle->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*d_angle)[i] = (dw[i] - k[i] * dtotal) / total * deg;
  }
  return k;
}

/// One-parameter blur family: s = {angle in degrees} -> smooth line kernel.
class BlurAngleFamily final : public OperatorFamily {
 public:
  explicit BlurAngleFamily(int size) : size_(size) {
    if (size < 3 || size % 2 == 0) throw std::invalid_argument("blur angle family needs an odd size >= 3");
  }
  std::size_t dim() const override { return 1; }
  Operator at(std::span<const double> s) const override {
    if (s.size() != 1) throw ShapeError("blur angle family has one coordinate");
    return make_blur(size_, smooth_line_kernel(size_, s[0]));
  }
  std::vector<double> pullback(std::span<const double> s, std::span<const double> g) const override {
    std::vector<double> dk;
    smooth_line_kernel(size_, s[0], &dk);
    if (g.size() != dk.size()) throw ShapeError("blur angle pullback length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < dk.size(); ++i) acc += g[i] * dk[i];
    return {acc};
  }
  std::string describe() const override { return "blur_angle(" + std::to_string(size_) + ")"; }

 private:
  int size_;
};

inline Family native_family(Operator base) { return std::make_shared<NativeFamily>(std::move(base)); }
inline Family frozen_family(Operator op) { return std::make_shared<FrozenFamily>(std::move(op)); }
inline Family blur_angle_family(int size) { return std::make_shared<BlurAngleFamily>(size); }

}  // namespace driftadapt
