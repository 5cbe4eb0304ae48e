#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftadapt/cg.hpp"
#include "driftadapt/fft.hpp"
#include "driftadapt/linops.hpp"
#include "driftadapt/tensor.hpp"

namespace driftadapt {

enum class DcMethod { cg, fft_direct };

inline const char* to_string(DcMethod m) { return m == DcMethod::cg ? "cg" : "fft_direct"; }

struct DcSolver {
  DcMethod method = DcMethod::cg;
  int cg_iters = 20;
  double tol = 1e-12;

  static DcSolver cg(int iters, double tol = 1e-12) { return {DcMethod::cg, iters, tol}; }
  static DcSolver fft_direct() { return {DcMethod::fft_direct, 0, 0.0}; }
};

/// True when A^H A is diagonal under the 2-D DFT for inputs of this shape.
inline bool supports_fft_direct(const LinearOperator& A, Shape in) { return A.gram_spectrum(in).has_value(); }

/// Solves (A^H A + lambda I) x = rhs exactly in the Fourier domain.
inline Tensor fft_regularized_solve(const LinearOperator& A, const Tensor& rhs, double lambda) {
  const auto spec = A.gram_spectrum(rhs.shape());
  if (!spec)
    throw std::invalid_argument("fft_direct: " + A.describe() + " is not diagonalized by the DFT");
  Tensor f = fft2(rhs.is_complex() ? rhs : to_complex(rhs));
  const std::size_t px = rhs.shape().pixels();
  for (int c = 0; c < f.channels(); ++c) {
    cplx* p = f.cdata() + c * px;
    for (std::size_t i = 0; i < px; ++i) p[i] /= (*spec)[i] + lambda;
  }
  Tensor x = ifft2(f);
  return rhs.is_complex() ? x : real_part(x);
}

/// Everything dc_update_vjp needs from a forward dc_update.
struct DcTape {
  DcMethod method = DcMethod::cg;
  CgTape cg;        // solve for the correction d = x - z (cg path)
  Tensor residual;  // y - A z (cg path)
  Tensor x;         // output
  CgReport report;
};

/// x = (A^H A + lambda I)^-1 (A^H y + lambda z): the data-consistency step
/// with unit step size. The cg path solves for the correction x - z, whose
/// right-hand side A^H (y - A z) does not depend on lambda, starting from 0.
inline Tensor dc_update(const LinearOperator& A, const Tensor& y, const Tensor& z, double lambda,
                        const DcSolver& solver, DcTape* tape = nullptr) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("dc_update needs lambda > 0");
  if (z.dtype() != A.in_dtype()) throw DTypeError("dc_update: z dtype does not match operator input");
  if (A.out_shape(z.shape()) != y.shape()) throw ShapeError("dc_update: y does not match A z");
  if (tape) {
    *tape = DcTape{};
    tape->method = solver.method;
  }
  Tensor x;
  if (solver.method == DcMethod::fft_direct) {
    Tensor rhs = A.adjoint(y);
    rhs.axpy(lambda, z);
    x = fft_regularized_solve(A, rhs, lambda);
  } else {
    if (solver.cg_iters < 1) throw std::invalid_argument("dc_update: cg needs at least one iteration");
    Tensor r = y - A.apply(z);
    const TensorMap op = [&A, lambda](const Tensor& v) {
      Tensor out = gram(A, v);
      out.axpy(lambda, v);
      return out;
    };
    auto [d, rep] = cg_solve_from_zero(op, A.adjoint(r), solver.cg_iters, solver.tol, tape ? &tape->cg : nullptr);
    x = z + d;
    if (tape) {
      tape->residual = std::move(r);
      tape->report = rep;
    }
  }
  if (!all_finite(x)) throw NumericalError("dc_update produced non-finite values");
  if (tape) tape->x = x;
  return x;
}

struct DcGrads {
  Tensor z;
  Tensor y;
  std::vector<double> sigma;
};

/// Reverse pass of dc_update. Exact for the computation actually performed:
/// through the CG recurrences on the cg path, by implicit differentiation of
/// the (exact) direct solve on the fft path.
inline DcGrads dc_update_vjp(const LinearOperator& A, const Tensor& y, const Tensor& z, double lambda,
                             const DcTape& tape, const Tensor& x_bar) {
  const std::size_t q = A.num_params();
  DcGrads g;
  g.sigma.assign(q, 0.0);
  auto add = [&g](const std::vector<double>& v, double s) {
    for (std::size_t j = 0; j < g.sigma.size(); ++j) g.sigma[j] += s * v[j];
  };
  if (tape.method == DcMethod::fft_direct) {
    // M x = A^H y + lambda z  =>  w = M^-1 x_bar
    const Tensor w = fft_regularized_solve(A, x_bar, lambda);
    g.z = w * lambda;
    g.y = A.apply(w);
    if (q > 0) {
      add(A.sigma_vjp(w, y - A.apply(tape.x)), 1.0);
      add(A.sigma_vjp(tape.x, g.y), -1.0);
    }
    return g;
  }
  const TensorMap op = [&A, lambda](const Tensor& v) {
    Tensor out = gram(A, v);
    out.axpy(lambda, v);
    return out;
  };
  const Tensor b_bar = cg_backward(op, tape.cg, x_bar, [&](const Tensor& p, const Tensor& q_bar) {
    if (q == 0) return;
    add(A.sigma_vjp(p, A.apply(q_bar)), 1.0);
    add(A.sigma_vjp(q_bar, A.apply(p)), 1.0);
  });
  // x = z + d,  d = CG(A^H (y - A z))
  const Tensor Ab = A.apply(b_bar);
  g.y = Ab;
  g.z = x_bar - A.adjoint(Ab);
  if (q > 0) {
    add(A.sigma_vjp(b_bar, tape.residual), 1.0);
    add(A.sigma_vjp(z, Ab), -1.0);
  }
  return g;
}

namespace detail {

// Smoothed isotropic TV on a real multi-channel image, coupled across
// channels; periodic forward differences. Returns the value and, if
// requested, writes the gradient.
inline double smoothed_tv(const Tensor& x, double eps, Tensor* grad) {
  const Shape s = x.shape();
  const int h = s.height, w = s.width;
  const std::size_t px = s.pixels();
  std::vector<double> mag(px, eps * eps);
  for (int c = 0; c < s.channels; ++c) {
    const double* p = x.plane(c).data();
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = p[i * w + j];
        const double dh = p[i * w + (j + 1) % w] - v;
        const double dv = p[((i + 1) % h) * w + j] - v;
        mag[static_cast<std::size_t>(i) * w + j] += dh * dh + dv * dv;
      }
  }
  double val = 0.0;
  for (double& m : mag) {
    m = std::sqrt(m);
    val += m;
  }
  if (grad) {
    *grad = Tensor(s);
    for (int c = 0; c < s.channels; ++c) {
      const double* p = x.plane(c).data();
      double* g = grad->plane(c).data();
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const std::size_t k = static_cast<std::size_t>(i) * w + j;
          const int jr = i * w + (j + 1) % w;
          const int id = ((i + 1) % h) * w + j;
          const double dh = (p[jr] - p[k]) / mag[k];
          const double dv = (p[id] - p[k]) / mag[k];
          g[k] -= dh + dv;
          g[jr] += dh;
          g[id] += dv;
        }
    }
  }
  return val;
}

}  // namespace detail

struct TvReport {
  std::vector<double> objective;  // after each accepted step, starting with the initial value
  double final_step = 0.0;
};

/// Gradient descent on 0.5||A x - y||^2 + weight * sum sqrt(|grad x|^2 + eps^2),
/// starting from A^H y (or x0). A step that increases the objective is
/// retried with half the step size.
inline Tensor tv_reconstruct(const LinearOperator& A, const Tensor& y, double weight, int iters, double step,
                             double eps = 1e-3, const Tensor* x0 = nullptr, TvReport* report = nullptr) {
  if (!(weight >= 0.0)) throw std::invalid_argument("tv_reconstruct: weight must be non-negative");
  if (!(eps > 0.0)) throw std::invalid_argument("tv_reconstruct: eps must be positive");
  if (!(step > 0.0)) throw std::invalid_argument("tv_reconstruct: step must be positive");
  if (iters < 0) throw std::invalid_argument("tv_reconstruct: iters must be non-negative");
  Tensor x = x0 ? *x0 : A.adjoint(y);
  const bool cx = x.is_complex();

  auto objective = [&](const Tensor& v, Tensor* grad) {
    const Tensor r = A.apply(v) - y;
    double f = 0.5 * squared_norm(r);
    if (weight > 0.0) {
      Tensor tg;
      f += weight * detail::smoothed_tv(cx ? complex_to_channels(v) : v, eps, grad ? &tg : nullptr);
      if (grad) {
        *grad = A.adjoint(r);
        grad->axpy(weight, cx ? channels_to_complex(tg) : tg);
      }
    } else if (grad) {
      *grad = A.adjoint(r);
    }
    return f;
  };

  Tensor g;
  double f = objective(x, &g);
  if (report) report->objective = {f};
  for (int it = 0; it < iters; ++it) {
    while (true) {
      Tensor cand = x;
      cand.axpy(-step, g);
      Tensor gc;
      const double fc = objective(cand, &gc);
      if (std::isfinite(fc) && fc <= f) {
        x = std::move(cand);
        g = std::move(gc);
        f = fc;
        break;
      }
      step *= 0.5;
      if (step < 1e-12)
        throw NumericalError("tv_reconstruct: step fell below 1e-12 at iteration " + std::to_string(it));
    }
    if (report) report->objective.push_back(f);
  }
  if (report) report->final_step = step;
  return x;
}

}  // namespace driftadapt
