#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "driftadapt/tensor.hpp"

namespace driftadapt {

struct CgReport {
  int iters_run = 0;
  double final_residual = 0.0;  // ||b - M x|| / ||b|| (absolute when b = 0)
  bool converged = false;
};

using TensorMap = std::function<Tensor(const Tensor&)>;

/// Conjugate gradients for M x = b with M symmetric positive (semi)definite
/// in the real inner product. Stops when the relative residual drops to
/// `tol` or after `max_iters` iterations.
inline std::pair<Tensor, CgReport> cg_solve(const TensorMap& op, const Tensor& b, const Tensor& x0,
                                            int max_iters, double tol) {
  b.check_same(x0, "cg_solve");
  Tensor x = x0;
  Tensor r = b;
  if (squared_norm(x0) > 0.0) r -= op(x0);
  const double bnorm = norm(b);
  const double scale = bnorm > 0.0 ? bnorm : 1.0;
  double rr = squared_norm(r);
  CgReport rep;
  rep.final_residual = std::sqrt(rr) / scale;
  if (!std::isfinite(rr)) throw NumericalError("cg_solve: non-finite initial residual");
  if (rep.final_residual <= tol) {
    rep.converged = true;
    return {std::move(x), rep};
  }
  Tensor p = r;
  for (int k = 1; k <= max_iters; ++k) {
    const Tensor q = op(p);
    const double pq = dot(p, q);
    if (!std::isfinite(pq))
      throw NumericalError("cg_solve: non-finite value at iteration " + std::to_string(k));
    if (pq <= 0.0) break;  // exhausted the positive-definite range
    const double alpha = rr / pq;
    x.axpy(alpha, p);
    r.axpy(-alpha, q);
    const double rr_new = squared_norm(r);
    if (!std::isfinite(rr_new))
      throw NumericalError("cg_solve: non-finite residual at iteration " + std::to_string(k));
    rep.iters_run = k;
    rep.final_residual = std::sqrt(rr_new) / scale;
    if (rep.final_residual <= tol) {
      rep.converged = true;
      break;
    }
    const double beta = rr_new / rr;
    rr = rr_new;
    p *= beta;
    p += r;
  }
  return {std::move(x), rep};
}


/// Record of a zero-initialized CG run, sufficient to back-propagate
/// through the iteration (reverse mode over the recurrences, not the
/// idealized linear solve).
struct CgTape {
  std::vector<Tensor> r;  // r_0 .. r_n
  std::vector<Tensor> p;  // p_0 .. p_{n-1}, plus p_n when the last step continued
  std::vector<Tensor> q;  // q_k = M p_k
  std::vector<double> rho, gamma, alpha, beta;
  int steps = 0;  // completed x-updates
};

/// Zero-initialized CG for M x = b that can record a tape. The arithmetic is
/// the same sequence as cg_solve with x0 = 0.
inline std::pair<Tensor, CgReport> cg_solve_from_zero(const TensorMap& op, const Tensor& b, int max_iters,
                                                      double tol, CgTape* tape = nullptr) {
  Tensor x = Tensor::zeros_like(b);
  Tensor r = b;
  const double bnorm = norm(b);
  const double scale = bnorm > 0.0 ? bnorm : 1.0;
  double rr = squared_norm(r);
  CgReport rep;
  rep.final_residual = std::sqrt(rr) / scale;
  if (tape) {
    *tape = CgTape{};
    tape->r.push_back(r);
    tape->rho.push_back(rr);
  }
  if (!std::isfinite(rr)) throw NumericalError("cg: non-finite right-hand side");
  if (rep.final_residual <= tol) {
    rep.converged = true;
    return {std::move(x), rep};
  }
  Tensor p = r;
  if (tape) tape->p.push_back(p);
  for (int k = 1; k <= max_iters; ++k) {
    const Tensor q = op(p);
    const double pq = dot(p, q);
    if (!std::isfinite(pq)) throw NumericalError("cg: non-finite value at iteration " + std::to_string(k));
    if (pq <= 0.0) break;
    const double alpha = rr / pq;
    x.axpy(alpha, p);
    r.axpy(-alpha, q);
    const double rr_new = squared_norm(r);
    if (!std::isfinite(rr_new)) throw NumericalError("cg: non-finite residual at iteration " + std::to_string(k));
    rep.iters_run = k;
    rep.final_residual = std::sqrt(rr_new) / scale;
    if (tape) {
      tape->q.push_back(q);
      tape->gamma.push_back(pq);
      tape->alpha.push_back(alpha);
      tape->r.push_back(r);
      tape->rho.push_back(rr_new);
      tape->steps = k;
    }
    if (rep.final_residual <= tol) {
      rep.converged = true;
      break;
    }
    if (k == max_iters) break;
    const double beta = rr_new / rr;
    rr = rr_new;
    p *= beta;
    p += r;
    if (tape) {
      tape->beta.push_back(beta);
      tape->p.push_back(p);
    }
  }
  return {std::move(x), rep};
}

/// Reverse pass through a recorded CG run. Given the cotangent of the
/// returned x, returns the cotangent of b. For every matrix product
/// q_k = M p_k the callback on_matvec(p_k, q_bar_k) is invoked so callers can
/// accumulate gradients with respect to parameters of M; `op` applies M
/// (assumed symmetric).
template <typename OnMatvec>
Tensor cg_backward(const TensorMap& op, const CgTape& tape, const Tensor& x_bar, OnMatvec&& on_matvec) {
  const int n = tape.steps;
  std::vector<double> rho_bar(static_cast<std::size_t>(n) + 1, 0.0);
  Tensor xb = x_bar;
  Tensor rb = Tensor::zeros_like(x_bar);
  Tensor pb = Tensor::zeros_like(x_bar);  // adjoint of p_{k+1} entering step k
  for (int k = n - 1; k >= 0; --k) {
    const Tensor& pk = tape.p[k];
    const Tensor& qk = tape.q[k];
    // p_{k+1} = r_{k+1} + beta_k p_k  (only if it was formed)
    Tensor pkb = Tensor::zeros_like(x_bar);
    if (static_cast<std::size_t>(k) < tape.beta.size()) {
      rb += pb;
      const double beta_bar = dot(pb, pk);
      pkb.axpy(tape.beta[k], pb);
      rho_bar[k + 1] += beta_bar / tape.rho[k];
      rho_bar[k] -= beta_bar * tape.rho[k + 1] / (tape.rho[k] * tape.rho[k]);
    }
    // rho_{k+1} = <r_{k+1}, r_{k+1}>
    rb.axpy(2.0 * rho_bar[k + 1], tape.r[k + 1]);
    // r_{k+1} = r_k - alpha_k q_k ;  x_{k+1} = x_k + alpha_k p_k
    double alpha_bar = -dot(rb, qk) + dot(xb, pk);
    Tensor qb = rb * (-tape.alpha[k]);
    pkb.axpy(tape.alpha[k], xb);
    // alpha_k = rho_k / gamma_k ; gamma_k = <p_k, q_k>
    rho_bar[k] += alpha_bar / tape.gamma[k];
    const double gamma_bar = -alpha_bar * tape.rho[k] / (tape.gamma[k] * tape.gamma[k]);
    pkb.axpy(gamma_bar, qk);
    qb.axpy(gamma_bar, pk);
    // q_k = M p_k
    on_matvec(pk, qb);
    pkb += op(qb);
    pb = std::move(pkb);
  }
  // p_0 = r_0 = b ; rho_0 = <r_0, r_0>
  rb += pb;
  rb.axpy(2.0 * rho_bar[0], tape.r[0]);
  return rb;
}

}  // namespace driftadapt
