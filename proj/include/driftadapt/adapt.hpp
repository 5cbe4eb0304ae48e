#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "driftadapt/errors.hpp"
#include "driftadapt/family.hpp"
#include "driftadapt/linops.hpp"
#include "driftadapt/network.hpp"
#include "driftadapt/optim.hpp"
#include "driftadapt/parallel.hpp"
#include "driftadapt/solvers.hpp"

namespace driftadapt {

struct AdaptConfig {
  double mu = 1e-2;      // proximity weight on ||theta - theta0||^2
  double lambda = 1e-2;  // RED weight in the data-consistency step
  double tau = 1.0;
  int K = 5;
  int cg_iters = 20;    // per data-consistency solve
  int pinv_iters = 20;  // least-squares initialization
  DcMethod dc_method = DcMethod::cg;
  OptimizerSpec opt = OptimizerSpec::adam(1e-4);
  int opt_steps = 200;
  OptimizerSpec sigma_opt = OptimizerSpec::adam(1e-3);
  int sigma_steps = 100;
  double plus_mu = 0.0;        // optional proximity term for R&R+
  std::optional<OptimizerSpec> plus_opt;  // R&R+ falls back to opt / opt_steps
  std::optional<int> plus_steps;
  int divergence_window = 50;  // 0 disables the moving-average check

  DcSolver dc_solver() const {
    return dc_method == DcMethod::cg ? DcSolver::cg(cg_iters) : DcSolver::fft_direct();
  }
  void validate() const {
    if (!(mu >= 0.0) || !std::isfinite(mu)) throw std::invalid_argument("AdaptConfig: mu must be >= 0");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("AdaptConfig: lambda must be > 0");
    if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("AdaptConfig: tau must lie in (0, 1]");
    if (K < 1) throw std::invalid_argument("AdaptConfig: K must be >= 1");
    if (cg_iters < 1 || pinv_iters < 1) throw std::invalid_argument("AdaptConfig: CG iteration counts must be >= 1");
    if (opt_steps < 0 || sigma_steps < 0) throw std::invalid_argument("AdaptConfig: negative step budget");
    if (plus_steps && *plus_steps < 0) throw std::invalid_argument("AdaptConfig: negative step budget");
    if (!(plus_mu >= 0.0)) throw std::invalid_argument("AdaptConfig: plus_mu must be >= 0");
    if (divergence_window < 0) throw std::invalid_argument("AdaptConfig: negative divergence window");
  }
};

inline void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = {{"mu", c.mu},
       {"lambda", c.lambda},
       {"tau", c.tau},
       {"K", c.K},
       {"cg_iters", c.cg_iters},
       {"pinv_iters", c.pinv_iters},
       {"dc_method", to_string(c.dc_method)},
       {"opt", c.opt},
       {"opt_steps", c.opt_steps},
       {"sigma_opt", c.sigma_opt},
       {"sigma_steps", c.sigma_steps},
       {"plus_mu", c.plus_mu},
       {"divergence_window", c.divergence_window}};
  if (c.plus_opt) j["plus_opt"] = *c.plus_opt;
  if (c.plus_steps) j["plus_steps"] = *c.plus_steps;
}

inline void from_json(const nlohmann::json& j, AdaptConfig& c) {
  c = AdaptConfig{};
  c.mu = j.value("mu", c.mu);
  c.lambda = j.value("lambda", c.lambda);
  c.tau = j.value("tau", c.tau);
  c.K = j.value("K", c.K);
  c.cg_iters = j.value("cg_iters", c.cg_iters);
  c.pinv_iters = j.value("pinv_iters", c.pinv_iters);
  const std::string m = j.value("dc_method", std::string("cg"));
  if (m == "cg")
    c.dc_method = DcMethod::cg;
  else if (m == "fft_direct")
    c.dc_method = DcMethod::fft_direct;
  else
    throw std::invalid_argument("unknown dc_method '" + m + "'");
  if (j.contains("opt")) c.opt = j.at("opt").get<OptimizerSpec>();
  c.opt_steps = j.value("opt_steps", c.opt_steps);
  if (j.contains("sigma_opt")) c.sigma_opt = j.at("sigma_opt").get<OptimizerSpec>();
  c.sigma_steps = j.value("sigma_steps", c.sigma_steps);
  c.plus_mu = j.value("plus_mu", c.plus_mu);
  if (j.contains("plus_opt")) c.plus_opt = j.at("plus_opt").get<OptimizerSpec>();
  if (j.contains("plus_steps")) c.plus_steps = j.at("plus_steps").get<int>();
  c.divergence_window = j.value("divergence_window", c.divergence_window);
  c.validate();
}

struct TraceRow {
  int step = 0;
  double data_residual = 0.0;  // ||A x - y|| (root mean square over a calibration set)
  double proximity = 0.0;      // ||theta - theta0||
  double objective = 0.0;
};

struct AdaptResult {
  Tensor x_hat;
  std::optional<NetworkParams> theta1;
  std::optional<std::vector<double>> sigma_hat;
  std::vector<TraceRow> trace;  // R&R: one row per iteration; descent methods: row 0 is the start point
  int best_step = 0;
  bool divergent = false;
};

inline std::string trace_csv(const AdaptResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,data_residual,proximity,objective\n";
  for (const auto& t : r.trace) os << t.step << ',' << t.data_residual << ',' << t.proximity << ',' << t.objective << '\n';
  return os.str();
}

inline void write_trace_csv(const std::string& path, const AdaptResult& r) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << trace_csv(r);
}

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct Evaluation {
  double objective = 0.0;
  double data_residual = 0.0;
  double proximity = 0.0;
  std::vector<double> g_theta;
  std::vector<double> g_s;
};

struct DescentResult {
  std::vector<double> theta, s;
  std::vector<TraceRow> trace;
  int best_step = 0;
  bool divergent = false;
};

/// Joint first-order descent on (theta, s) with best-so-far tracking. Stops
/// early, flagged divergent, when the mean objective over the last `window`
/// steps exceeds the mean over the window before it.
template <typename Eval>
DescentResult descend(std::vector<double> theta, std::vector<double> s, const OptimizerSpec& theta_opt,
                      const OptimizerSpec& s_opt, int steps, int window, Eval&& eval) {
  auto ot = make_optimizer(theta_opt);
  auto os = make_optimizer(s_opt);
  DescentResult out;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> objs;
  for (int t = 0;; ++t) {
    const Evaluation e = eval(theta, s);
    if (!std::isfinite(e.objective))
      throw NumericalError("adaptation objective became non-finite at step " + std::to_string(t));
    out.trace.push_back({t, e.data_residual, e.proximity, e.objective});
    objs.push_back(e.objective);
    if (e.objective < best) {
      best = e.objective;
      out.best_step = t;
      out.theta = theta;
      out.s = s;
    }
    if (t >= steps) break;
    const std::size_t n = objs.size(), w = static_cast<std::size_t>(window);
    if (w > 0 && n >= 2 * w) {
      double recent = 0.0, before = 0.0;
      for (std::size_t i = n - w; i < n; ++i) recent += objs[i];
      for (std::size_t i = n - 2 * w; i < n - w; ++i) before += objs[i];
      if (recent > before) {
        out.divergent = true;
        break;
      }
    }
    if (!theta.empty()) ot->step(theta, e.g_theta);
    if (!s.empty()) os->step(s, e.g_s);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameterize & Perturb

/// (1/N) sum_i ||A(s) f(y_i; theta, A(s)) - y_i||^2 + mu ||theta - theta0||^2
/// and its gradients in theta and (when want_s) in the family coordinates.
inline detail::Evaluation pnp_objective(const ReconNet& net0, const std::vector<double>& theta,
                                        const OperatorFamily& family, const std::vector<double>& s,
                                        const std::vector<Tensor>& ys, double mu, bool want_s) {
  if (ys.empty()) throw std::invalid_argument("pnp: empty measurement set");
  ReconNet net = net0;
  net.set_theta(theta);
  const Operator A = family.at(s);
  const std::size_t n = net.num_params(), q = want_s ? A->num_params() : 0;
  std::vector<double> loss(ys.size());
  std::vector<std::vector<double>> gt(ys.size()), gs(ys.size());
  parallel_for(ys.size(), [&](std::size_t i) {
    NetCache cache;
    const Tensor f = net.forward(*A, ys[i], &cache);
    const Tensor r = A->apply(f) - ys[i];
    loss[i] = squared_norm(r);
    const Tensor r2 = r * 2.0;
    gt[i].assign(n, 0.0);
    const Tensor gu = net.backward_image(cache, A->adjoint(r2), gt[i]);
    if (q > 0) {
      gs[i] = A->sigma_vjp(gu, ys[i]);
      const auto outer = A->sigma_vjp(f, r2);
      for (std::size_t j = 0; j < q; ++j) gs[i][j] += outer[j];
    }
  });
  const double inv = 1.0 / static_cast<double>(ys.size());
  detail::Evaluation e;
  e.g_theta.assign(n, 0.0);
  std::vector<double> g_params(q, 0.0);
  double data = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    data += loss[i];
    for (std::size_t j = 0; j < n; ++j) e.g_theta[j] += gt[i][j];
    for (std::size_t j = 0; j < q; ++j) g_params[j] += gs[i][j];
  }
  data *= inv;
  for (double& v : e.g_theta) v *= inv;
  for (double& v : g_params) v *= inv;
  const double prox2 = detail::sq_dist(theta, net0.theta());
  for (std::size_t j = 0; j < n; ++j) e.g_theta[j] += 2.0 * mu * (theta[j] - net0.theta()[j]);
  e.data_residual = std::sqrt(data);
  e.proximity = std::sqrt(prox2);
  e.objective = data + mu * prox2;
  if (want_s) e.g_s = family.pullback(s, g_params);
  return e;
}

namespace detail {

inline AdaptResult pnp_run(const ReconNet& net0, const OperatorFamily& family, std::vector<double> s0,
                           const std::vector<Tensor>& ys, const AdaptConfig& cfg) {
  cfg.validate();
  if (ys.empty()) throw std::invalid_argument("pnp: empty measurement set");
  if (s0.size() != family.dim()) throw ShapeError("pnp: sigma_init length does not match the family");
  const bool blind = family.dim() > 0;
  auto d = descend(net0.theta(), std::move(s0), cfg.opt, cfg.sigma_opt, cfg.opt_steps, cfg.divergence_window,
                   [&](const std::vector<double>& th, const std::vector<double>& s) {
                     return pnp_objective(net0, th, family, s, ys, cfg.mu, blind);
                   });
  AdaptResult res;
  ReconNet net = net0;
  net.set_theta(d.theta);
  res.x_hat = net.forward(*family.at(d.s), ys.front());
  res.theta1 = net.params();
  if (blind) res.sigma_hat = d.s;
  res.trace = std::move(d.trace);
  res.best_step = d.best_step;
  res.divergent = d.divergent;
  return res;
}

}  // namespace detail

/// Fine-tunes theta from theta0 on ||y - A1 f(y; theta, A1)||^2 + mu ||theta - theta0||^2.
/// mu = 0 is allowed for the proximity ablation.
inline AdaptResult pnp_adapt(const ReconNet& net0, const Operator& A1, const Tensor& y, const AdaptConfig& cfg) {
  return detail::pnp_run(net0, FrozenFamily(A1), {}, {y}, cfg);
}

/// Joint descent on (theta, sigma) when A1 is only known up to its family.
inline AdaptResult pnp_adapt_blind(const ReconNet& net0, const OperatorFamily& family,
                                   const std::vector<double>& sigma_init, const Tensor& y, const AdaptConfig& cfg) {
  return detail::pnp_run(net0, family, sigma_init, {y}, cfg);
}

/// Calibrated variant over a set of unpaired measurements; x_hat is the
/// reconstruction of ys[0]. Reuse res.theta1 (and sigma_hat) at deployment.
inline AdaptResult pnp_adapt_calibrated(const ReconNet& net0, const OperatorFamily& family,
                                        const std::vector<double>& sigma_init, const std::vector<Tensor>& ys,
                                        const AdaptConfig& cfg) {
  return detail::pnp_run(net0, family, sigma_init, ys, cfg);
}

inline AdaptResult pnp_adapt_calibrated(const ReconNet& net0, const Operator& A1, const std::vector<Tensor>& ys,
                                        const AdaptConfig& cfg) {
  return detail::pnp_run(net0, FrozenFamily(A1), {}, ys, cfg);
}

// ---------------------------------------------------------------------------
// Reuse & Regularize

struct UnrollTape {
  CgTape pinv;
  std::vector<NetCache> nets;
  std::vector<Tensor> xs, zs;
  std::vector<DcTape> dcs;
};

/// K iterations of  z = (1 - tau) x + tau f(A0 x; theta, A0),
/// x = dc_update(A1, y, z, lambda / tau),  from x = A1^+ y.
inline Tensor rnr_unroll(const ReconNet& net, const LinearOperator& A0, const LinearOperator& A1, const Tensor& y,
                         const AdaptConfig& cfg, UnrollTape* tape = nullptr,
                         std::vector<double>* residuals = nullptr) {
  cfg.validate();
  if (tape) *tape = UnrollTape{};
  const DcSolver solver = cfg.dc_solver();
  const double lam = cfg.lambda / cfg.tau;
  Tensor x = pseudo_inverse_apply(A1, y, cfg.pinv_iters, 1e-12, nullptr, tape ? &tape->pinv : nullptr);
  for (int k = 0; k < cfg.K; ++k) {
    NetCache cache;
    const Tensor gx = net.apply_image(gram(A0, x), tape ? &cache : nullptr);
    Tensor z;
    if (cfg.tau == 1.0) {
      z = gx;
    } else {
      z = x * (1.0 - cfg.tau);
      z.axpy(cfg.tau, gx);
    }
    DcTape dc;
    Tensor next = dc_update(A1, y, z, lam, solver, tape ? &dc : nullptr);
    if (!all_finite(next)) throw NumericalError("R&R iterate " + std::to_string(k + 1) + " is not finite");
    if (tape) {
      tape->xs.push_back(std::move(x));
      tape->nets.push_back(std::move(cache));
      tape->zs.push_back(std::move(z));
      tape->dcs.push_back(std::move(dc));
    }
    x = std::move(next);
    if (residuals) residuals->push_back(norm(A1.apply(x) - y));
  }
  return x;
}

struct UnrollGrads {
  std::vector<double> theta;
  Tensor y;
  std::vector<double> sigma;  // with respect to A1.params()
};

/// Reverse pass of rnr_unroll given the cotangent of its output.
inline UnrollGrads rnr_unroll_vjp(const ReconNet& net, const LinearOperator& A0, const LinearOperator& A1,
                                  const Tensor& y, const AdaptConfig& cfg, const UnrollTape& tape,
                                  const Tensor& x_bar) {
  const double lam = cfg.lambda / cfg.tau;
  UnrollGrads g;
  g.theta.assign(net.num_params(), 0.0);
  g.sigma.assign(A1.num_params(), 0.0);
  g.y = Tensor::zeros_like(y);
  Tensor xb = x_bar;
  for (int k = static_cast<int>(tape.dcs.size()) - 1; k >= 0; --k) {
    const DcGrads d = dc_update_vjp(A1, y, tape.zs[k], lam, tape.dcs[k], xb);
    g.y += d.y;
    for (std::size_t j = 0; j < g.sigma.size(); ++j) g.sigma[j] += d.sigma[j];
    const Tensor gu = net.backward_image(tape.nets[k], cfg.tau == 1.0 ? d.z : d.z * cfg.tau, g.theta);
    xb = gram(A0, gu);
    if (cfg.tau != 1.0) xb.axpy(1.0 - cfg.tau, d.z);
  }
  auto [gy, gs] = pseudo_inverse_vjp(A1, y, tape.pinv, xb);
  g.y += gy;
  for (std::size_t j = 0; j < g.sigma.size(); ++j) g.sigma[j] += gs[j];
  return g;
}

/// Reuses the A0-trained network as a regularizer for the drifted problem.
inline AdaptResult rnr_reconstruct(const ReconNet& net0, const Operator& A0, const Operator& A1, const Tensor& y,
                                   const AdaptConfig& cfg) {
  std::vector<double> res;
  AdaptResult out;
  out.x_hat = rnr_unroll(net0, *A0, *A1, y, cfg, nullptr, &res);
  for (std::size_t k = 0; k < res.size(); ++k)
    out.trace.push_back({static_cast<int>(k + 1), res[k], 0.0, res[k] * res[k]});
  out.best_step = cfg.K;
  return out;
}

/// Plain fixed-point scheme x <- f0(A0 x) from the same initialization.
inline Tensor fixed_point_iterate(const ReconNet& net0, const LinearOperator& A0, const LinearOperator& A1,
                                  const Tensor& y, const AdaptConfig& cfg, std::vector<Tensor>* iterates = nullptr) {
  Tensor x = pseudo_inverse_apply(A1, y, cfg.pinv_iters);
  for (int k = 0; k < cfg.K; ++k) {
    x = net0.autoencode(A0, x);
    if (iterates) iterates->push_back(x);
  }
  return x;
}

/// ||A(s) xhat(y; A(s)) - y||^2 with xhat the K-step unroll, and its gradient
/// in the family coordinates when grad is given.
inline double rnr_sigma_objective(const ReconNet& net0, const LinearOperator& A0, const OperatorFamily& family,
                                  const std::vector<double>& s, const Tensor& y, const AdaptConfig& cfg,
                                  std::vector<double>* grad = nullptr, Tensor* x_out = nullptr) {
  const Operator A = family.at(s);
  UnrollTape tape;
  const Tensor x = rnr_unroll(net0, A0, *A, y, cfg, grad ? &tape : nullptr);
  const Tensor r = A->apply(x) - y;
  if (x_out) *x_out = x;
  if (grad) {
    const Tensor r2 = r * 2.0;
    UnrollGrads g = rnr_unroll_vjp(net0, A0, *A, y, cfg, tape, A->adjoint(r2));
    if (A->num_params() > 0) {
      const auto direct = A->sigma_vjp(x, r2);
      for (std::size_t j = 0; j < g.sigma.size(); ++j) g.sigma[j] += direct[j];
    }
    *grad = family.pullback(s, g.sigma);
  }
  return squared_norm(r);
}

/// Estimates sigma by descending the data misfit of the unrolled estimator.
inline AdaptResult rnr_estimate_sigma(const ReconNet& net0, const Operator& A0, const OperatorFamily& family,
                                      const std::vector<double>& sigma_init, const Tensor& y,
                                      const AdaptConfig& cfg) {
  cfg.validate();
  if (sigma_init.size() != family.dim()) throw ShapeError("rnr_estimate_sigma: sigma_init length mismatch");
  auto d = detail::descend({}, sigma_init, cfg.opt, cfg.sigma_opt, cfg.sigma_steps, cfg.divergence_window,
                           [&](const std::vector<double>&, const std::vector<double>& s) {
                             detail::Evaluation e;
                             e.objective = rnr_sigma_objective(net0, *A0, family, s, y, cfg, &e.g_s);
                             e.data_residual = std::sqrt(e.objective);
                             return e;
                           });
  AdaptResult out;
  out.x_hat = rnr_unroll(net0, *A0, *family.at(d.s), y, cfg);
  out.sigma_hat = d.s;
  out.trace = std::move(d.trace);
  out.best_step = d.best_step;
  out.divergent = d.divergent;
  return out;
}

/// ||A1 xhat(y; theta) - y||^2 + plus_mu ||theta - theta0||^2 and its theta gradient.
inline detail::Evaluation rnr_plus_objective(const ReconNet& net0, const std::vector<double>& theta,
                                             const Operator& A0, const Operator& A1, const Tensor& y,
                                             const AdaptConfig& cfg) {
  ReconNet net = net0;
  net.set_theta(theta);
  UnrollTape tape;
  const Tensor x = rnr_unroll(net, *A0, *A1, y, cfg, &tape);
  const Tensor r = A1->apply(x) - y;
  detail::Evaluation e;
  e.g_theta = rnr_unroll_vjp(net, *A0, *A1, y, cfg, tape, A1->adjoint(r * 2.0)).theta;
  const double prox2 = detail::sq_dist(theta, net0.theta());
  if (cfg.plus_mu > 0.0)
    for (std::size_t j = 0; j < theta.size(); ++j) e.g_theta[j] += 2.0 * cfg.plus_mu * (theta[j] - net0.theta()[j]);
  e.data_residual = norm(r);
  e.proximity = std::sqrt(prox2);
  e.objective = squared_norm(r) + cfg.plus_mu * prox2;
  return e;
}

/// Fine-tunes the network inside the unrolled R&R estimator on the single
/// measurement's data misfit, keeping the best-residual parameters.
inline AdaptResult rnr_plus(const ReconNet& net0, const Operator& A0, const Operator& A1, const Tensor& y,
                            const AdaptConfig& cfg) {
  cfg.validate();
  auto d = detail::descend(net0.theta(), {}, cfg.plus_opt.value_or(cfg.opt), cfg.sigma_opt,
                           cfg.plus_steps.value_or(cfg.opt_steps), cfg.divergence_window,
                           [&](const std::vector<double>& th, const std::vector<double>&) {
                             return rnr_plus_objective(net0, th, A0, A1, y, cfg);
                           });
  ReconNet net = net0;
  net.set_theta(d.theta);
  AdaptResult out;
  out.x_hat = rnr_unroll(net, *A0, *A1, y, cfg);
  out.theta1 = net.params();
  out.trace = std::move(d.trace);
  out.best_step = d.best_step;
  out.divergent = d.divergent;
  return out;
}

}  // namespace driftadapt
