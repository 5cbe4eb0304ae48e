#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "driftadapt/linops.hpp"
#include "driftadapt/network.hpp"
#include "driftadapt/optim.hpp"
#include "driftadapt/parallel.hpp"
#include "driftadapt/random.hpp"

namespace driftadapt {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double noise_sigma = 0.01;
  OptimizerSpec opt = OptimizerSpec::adam(1e-3);
  double final_lr_fraction = 1.0;  // cosine decay to opt.lr * fraction over the epochs; 1 disables
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> train_loss;  // mean 0.5||f(y) - x||^2 per epoch
  std::vector<double> val_loss;    // index 0 is the initial network
  int best_epoch = 0;              // 0 means the initial parameters were kept
  double best_val_loss = 0.0;
};

/// Fixed-noise measurements for a validation or test set; sample i uses
/// operator ops[i % ops.size()].
inline std::vector<Tensor> simulate_measurements(const std::vector<Operator>& ops, const std::vector<Tensor>& xs,
                                                 double sigma, std::uint64_t seed) {
  if (ops.empty()) throw std::invalid_argument("simulate_measurements: no operators");
  std::vector<Tensor> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Rng rng(seed ^ (0x51ED270B27A3A4F1ULL * (i + 1)));
    ys[i] = add_noise(ops[i % ops.size()]->apply(xs[i]), sigma, rng);
  }
  return ys;
}

inline double reconstruction_loss(const ReconNet& net, const std::vector<Operator>& ops, const std::vector<Tensor>& xs,
                                  const std::vector<Tensor>& ys) {
  std::vector<double> per(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) {
    per[i] = 0.5 * squared_norm(net.forward(*ops[i % ops.size()], ys[i]) - xs[i]);
  });
  double s = 0.0;
  for (double v : per) s += v;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

/// Minimizes the mean of 0.5||f(y_i) - x_i||^2 with measurements redrawn
/// (fresh noise) every epoch; keeps the parameters with the lowest
/// validation loss. Multiple operators are assigned round-robin.
inline TrainReport train_supervised(ReconNet& net, const std::vector<Operator>& ops, const std::vector<Tensor>& train,
                                    const std::vector<Tensor>& val, const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("train_supervised: empty training set");
  if (ops.empty()) throw std::invalid_argument("train_supervised: no forward model");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw std::invalid_argument("train_supervised: bad schedule");
  Rng rng(cfg.seed);
  auto opt = make_optimizer(cfg.opt);
  const std::vector<Tensor> val_y = simulate_measurements(ops, val, cfg.noise_sigma, cfg.seed ^ 0xA5A5A5A5ULL);

  TrainReport rep;
  std::vector<double> best = net.theta();
  rep.best_val_loss = val.empty() ? std::numeric_limits<double>::infinity() : reconstruction_loss(net, ops, val, val_y);
  rep.val_loss.push_back(rep.best_val_loss);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n = net.num_params();
  std::vector<double> theta = net.theta();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.final_lr_fraction != 1.0 && cfg.epochs > 1) {
      const double t = static_cast<double>(epoch - 1) / (cfg.epochs - 1);
      const double f = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
      opt->set_lr(cfg.opt.lr * f);
    }
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    Rng noise = rng.fork(static_cast<std::uint64_t>(epoch));
    // noise drawn up front in sample order so the result is thread-count independent
    std::vector<Tensor> ys(train.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t i = order[k];
      ys[i] = add_noise(ops[i % ops.size()]->apply(train[i]), cfg.noise_sigma, noise);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bs = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<std::vector<double>> grads(bs);
      std::vector<double> losses(bs);
      parallel_for(bs, [&](std::size_t b) {
        const std::size_t i = order[start + b];
        const LinearOperator& A = *ops[i % ops.size()];
        NetCache cache;
        const Tensor out = net.forward(A, ys[i], &cache);
        const Tensor r = out - train[i];
        losses[b] = 0.5 * squared_norm(r);
        grads[b].assign(n, 0.0);
        net.backward_image(cache, r, grads[b]);
      });
      std::vector<double> g(n, 0.0);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < bs; ++b) {
        batch_loss += losses[b];
        for (std::size_t j = 0; j < n; ++j) g[j] += grads[b][j];
      }
      if (!std::isfinite(batch_loss))
        throw NumericalError("train_supervised: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(start / cfg.batch_size));
      for (double& v : g) v /= static_cast<double>(bs);
      opt->step(theta, g);
      net.set_theta(theta);
      epoch_loss += batch_loss;
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    const double vl = val.empty() ? rep.train_loss.back() : reconstruction_loss(net, ops, val, val_y);
    rep.val_loss.push_back(vl);
    if (vl < rep.best_val_loss) {
      rep.best_val_loss = vl;
      rep.best_epoch = epoch;
      best = theta;
    }
  }
  net.set_theta(best);
  return rep;
}

inline TrainReport train_supervised(ReconNet& net, const Operator& A0, const std::vector<Tensor>& train,
                                    const std::vector<Tensor>& val, const TrainConfig& cfg) {
  return train_supervised(net, std::vector<Operator>{A0}, train, val, cfg);
}

}  // namespace driftadapt
