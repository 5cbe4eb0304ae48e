#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace driftadapt {

struct OptimizerSpec {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;  // sgd only

  static OptimizerSpec adam(double lr) { return {Kind::adam, lr}; }
  static OptimizerSpec sgd(double lr, double momentum = 0.0) {
    OptimizerSpec s;
    s.kind = Kind::sgd;
    s.lr = lr;
    s.momentum = momentum;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const OptimizerSpec& s) {
  j = {{"kind", s.kind == OptimizerSpec::Kind::adam ? "adam" : "sgd"}, {"lr", s.lr}};
  if (s.kind == OptimizerSpec::Kind::adam) {
    j["beta1"] = s.beta1;
    j["beta2"] = s.beta2;
    j["eps"] = s.eps;
  } else {
    j["momentum"] = s.momentum;
  }
}

inline void from_json(const nlohmann::json& j, OptimizerSpec& s) {
  s = OptimizerSpec{};
  const std::string kind = j.value("kind", std::string("adam"));
  if (kind == "adam")
    s.kind = OptimizerSpec::Kind::adam;
  else if (kind == "sgd")
    s.kind = OptimizerSpec::Kind::sgd;
  else
    throw std::invalid_argument("unknown optimizer kind '" + kind + "'");
  s.lr = j.value("lr", s.lr);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.eps = j.value("eps", s.eps);
  s.momentum = j.value("momentum", s.momentum);
  if (!(s.lr > 0.0)) throw std::invalid_argument("optimizer lr must be positive");
}

/// step(params, grads): in-place update. Owns its moment buffers.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<double>& params, const std::vector<double>& grads) = 0;
  virtual void set_lr(double lr) = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(OptimizerSpec s) : spec_(s) {}
  void set_lr(double lr) override { spec_.lr = lr; }
  void step(std::vector<double>& p, const std::vector<double>& g) override {
    if (p.size() != g.size()) throw std::invalid_argument("sgd: gradient length mismatch");
    if (spec_.momentum == 0.0) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= spec_.lr * g[i];
      return;
    }
    if (v_.empty()) v_.assign(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v_[i] = spec_.momentum * v_[i] + g[i];
      p[i] -= spec_.lr * v_[i];
    }
  }

 private:
  OptimizerSpec spec_;
  std::vector<double> v_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(OptimizerSpec s) : spec_(s) {}
  void set_lr(double lr) override { spec_.lr = lr; }
  void step(std::vector<double>& p, const std::vector<double>& g) override {
    if (p.size() != g.size()) throw std::invalid_argument("adam: gradient length mismatch");
    if (m_.empty()) {
      m_.assign(p.size(), 0.0);
      v_.assign(p.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(spec_.beta1, t_);
    const double c2 = 1.0 - std::pow(spec_.beta2, t_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[i] = spec_.beta1 * m_[i] + (1.0 - spec_.beta1) * g[i];
      v_[i] = spec_.beta2 * v_[i] + (1.0 - spec_.beta2) * g[i] * g[i];
      p[i] -= spec_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + spec_.eps);
    }
  }

 private:
  OptimizerSpec spec_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

inline std::unique_ptr<Optimizer> make_optimizer(const OptimizerSpec& s) {
  if (s.kind == OptimizerSpec::Kind::adam) return std::make_unique<Adam>(s);
  return std::make_unique<Sgd>(s);
}

}  // namespace driftadapt
