#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ddl/nn/layers.hpp"

namespace ddl {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over named parameters. Moments are keyed by parameter name so the
// state can be written to and read back from a checkpoint container.
template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  template <typename Model>
  void step(Model& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    model.visit([&](nn::Param<S>& p) {
      auto& [m, v] = slot(p);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        p.value[i] -= static_cast<S>(cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
      }
    });
  }

  std::map<std::string, std::pair<Tensor<S>, Tensor<S>>>& moments() { return moments_; }
  const std::map<std::string, std::pair<Tensor<S>, Tensor<S>>>& moments() const { return moments_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::pair<Tensor<S>, Tensor<S>>& slot(const nn::Param<S>& p) {
    auto it = moments_.find(p.name);
    if (it == moments_.end())
      it = moments_.emplace(p.name, std::make_pair(Tensor<S>(p.value.shape()), Tensor<S>(p.value.shape()))).first;
    return it->second;
  }

  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<Tensor<S>, Tensor<S>>> moments_;
};

// Adam for a single scalar, kept in double.
class ScalarAdam {
 public:
  explicit ScalarAdam(AdamConfig cfg = {}) : cfg_(cfg) {}

  double step(double value, double grad) {
    ++t;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad * grad;
    const double mh = m / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t)));
    const double vh = v / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t)));
    return value - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
  }

  double m = 0.0, v = 0.0;
  std::uint64_t t = 0;

 private:
  AdamConfig cfg_;
};

}  // namespace ddl
