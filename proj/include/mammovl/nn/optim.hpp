#pragma once

#include "mammovl/nn/layers.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace mammovl::nn {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// One AdamW step on a flat parameter block. Decay is decoupled: it shrinks
/// the parameters directly and never enters the moment estimates.
/// `step` is 1-based.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  long step, const AdamWConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    double p = static_cast<double>(param[i]);
    p -= cfg.learning_rate * cfg.weight_decay * p;
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    p -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    param[i] = static_cast<T>(p);
  }
}

class AdamW {
 public:
  AdamW(ParameterList params, AdamWConfig cfg);

  /// Applies one update using the accumulated gradients. Parameters without
  /// a gradient this step are left untouched (no decay either).
  void step();
  void zero_grad();
  long steps() const noexcept { return steps_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  ParameterList params_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long steps_ = 0;
};

}  // namespace mammovl::nn
