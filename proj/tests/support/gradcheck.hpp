#pragma once

// Finite-difference checker for float autograd ops. The probe loss is
// sum(out * R) for a fixed random R, so every output element participates.

#include "mammovl/nn/autograd.hpp"
#include "mammovl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

using mammovl::nn::Tensor;
using mammovl::nn::Var;

struct Result {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
};

inline double probe(const Var& out, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < r.numel(); ++i) s += static_cast<double>(out.value()[i]) * r[i];
  return s;
}

/// `fn` rebuilds the graph from `inputs` each call.
inline Result check(const std::function<Var(std::vector<Var>&)>& fn, std::vector<Var>& inputs,
                    std::uint64_t seed = 7, float h = 1e-2f) {
  mammovl::Rng rng(seed);
  Var out = fn(inputs);
  Tensor r(out.value().shape());
  for (auto& v : r.storage()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto& in : inputs) in.zero_grad();
  std::pair<Var, Tensor> seed_pair{out, r};
  mammovl::nn::backward(std::span<const std::pair<Var, Tensor>>(&seed_pair, 1));

  Result res;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const Tensor analytic = in.grad();
    auto& values = in.value().storage();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float orig = values[i];
      values[i] = orig + h;
      const double up = probe(fn(inputs), r);
      values[i] = orig - h;
      const double down = probe(fn(inputs), r);
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric);
      res.max_abs_error = std::max(res.max_abs_error, err);
      res.max_rel_error = std::max(res.max_rel_error, err / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return res;
}

inline Var random_leaf(std::vector<int> shape, mammovl::Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * scale);
  return Var(std::move(t), true);
}

}  // namespace gradcheck
