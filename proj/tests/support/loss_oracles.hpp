#pragma once

// Independent reference implementations for the loss tests. Written as plain
// scalar loops straight from the definitions, without log-sum-exp or any
// shared code with the library.

#include "mammovl/objectives.hpp"

#include <cmath>
#include <vector>

namespace oracle {

inline double contrastive_naive(const mammovl::MatrixD& s, double tau = 1.0) {
  const auto n = s.rows();
  double a = 0.0;
  double b = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0.0;
    double col = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row += std::exp(s(i, j) / tau);
      col += std::exp(s(j, i) / tau);
    }
    a += std::log(std::exp(s(i, i) / tau) / row);
    b += std::log(std::exp(s(i, i) / tau) / col);
  }
  return -a / n - b / n;
}

inline double mlm_naive(const std::vector<mammovl::MatrixD>& logits,
                        const std::vector<mammovl::MaskingOutcome>& outcomes) {
  double total = 0.0;
  int count = 0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    for (std::size_t k = 0; k < outcomes[b].target_positions.size(); ++k) {
      const auto row = logits[b].row(outcomes[b].target_positions[k]);
      double denom = 0.0;
      for (Eigen::Index v = 0; v < row.size(); ++v) denom += std::exp(row(v));
      total += -std::log(std::exp(row(outcomes[b].target_ids[k])) / denom);
      ++count;
    }
  }
  return total / count;
}

/// Central difference of f at x along every coordinate of x.
template <typename F>
mammovl::MatrixD central_difference(F&& f, mammovl::MatrixD x, double h = 1e-5) {
  mammovl::MatrixD g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double up = f(x);
    x.data()[i] = orig - h;
    const double down = f(x);
    x.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a - n| / max(|a|, |n|, floor) over all coordinates.
inline double max_relative_error(const mammovl::MatrixD& analytic, const mammovl::MatrixD& numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace oracle
