#include "gradcheck.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/nn/layers.hpp"
#include "mammovl/nn/ops.hpp"
#include "mammovl/nn/optim.hpp"

#include <doctest.h>

#include <array>
#include <cmath>

using namespace mammovl;
using namespace mammovl::nn;
using gradcheck::random_leaf;

namespace {
constexpr double kTol = 2e-2;
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(1);
  std::vector<Var> in{random_leaf({3, 4}, rng), random_leaf({4, 5}, rng), random_leaf({5}, rng)};
  auto r = gradcheck::check([](std::vector<Var>& v) { return matmul(v[0], v[1]); }, in);
  CHECK(r.max_rel_error < kTol);
  r = gradcheck::check([](std::vector<Var>& v) { return linear(v[0], v[1], v[2]); }, in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(2);
  std::vector<Var> in{random_leaf({4, 6}, rng), random_leaf({4, 6}, rng)};
  CHECK(gradcheck::check([](std::vector<Var>& v) { return gelu(add(v[0], v[1])); }, in).max_rel_error < kTol);
  CHECK(gradcheck::check([](std::vector<Var>& v) { return scale(relu(v[0]), 1.7f); }, in).max_rel_error < kTol);
}

TEST_CASE("layer norm gradient") {
  Rng rng(3);
  std::vector<Var> in{random_leaf({5, 8}, rng), random_leaf({8}, rng), random_leaf({8}, rng)};
  auto r = gradcheck::check([](std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); }, in, 3, 5e-3f);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("row gather, slice, concat and embedding gradients") {
  Rng rng(4);
  std::vector<Var> in{random_leaf({6, 3}, rng), random_leaf({2, 3}, rng)};
  auto r = gradcheck::check(
      [](std::vector<Var>& v) {
        const std::array<int, 4> rows{5, 0, 0, 2};
        return concat_rows({gather_rows(v[0], rows), slice_rows(v[0], 1, 3), v[1]});
      },
      in);
  CHECK(r.max_rel_error < kTol);
  r = gradcheck::check(
      [](std::vector<Var>& v) {
        const std::array<int, 5> ids{1, 1, 4, 0, 5};
        return embedding(v[0], ids);
      },
      in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("embedding rejects out-of-vocabulary ids") {
  Var table(Tensor({4, 2}), true);
  const std::array<int, 1> bad{4};
  CHECK_THROWS_AS(embedding(table, bad), VocabularyError);
}

TEST_CASE("attention gradient with key padding") {
  Rng rng(5);
  std::vector<Var> in{random_leaf({2 * 4, 8}, rng, 0.5), random_leaf({2 * 4, 8}, rng, 0.5),
                      random_leaf({2 * 4, 8}, rng, 0.5)};
  const std::array<std::uint8_t, 8> mask{1, 1, 1, 0, 1, 1, 0, 0};
  auto r = gradcheck::check([&](std::vector<Var>& v) { return attention(v[0], v[1], v[2], 2, 4, 2, mask); }, in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("attention ignores masked keys") {
  Rng rng(6);
  Var q = random_leaf({3, 4}, rng);
  Var k = random_leaf({3, 4}, rng);
  Var v = random_leaf({3, 4}, rng);
  const std::array<std::uint8_t, 3> mask{1, 1, 0};
  const Tensor before = attention(q, k, v, 1, 3, 2, mask).value();
  k.value().at(2, 0) += 5.0f;
  v.value().at(2, 1) -= 3.0f;
  const Tensor after = attention(q, k, v, 1, 3, 2, mask).value();
  CHECK(before.storage() == after.storage());
}

TEST_CASE("conv2d and pooling gradients") {
  Rng rng(7);
  std::vector<Var> in{random_leaf({2, 2, 7, 6}, rng), random_leaf({3, 2 * 9}, rng, 0.3), random_leaf({3}, rng)};
  auto r = gradcheck::check(
      [](std::vector<Var>& v) { return adaptive_avg_pool_flat(conv2d(v[0], v[1], v[2], 3, 2, 1), 2, 2); }, in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("global max pool and column concat gradients") {
  Rng rng(8);
  std::vector<Var> in{random_leaf({2, 3, 5, 4}, rng), random_leaf({2, 4}, rng)};
  auto r = gradcheck::check(
      [](std::vector<Var>& v) { return concat_cols({global_max_pool(v[0]), v[1], adaptive_avg_pool_flat(v[0], 1, 1)}); },
      in);
  CHECK(r.max_rel_error < kTol);
  const Var x(Tensor({1, 1, 2, 2}, {0.5f, 3.0f, -1.0f, 2.0f}));
  CHECK(global_max_pool(x).value()[0] == 3.0f);
}

TEST_CASE("conv2d matches a direct convolution") {
  Rng rng(8);
  Var x = random_leaf({1, 2, 5, 5}, rng);
  Var w = random_leaf({1, 18}, rng);
  Var b(Tensor({1}, 0.25f), true);
  const Tensor out = conv2d(x, w, b, 3, 1, 1).value();
  REQUIRE(out.shape() == std::vector<int>{1, 1, 5, 5});
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox) {
      double acc = 0.25;
      for (int c = 0; c < 2; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy + ky - 1, ix = ox + kx - 1;
            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
            acc += w.value()[(c * 3 + ky) * 3 + kx] * x.value()[(c * 5 + iy) * 5 + ix];
          }
      CHECK(out[oy * 5 + ox] == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("l2 normalization gradient and zero-vector guard") {
  Rng rng(9);
  std::vector<Var> in{random_leaf({3, 5}, rng)};
  CHECK(gradcheck::check([](std::vector<Var>& v) { return l2_normalize_rows(v[0]); }, in).max_rel_error < kTol);

  Var zero(Tensor({1, 4}), true);
  const Var y = l2_normalize_rows(zero, 1e-12f);
  for (float v : y.value().storage()) CHECK(v == 0.0f);
  backward(std::vector<std::pair<Var, Tensor>>{{y, Tensor({1, 4}, 1.0f)}});
  CHECK(zero.grad().all_finite());
}

TEST_CASE("softmax cross-entropy gradient") {
  Rng rng(10);
  std::vector<Var> in{random_leaf({4, 5}, rng)};
  const std::array<int, 4> targets{0, 4, 2, 2};
  auto r = gradcheck::check([&](std::vector<Var>& v) { return softmax_cross_entropy(v[0], targets); }, in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("transformer block gradient") {
  Rng rng(11);
  TransformerBlock block(8, 2, 16, rng);
  std::vector<Var> in{random_leaf({2 * 3, 8}, rng)};
  const std::array<std::uint8_t, 6> mask{1, 1, 0, 1, 1, 1};
  auto r = gradcheck::check([&](std::vector<Var>& v) { return block.forward(v[0], 2, 3, mask); }, in);
  CHECK(r.max_rel_error < kTol);
}

TEST_CASE("no-grad guard suppresses recording") {
  Var a(Tensor({2, 2}, 1.0f), true);
  {
    NoGradGuard guard;
    CHECK_FALSE(scale(a, 2.0f).requires_grad());
  }
  CHECK(scale(a, 2.0f).requires_grad());
}

TEST_CASE("AdamW step on a quadratic bowl matches the hand-computed update") {
  // f(p) = 0.5 * a * p^2, so g = a * p.
  const double a = 3.0;
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.05;
  std::array<double, 1> p{2.0};
  std::array<double, 1> m{0.0};
  std::array<double, 1> v{0.0};

  // step 1
  double g = a * p[0];
  std::array<double, 1> grad{g};
  adamw_update<double>(p, grad, m, v, 1, cfg);
  const double m1 = (1 - cfg.beta1) * g;
  const double v1 = (1 - cfg.beta2) * g * g;
  double expected = 2.0 - 0.1 * 0.05 * 2.0;
  expected -= 0.1 * (m1 / (1 - cfg.beta1)) / (std::sqrt(v1 / (1 - cfg.beta2)) + cfg.eps);
  CHECK(std::abs(p[0] - expected) < 1e-10);
  // Decay never enters the moments.
  CHECK(std::abs(m[0] - m1) < 1e-15);
  CHECK(std::abs(v[0] - v1) < 1e-15);

  // step 2
  const double p1 = p[0];
  g = a * p1;
  grad[0] = g;
  adamw_update<double>(p, grad, m, v, 2, cfg);
  const double m2 = cfg.beta1 * m1 + (1 - cfg.beta1) * g;
  const double v2 = cfg.beta2 * v1 + (1 - cfg.beta2) * g * g;
  expected = p1 - 0.1 * 0.05 * p1;
  expected -= 0.1 * (m2 / (1 - cfg.beta1 * cfg.beta1)) / (std::sqrt(v2 / (1 - cfg.beta2 * cfg.beta2)) + cfg.eps);
  CHECK(std::abs(p[0] - expected) < 1e-10);
}

TEST_CASE("AdamW optimizer descends a quadratic") {
  Var w(Tensor({1, 3}, std::vector<float>{1.0f, -2.0f, 0.5f}), true);
  AdamWConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;
  AdamW opt({{"w", w}}, cfg);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    w.grad().mat() += w.value().mat();  // gradient of 0.5 * ||w||^2
    opt.step();
  }
  for (float v : w.value().storage()) CHECK(std::abs(v) < 0.05f);
}
