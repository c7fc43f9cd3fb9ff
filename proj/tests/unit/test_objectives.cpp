#include "gradient_suite.hpp"
#include "loss_oracles.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"
#include "mammovl/objectives.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace mammovl;

namespace {

MatrixD random_unit_rows(int n, int d, Rng& rng) {
  MatrixD m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  for (int r = 0; r < n; ++r) m.row(r).normalize();
  return m;
}

TokenSequence make_tokens(std::vector<int> ids, int valid) {
  TokenSequence t;
  t.ids = std::move(ids);
  t.attention_mask.assign(t.ids.size(), 0);
  for (int i = 0; i < valid; ++i) t.attention_mask[i] = 1;
  return t;
}

}  // namespace

TEST_CASE("similarity matrix examples") {
  MatrixD e = MatrixD::Identity(2, 2);
  CHECK(similarity_matrix(e, e).s.isApprox(MatrixD::Identity(2, 2)));

  MatrixD ones = MatrixD::Zero(4, 3);
  ones.col(0).setOnes();
  CHECK(similarity_matrix(ones, ones).s.isApprox(MatrixD::Ones(4, 4)));

  Rng rng(3);
  const MatrixD v = random_unit_rows(8, 5, rng);
  const MatrixD t = random_unit_rows(8, 5, rng);
  const MatrixD s = similarity_matrix(v, t).s;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 5; ++k) dot += v(i, k) * t(j, k);
      CHECK(std::abs(s(i, j) - dot) < 1e-6);
      CHECK(std::abs(s(i, j)) <= 1.0 + 1e-6);
    }
}

TEST_CASE("similarity matrix rejects non-unit embeddings") {
  MatrixD v = MatrixD::Identity(2, 2) * 2.0;
  CHECK_THROWS_AS(similarity_matrix(v, MatrixD::Identity(2, 2)), ContractError);
}

TEST_CASE("contrastive loss examples") {
  SimilarityMatrix equal{MatrixD::Constant(4, 4, 0.3)};
  CHECK(std::abs(contrastive_loss(equal) - 2.0 * std::log(4.0)) < 1e-9);

  SimilarityMatrix id{MatrixD::Identity(2, 2)};
  const double expected = 2.0 * std::log(1.0 + std::exp(-1.0));
  CHECK(std::abs(expected - 0.626523) < 1e-6);
  CHECK(std::abs(contrastive_loss(id) - expected) < 1e-9);
  CHECK(std::abs(oracle::contrastive_naive(id.s) - expected) < 1e-12);

  SimilarityMatrix sat{MatrixD::Constant(3, 3, -50.0)};
  sat.s.diagonal().setConstant(50.0);
  CHECK(contrastive_loss(sat) < 1e-6);
}

TEST_CASE("contrastive loss matches the naive oracle with temperature") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + rng.below_int(7);
    const MatrixD s = random_unit_rows(n, 6, rng) * random_unit_rows(n, 6, rng).transpose();
    const double tau = rng.uniform(0.05, 2.0);
    CHECK(std::abs(contrastive_loss(SimilarityMatrix{s}, tau) - oracle::contrastive_naive(s, tau)) < 1e-9);
  }
}

TEST_CASE("contrastive loss parameter and degenerate cases") {
  SimilarityMatrix s{MatrixD::Identity(2, 2)};
  CHECK_THROWS_AS(contrastive_loss(s, 0.0), ParameterError);
  CHECK_THROWS_AS(contrastive_loss(s, -1.0), ParameterError);
  log::set_level(log::Level::error);
  const auto r = contrastive_loss_with_grad(SimilarityMatrix{MatrixD::Constant(1, 1, 0.4)});
  log::set_level(log::Level::info);
  CHECK(r.loss == 0.0);
  CHECK(r.degenerate);
}

TEST_CASE("contrastive loss is invariant to a shared permutation of pairs") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixD v = random_unit_rows(6, 4, rng);
    const MatrixD t = random_unit_rows(6, 4, rng);
    const auto perm = rng.permutation(6);
    MatrixD pv(6, 4), pt(6, 4);
    for (int i = 0; i < 6; ++i) {
      pv.row(i) = v.row(static_cast<Eigen::Index>(perm[i]));
      pt.row(i) = t.row(static_cast<Eigen::Index>(perm[i]));
    }
    const double a = contrastive_loss(similarity_matrix(v, t));
    const double b = contrastive_loss(similarity_matrix(pv, pt));
    CHECK(std::abs(a - b) < 1e-9);
  }
}

TEST_CASE("contrastive loss decreases when a diagonal entry grows") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    MatrixD s = random_unit_rows(5, 4, rng) * random_unit_rows(5, 4, rng).transpose();
    const int i = rng.below_int(5);
    const double h = 1e-4;
    const double before = contrastive_loss(SimilarityMatrix{s});
    s(i, i) += h;
    const double after = contrastive_loss(SimilarityMatrix{s});
    CHECK(after < before);
  }
}

TEST_CASE("contrastive loss stays finite at extreme logits") {
  for (int n : {2, 4, 8}) {
    const double tau = 0.07;
    SimilarityMatrix s{MatrixD::Constant(n, n, 1000.0 * tau)};
    CHECK(contrastive_loss(s, tau) == 2.0 * std::log(static_cast<double>(n)));
  }
}

TEST_CASE("loss gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto e = gradient_suite::run({}, seed);
    CHECK(e.contrastive < 1e-4);
    CHECK(e.mlm < 1e-4);
    CHECK(e.combined < 1e-4);
  }
  gradient_suite::Config cfg;
  cfg.temperature = 0.2;
  const auto e = gradient_suite::run(cfg, 42);
  CHECK(e.contrastive < 1e-4);
}

TEST_CASE("mask_tokens selection rate and eligibility") {
  MaskingPolicy policy;
  policy.vocab_size = 40;
  Rng rng(123);
  std::size_t eligible = 0;
  std::size_t selected = 0;
  while (eligible < 100000) {
    TokenSequence t = make_tokens(std::vector<int>(64, Vocabulary::kPad), 50);
    t.ids[0] = Vocabulary::kCls;
    for (int i = 1; i < 50; ++i) t.ids[i] = Vocabulary::kNumSpecial + rng.below_int(36);
    const auto o = mask_tokens(t, policy, rng);
    eligible += 49;
    selected += o.target_positions.size();
    for (int p : o.target_positions) {
      CHECK(p >= 1);
      CHECK(p < 50);
    }
  }
  const double frac = static_cast<double>(selected) / static_cast<double>(eligible);
  CHECK(frac > 0.145);
  CHECK(frac < 0.155);
}

TEST_CASE("mask_tokens replacement policy and invariants") {
  MaskingPolicy policy;
  policy.vocab_size = 30;
  policy.probability = 0.5;
  Rng rng(9);
  std::size_t masked = 0, random_or_same = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    TokenSequence t = make_tokens(std::vector<int>(12, Vocabulary::kPad), 9);
    t.ids[0] = Vocabulary::kCls;
    for (int i = 1; i < 9; ++i) t.ids[i] = Vocabulary::kNumSpecial + rng.below_int(26);
    const auto o = mask_tokens(t, policy, rng);
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
      const bool target = std::find(o.target_positions.begin(), o.target_positions.end(),
                                    static_cast<int>(i)) != o.target_positions.end();
      if (!target) CHECK(o.masked_sequence.ids[i] == t.ids[i]);
    }
    for (std::size_t k = 0; k < o.target_positions.size(); ++k) {
      CHECK(o.target_ids[k] == t.ids[o.target_positions[k]]);
      const int now = o.masked_sequence.ids[o.target_positions[k]];
      if (now == Vocabulary::kMask) {
        ++masked;
      } else {
        ++random_or_same;
        CHECK_FALSE(Vocabulary::is_special(now));
      }
    }
    CHECK(o.masked_sequence.attention_mask == t.attention_mask);
  }
  const double mask_share = static_cast<double>(masked) / static_cast<double>(masked + random_or_same);
  CHECK(mask_share == doctest::Approx(0.8).epsilon(0.03));
}

TEST_CASE("mask_tokens edge cases") {
  MaskingPolicy policy;
  policy.vocab_size = 20;
  Rng rng(1);
  TokenSequence only_cls = make_tokens({Vocabulary::kCls, 0, 0, 0}, 1);
  CHECK(mask_tokens(only_cls, policy, rng).empty());

  TokenSequence t = make_tokens({1, 5, 6, 7, 8, 9, 10, 0}, 7);
  Rng a(77), b(77);
  const auto oa = mask_tokens(t, policy, a);
  const auto ob = mask_tokens(t, policy, b);
  CHECK(oa.masked_sequence == ob.masked_sequence);
  CHECK(oa.target_positions == ob.target_positions);
  CHECK(oa.target_ids == ob.target_ids);

  policy.probability = 0.0;
  CHECK_THROWS_AS(mask_tokens(t, policy, rng), ParameterError);
  policy.probability = 1.0;
  CHECK_THROWS_AS(mask_tokens(t, policy, rng), ParameterError);
}

TEST_CASE("mask_tokens never selects CLS or padding over random sequences") {
  MaskingPolicy policy;
  policy.vocab_size = 25;
  policy.probability = 0.9;
  Rng rng(2024);
  for (int trial = 0; trial < 10000; ++trial) {
    const int len = 2 + rng.below_int(15);
    const int valid = 1 + rng.below_int(len);
    TokenSequence t = make_tokens(std::vector<int>(len, 0), valid);
    t.ids[0] = Vocabulary::kCls;
    for (int i = 1; i < valid; ++i) t.ids[i] = rng.below_int(25);
    for (int i = valid; i < len; ++i) t.ids[i] = rng.below_int(25);  // junk in padding
    const auto o = mask_tokens(t, policy, rng);
    for (int p : o.target_positions) {
      REQUIRE(p > 0);
      REQUIRE(p < valid);
      REQUIRE_FALSE(Vocabulary::is_special(t.ids[p]));
    }
  }
}

TEST_CASE("mlm loss examples") {
  const int V = 11;
  MaskingOutcome o;
  o.target_positions = {1, 3};
  o.target_ids = {4, 9};
  std::vector<MatrixD> uniform{MatrixD::Constant(5, V, 0.25)};
  std::vector<MaskingOutcome> outs{o};
  CHECK(std::abs(mlm_loss(uniform, outs) - std::log(static_cast<double>(V))) < 1e-9);

  MaskingOutcome one;
  one.target_positions = {2};
  one.target_ids = {6};
  MatrixD sat = MatrixD::Constant(4, V, -50.0);
  sat(2, 6) = 50.0;
  CHECK(mlm_loss(std::vector<MatrixD>{sat}, std::vector<MaskingOutcome>{one}) < 1e-6);

  // Three masked tokens over two samples against the scalar oracle.
  MatrixD a(3, 4), b(3, 4);
  a << 0.1, 2.0, -1.0, 0.5, 1.5, 0.2, 0.3, -0.7, 0.0, 0.0, 0.0, 0.0;
  b << -0.3, 0.8, 1.1, 2.2, 0.4, -1.2, 0.9, 0.0, 3.0, 1.0, -2.0, 0.5;
  MaskingOutcome oa, ob;
  oa.target_positions = {0, 1};
  oa.target_ids = {1, 3};
  ob.target_positions = {2};
  ob.target_ids = {0};
  std::vector<MatrixD> logits{a, b};
  std::vector<MaskingOutcome> outcomes{oa, ob};
  CHECK(std::abs(mlm_loss(logits, outcomes) - oracle::mlm_naive(logits, outcomes)) < 1e-6);
}

TEST_CASE("mlm loss averages over tokens, not samples") {
  MatrixD a = MatrixD::Zero(3, 4);
  MatrixD b = MatrixD::Zero(3, 4);
  a(1, 2) = 3.0;  // confident, correct
  MaskingOutcome oa, ob;
  oa.target_positions = {1};
  oa.target_ids = {2};
  ob.target_positions = {0, 1, 2};
  ob.target_ids = {0, 1, 2};
  std::vector<MatrixD> logits{a, b};
  std::vector<MaskingOutcome> outcomes{oa, ob};
  const double la = -std::log(std::exp(3.0) / (std::exp(3.0) + 3.0));
  const double lb = std::log(4.0);
  CHECK(std::abs(mlm_loss(logits, outcomes) - (la + 3 * lb) / 4.0) < 1e-12);
}

TEST_CASE("mlm loss empty batch and non-negativity") {
  std::vector<MatrixD> logits{MatrixD::Zero(3, 5)};
  std::vector<MaskingOutcome> outcomes(1);
  const auto r = mlm_loss_with_grad(logits, outcomes);
  CHECK(r.empty_batch);
  CHECK(r.loss == 0.0);

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    MatrixD l = gradient_suite::random_matrix(4, 6, rng, 3.0);
    MaskingOutcome o;
    o.target_positions = {rng.below_int(4)};
    o.target_ids = {rng.below_int(6)};
    CHECK(mlm_loss(std::vector<MatrixD>{l}, std::vector<MaskingOutcome>{o}) > 0.0);
  }
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(2.0, 3.0, 0.0).total == 2.0);
  CHECK(combined_loss(2.0, 3.0, 1.0).total == 5.0);
  const auto b = combined_loss(0.6265, 10.326, 0.5);
  CHECK(std::abs(b.total - 5.7895) < 1e-12);
  CHECK(b.total == b.contrastive + b.lambda * b.mlm);

  try {
    combined_loss(std::nan(""), 1.0, 1.0);
    FAIL("expected NumericalAbort");
  } catch (const NumericalAbort& e) {
    CHECK(e.component() == "contrastive");
  }
  try {
    combined_loss(1.0, INFINITY, 1.0);
    FAIL("expected NumericalAbort");
  } catch (const NumericalAbort& e) {
    CHECK(e.component() == "mlm");
  }
}
