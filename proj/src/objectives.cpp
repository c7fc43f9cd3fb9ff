#include "mammovl/objectives.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"

#include <cmath>
#include <limits>

namespace mammovl {

namespace {

struct ShiftedLse {
  double max = 0.0;
  double log_sum = 0.0;  // log(sum_j exp(x_j - max))
  double value() const { return max + log_sum; }
};

template <typename Vec>
ShiftedLse shifted_lse(const Vec& x) {
  ShiftedLse r;
  r.max = x.maxCoeff();
  r.log_sum = std::log((x.array() - r.max).exp().sum());
  return r;
}

// -log softmax(x)_k, keeping the max shift separate so that equal logits give
// exactly log(n).
template <typename Vec>
double neg_log_softmax(const Vec& x, Eigen::Index k, const ShiftedLse& l) {
  return (l.max - x(k)) + l.log_sum;
}

}  // namespace

SimilarityMatrix similarity_matrix(const MatrixD& image_embeddings, const MatrixD& text_embeddings,
                                   double unit_tolerance) {
  if (image_embeddings.rows() < 1 || image_embeddings.rows() != text_embeddings.rows()) {
    throw ContractError("similarity_matrix needs two non-empty lists of equal length");
  }
  if (image_embeddings.cols() != text_embeddings.cols()) {
    throw ShapeError("image and text embeddings differ in dimension");
  }
  auto check = [unit_tolerance](const MatrixD& m, const char* what) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double n = m.row(r).norm();
      if (!(std::abs(n - 1.0) <= unit_tolerance)) {
        throw ContractError(std::string(what) + " embedding " + std::to_string(r) +
                            " is not unit norm (norm = " + std::to_string(n) + ")");
      }
    }
  };
  check(image_embeddings, "image");
  check(text_embeddings, "text");
  return SimilarityMatrix{image_embeddings * text_embeddings.transpose()};
}

ContrastiveResult contrastive_loss_with_grad(const SimilarityMatrix& sim, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  const MatrixD& s = sim.s;
  if (s.rows() != s.cols() || s.rows() < 1) throw ShapeError("similarity matrix must be square and non-empty");
  const Eigen::Index n = s.rows();
  ContrastiveResult out;
  out.grad_s = MatrixD::Zero(n, n);
  if (n == 1) {
    log::warn("contrastive loss on a batch of one pair is degenerate; returning 0");
    out.degenerate = true;
    return out;
  }
  const MatrixD z = s / temperature;
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  // Row softmax (image i against all texts) and column softmax (text i
  // against all images).
  for (Eigen::Index i = 0; i < n; ++i) {
    const ShiftedLse row = shifted_lse(z.row(i));
    const ShiftedLse col = shifted_lse(z.col(i));
    image_to_text += neg_log_softmax(z.row(i), i, row);
    text_to_image += neg_log_softmax(z.col(i), i, col);
    const double lse_row = row.value();
    const double lse_col = col.value();
    for (Eigen::Index j = 0; j < n; ++j) {
      out.grad_s(i, j) += std::exp(z(i, j) - lse_row);
      out.grad_s(j, i) += std::exp(z(j, i) - lse_col);
    }
    out.grad_s(i, i) -= 2.0;
  }
  out.loss = (image_to_text + text_to_image) / static_cast<double>(n);
  out.grad_s /= static_cast<double>(n) * temperature;
  return out;
}

double contrastive_loss(const SimilarityMatrix& s, double temperature) {
  return contrastive_loss_with_grad(s, temperature).loss;
}

EmbeddingLossGrad contrastive_embedding_loss(const MatrixD& image_embeddings,
                                             const MatrixD& text_embeddings, double temperature) {
  if (image_embeddings.rows() != text_embeddings.rows() ||
      image_embeddings.cols() != text_embeddings.cols()) {
    throw ShapeError("contrastive_embedding_loss: embedding shapes differ");
  }
  const SimilarityMatrix s{image_embeddings * text_embeddings.transpose()};
  auto r = contrastive_loss_with_grad(s, temperature);
  EmbeddingLossGrad out;
  out.loss = r.loss;
  out.grad_image = r.grad_s * text_embeddings;
  out.grad_text = r.grad_s.transpose() * image_embeddings;
  return out;
}

MaskingOutcome mask_tokens(const TokenSequence& tokens, const MaskingPolicy& policy, Rng& rng) {
  if (!(policy.probability > 0.0 && policy.probability < 1.0)) {
    throw ParameterError("masking probability must lie in (0, 1)");
  }
  if (policy.vocab_size <= Vocabulary::kNumSpecial) {
    throw ParameterError("masking policy needs a vocabulary with at least one regular token");
  }
  MaskingOutcome out;
  out.masked_sequence = tokens;
  const int regular = policy.vocab_size - Vocabulary::kNumSpecial;
  for (std::size_t i = 1; i < tokens.ids.size(); ++i) {
    if (!tokens.attention_mask[i] || Vocabulary::is_special(tokens.ids[i])) continue;
    if (rng.uniform() >= policy.probability) continue;
    out.target_positions.push_back(static_cast<int>(i));
    out.target_ids.push_back(tokens.ids[i]);
    const double r = rng.uniform();
    if (r < policy.mask_fraction) {
      out.masked_sequence.ids[i] = Vocabulary::kMask;
    } else if (r < policy.mask_fraction + policy.random_fraction) {
      out.masked_sequence.ids[i] = Vocabulary::kNumSpecial + rng.below_int(regular);
    }
  }
  return out;
}

MlmResult mlm_loss_with_grad(std::span<const MatrixD> logits, std::span<const MaskingOutcome> outcomes) {
  if (logits.size() != outcomes.size()) {
    throw ContractError("mlm_loss: logits and masking outcomes differ in batch size");
  }
  MlmResult out;
  out.grad_logits.reserve(logits.size());
  for (const auto& l : logits) out.grad_logits.push_back(MatrixD::Zero(l.rows(), l.cols()));
  for (const auto& o : outcomes) out.masked_tokens += o.target_positions.size();
  if (out.masked_tokens == 0) {
    out.empty_batch = true;
    return out;
  }
  const double inv = 1.0 / static_cast<double>(out.masked_tokens);
  double total = 0.0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    const auto& o = outcomes[b];
    for (std::size_t k = 0; k < o.target_positions.size(); ++k) {
      const int pos = o.target_positions[k];
      const int target = o.target_ids[k];
      if (pos < 0 || pos >= logits[b].rows()) throw ShapeError("mlm_loss: masked position outside logits");
      if (target < 0 || target >= logits[b].cols()) throw VocabularyError("mlm_loss: target id outside vocabulary");
      const auto row = logits[b].row(pos);
      const ShiftedLse l = shifted_lse(row);
      const double lse = l.value();
      total += neg_log_softmax(row, target, l);
      auto g = out.grad_logits[b].row(pos);
      for (Eigen::Index v = 0; v < row.size(); ++v) g(v) += std::exp(row(v) - lse) * inv;
      g(target) -= inv;
    }
  }
  out.loss = total * inv;
  return out;
}

double mlm_loss(std::span<const MatrixD> logits, std::span<const MaskingOutcome> outcomes) {
  return mlm_loss_with_grad(logits, outcomes).loss;
}

LossBreakdown combined_loss(double contrastive, double mlm, double lambda) {
  if (!std::isfinite(contrastive)) throw NumericalAbort("contrastive", "contrastive loss is not finite");
  if (!std::isfinite(mlm)) throw NumericalAbort("mlm", "MLM loss is not finite");
  if (!std::isfinite(lambda) || lambda < 0.0) throw ParameterError("lambda must be finite and >= 0");
  LossBreakdown b;
  b.contrastive = contrastive;
  b.mlm = mlm;
  b.lambda = lambda;
  b.total = contrastive + lambda * mlm;
  if (!std::isfinite(b.total)) throw NumericalAbort("total", "combined loss is not finite");
  return b;
}

}  // namespace mammovl
