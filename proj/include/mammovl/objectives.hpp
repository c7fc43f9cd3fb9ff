#pragma once

#include "mammovl/rng.hpp"
#include "mammovl/text.hpp"

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

namespace mammovl {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// s(i, j) = cosine similarity between image i and text j.
struct SimilarityMatrix {
  MatrixD s;
  int size() const { return static_cast<int>(s.rows()); }
};

/// Rows of `image_embeddings` and `text_embeddings` are unit vectors. Rows
/// off the unit sphere by more than `unit_tolerance` raise ContractError,
/// which is what a forgotten projection step looks like.
SimilarityMatrix similarity_matrix(const MatrixD& image_embeddings, const MatrixD& text_embeddings,
                                   double unit_tolerance = 1e-5);

struct ContrastiveResult {
  double loss = 0.0;
  MatrixD grad_s;  // dL/ds
  bool degenerate = false;  // N == 1
};

/// Symmetric InfoNCE over in-batch negatives:
///   -1/N sum_i log softmax_row(s/tau)_ii  -  1/N sum_i log softmax_col(s/tau)_ii
/// evaluated with log-sum-exp. N == 1 yields 0 and sets `degenerate`.
ContrastiveResult contrastive_loss_with_grad(const SimilarityMatrix& s, double temperature = 1.0);
double contrastive_loss(const SimilarityMatrix& s, double temperature = 1.0);

struct EmbeddingLossGrad {
  double loss = 0.0;
  MatrixD grad_image;
  MatrixD grad_text;
};

/// Contrastive loss with gradients chained through s = V T^T onto both
/// embedding matrices. No unit-norm check, so it can be probed off-sphere.
EmbeddingLossGrad contrastive_embedding_loss(const MatrixD& image_embeddings,
                                             const MatrixD& text_embeddings, double temperature = 1.0);

struct MaskingPolicy {
  double probability = 0.15;
  double mask_fraction = 0.8;    // replaced with [MASK]
  double random_fraction = 0.1;  // replaced with a random non-special id
  int vocab_size = 0;
};

struct MaskingOutcome {
  TokenSequence masked_sequence;
  std::vector<int> target_positions;
  std::vector<int> target_ids;
  bool empty() const { return target_positions.empty(); }
};

/// Selects each eligible position (attended, not CLS, not special)
/// independently with probability p, then applies the 80/10/10 replacement.
MaskingOutcome mask_tokens(const TokenSequence& tokens, const MaskingPolicy& policy, Rng& rng);

struct MlmResult {
  double loss = 0.0;
  std::size_t masked_tokens = 0;
  bool empty_batch = false;
  std::vector<MatrixD> grad_logits;  // one per sample, same shape as logits
};

/// Token-level mean cross-entropy over every masked position in the batch.
/// logits[b] is (sequence length x vocabulary).
MlmResult mlm_loss_with_grad(std::span<const MatrixD> logits, std::span<const MaskingOutcome> outcomes);
double mlm_loss(std::span<const MatrixD> logits, std::span<const MaskingOutcome> outcomes);

struct LossBreakdown {
  double contrastive = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  double lambda = 1.0;
};

/// total = contrastive + lambda * mlm. Non-finite components raise
/// NumericalAbort naming the component.
LossBreakdown combined_loss(double contrastive, double mlm, double lambda);

}  // namespace mammovl
