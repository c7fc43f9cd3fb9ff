#pragma once

#include "mammovl/checkpoint.hpp"
#include "mammovl/encoders.hpp"
#include "mammovl/evaluation.hpp"
#include "mammovl/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mammovl {

/// Vision backbone plus a linear head on its raw output.
class Classifier {
 public:
  Classifier(std::shared_ptr<VisionEncoder> backbone, int num_classes, std::uint64_t seed);

  int num_classes() const { return head_.out_features(); }
  const VisionEncoder& backbone() const { return *backbone_; }
  std::shared_ptr<VisionEncoder> backbone_ptr() const { return backbone_; }

  nn::Var logits(std::span<const ImageTensor> images) const;
  /// Logits from precomputed backbone output.
  nn::Var head_logits(const nn::Var& features) const;
  /// Arg-max class per image, in chunks of `batch` under no-grad.
  std::vector<int> predict(std::span<const ImageTensor> images, int batch = 64) const;

  nn::ParameterList backbone_parameters() const;
  nn::ParameterList head_parameters() const;
  nn::ParameterList parameters() const;

 private:
  std::shared_ptr<VisionEncoder> backbone_;
  nn::Linear head_;
};

/// Vision encoder of a vision-language checkpoint with a fresh head. Text
/// encoder and fusion model are dropped.
Classifier attach_head(const Checkpoint& checkpoint, int num_classes, std::uint64_t seed);
/// Loads and verifies the checkpoint first (IntegrityError on a bad hash,
/// ConfigError when the file is missing).
Classifier attach_head(const std::filesystem::path& checkpoint, int num_classes, std::uint64_t seed);
/// Randomly initialised backbone: the no-pretraining comparison arm.
Classifier attach_head(const TinyConvConfig& vision, int num_classes, std::uint64_t seed);

enum class BudgetMode { stratified_patient, uniform_image };

/// Indices (ascending) of a subset of roughly `n` images. In the default
/// mode whole patients are taken in a seeded order that interleaves the
/// patient strata (most common label) in proportion to their size, stopping
/// once n is met, so subsets for one seed are nested across budgets.
/// nullopt selects everything. Throws BudgetError when n exceeds the
/// available images or is zero.
std::vector<std::size_t> sample_budget(std::span<const data::LabeledSample> samples, std::optional<std::size_t> n,
                                       std::uint64_t seed, BudgetMode mode = BudgetMode::stratified_patient);

enum class FreezePolicy { none, freeze_backbone };

struct FinetuneConfig {
  std::optional<std::size_t> budget;  // nullopt = ALL
  std::string scheme = "FIVE";
  std::string head = "linear";
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 25;
  int batch_size = 64;
  std::uint64_t seed = 0;
  FreezePolicy freeze = FreezePolicy::none;
  BudgetMode budget_mode = BudgetMode::stratified_patient;
  double validation_fraction = 0.1;  // patients carved from the training pool

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const FinetuneConfig& cfg);
/// Strict like pretrain_config_from_json; "budget" accepts a count or "ALL".
FinetuneConfig finetune_config_from_json(const nlohmann::json& j, const FinetuneConfig& base = {});

struct Example {
  ImageTensor image;
  int label = 0;  // class index
};

/// Pairs images with their class under `scheme`. Throws ContractError for a
/// label the scheme excludes.
std::vector<Example> make_examples(std::span<const data::LabeledSample> samples, std::span<const ImageTensor> images,
                                   const ClassScheme& scheme);

struct FinetuneResult {
  TrainingLog log;
  int best_epoch = 0;
  double best_validation_macro_f1 = 0.0;
};

/// Cross-entropy training with AdamW at a constant rate. After every epoch
/// the validation macro-F1 is computed; the classifier is left holding the
/// weights of the best epoch (ties to the earlier one). An empty
/// validation set falls back to the training set. Throws ContractError for
/// labels outside [0, num_classes).
FinetuneResult finetune(Classifier& classifier, std::span<const Example> train, std::span<const Example> validation,
                        const FinetuneConfig& config);

/// Reads every sample's PNG (relative paths resolve against `base`) and
/// letterboxes it to `resolution`.
std::vector<ImageTensor> load_sample_images(std::span<const data::LabeledSample> samples,
                                            const std::filesystem::path& base, Resolution resolution,
                                            int workers = 1);

enum class EvalMode {
  per_scheme,        // train a head for the requested scheme
  mapped_from_five,  // train five-class heads, collapse predictions onto THREE
};

/// Builds the classifier for one fold: (num_classes, seed) -> classifier.
using ClassifierFactory = std::function<Classifier(int, std::uint64_t)>;

struct FoldPrediction {
  std::size_t sample = 0;  // index into the samples given to cross_validate
  int fold = 0;
  int prediction = 0;  // class index under the training scheme
};

struct CrossValidationResult {
  MetricReport report;
  std::vector<FoldPrediction> predictions;
  std::vector<TrainingLog> logs;  // one per fold
};

struct CrossValidationOptions {
  std::optional<std::size_t> budget;  // per training pool; nullopt = ALL
  EvalMode eval_mode = EvalMode::per_scheme;
  Arm arm = Arm::vlm;
  /// Called after each fold with the trained classifier.
  std::function<void(int fold, const Classifier&)> on_fold;
};

/// For every fold: carve validation_fraction of the training patients,
/// sample the budget from the rest, fine-tune a fresh classifier from
/// `factory` and predict the held-out fold. Samples with labels the
/// training scheme excludes must already be gone (ContractError).
CrossValidationResult cross_validate(std::span<const data::LabeledSample> samples,
                                     std::span<const ImageTensor> images, const FoldAssignment& folds,
                                     const ClassifierFactory& factory, const FinetuneConfig& config,
                                     const CrossValidationOptions& options);

/// Classifier parameters plus {num_classes, backbone descriptor} in the
/// model section, kind "classifier".
Checkpoint classifier_checkpoint(const Classifier& classifier, const nlohmann::json& run_config);

struct AblationConfig {
  std::vector<std::optional<std::size_t>> budgets;  // nullopt = ALL
  std::size_t offset = 2000;                        // extra images for the baseline arm
  std::filesystem::path checkpoint;                 // VLM arm backbone
  std::filesystem::path baseline_checkpoint;        // empty: random initialisation
  int folds = 4;
  EvalMode eval_mode = EvalMode::per_scheme;
  SplitGranularity granularity = SplitGranularity::patient;
  FinetuneConfig finetune;  // scheme, seed and training settings for both arms
};

/// One MetricReport per (budget, arm): the VLM arm trains on n images of
/// each training pool, the baseline on n + offset, over all folds. Reports
/// come ordered by budget then arm (VLM first). Throws ConfigError when the
/// checkpoint is missing and BudgetError when a pool cannot supply n +
/// offset images.
std::vector<MetricReport> run_ablation(std::span<const data::LabeledSample> samples,
                                       std::span<const ImageTensor> images, const AblationConfig& config);

}  // namespace mammovl
