#pragma once

#include "mammovl/checkpoint.hpp"
#include "mammovl/encoders.hpp"
#include "mammovl/objectives.hpp"
#include "mammovl/text.hpp"

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

struct PretrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 25;
  double lambda = 1.0;
  double mask_probability = 0.15;
  double temperature = 1.0;
  Resolution resolution{};
  int d = 256;  // joint embedding width
  int l = 256;  // token sequence length
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  std::size_t max_vocabulary = 30000;
  int augment_shift = 0;  // training images are translated by up to this many pixels per step
  ModelConfig model{};  // resolution, d and l above take precedence

  /// Throws ConfigError.
  void validate() const;
  ModelConfig resolved_model() const;
};

nlohmann::json to_json(const PretrainConfig& cfg);
/// Strict: unknown keys and invalid values raise ConfigError. Missing keys
/// keep `base` values.
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, const PretrainConfig& base = {});

struct PretrainPair {
  std::string id;
  std::string group;  // provenance unit kept whole by the validation split
  ImageTensor image;
  std::string caption;
};

/// Reads pairs.jsonl and its images (letterboxed to `resolution`) on up to
/// `workers` threads. Output order follows the file. The group of a pair is
/// "<source>#<page>".
std::vector<PretrainPair> load_pretrain_pairs(const std::filesystem::path& pairs_jsonl, Resolution resolution,
                                              int workers = 1);

struct ValidationSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Whole groups are moved to validation (in seeded random order) until at
/// least `fraction` of the pairs are held out. Indices come back sorted.
ValidationSplit split_validation(std::span<const PretrainPair> pairs, double fraction, std::uint64_t seed);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double timestamp = 0.0;
};

struct ValidationRecord {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> macro_f1;
  double timestamp = 0.0;
};

/// Per-step losses and per-epoch validation metrics, serialized as JSON
/// lines. Pretraining step records carry {step, epoch, contrastive, mlm,
/// total, lr, timestamp}; fine-tuning step records carry {step, epoch, loss,
/// lr, timestamp}. Validation records carry "validation": true.
struct TrainingLog {
  std::string kind = "pretrain";
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validation;

  std::string to_jsonl() const;
  void write(const std::filesystem::path& path) const;
};

/// Wall-clock seconds since the Unix epoch.
double wall_clock();

struct PretrainOptions {
  /// Vocabulary to use; built from the training captions when absent.
  const Vocabulary* vocabulary = nullptr;
  /// When set, every new best epoch is written here atomically, so an abort
  /// leaves the last good checkpoint on disk.
  std::filesystem::path checkpoint_path;
  /// Batches are prepared on a producer thread when workers > 1.
  int workers = 1;
  /// Extra config snapshot stored in the checkpoint header.
  nlohmann::json run_config = nlohmann::json::object();
  std::function<void(const ValidationRecord&)> on_epoch;
};

struct PretrainResult {
  Checkpoint checkpoint;  // lowest validation loss, ties to the earlier epoch
  TrainingLog log;
  std::size_t train_pairs = 0;
  std::size_t validation_pairs = 0;
  double first_validation_loss = 0.0;
};

/// Contrastive + masked-language-model pretraining with best-epoch
/// selection. Throws ConfigError for an invalid config or fewer than
/// 2 * batch_size training pairs, NumericalAbort when a loss goes
/// non-finite.
PretrainResult pretrain(std::span<const PretrainPair> pairs, const PretrainConfig& config,
                        const PretrainOptions& options = {});

/// Total validation loss (contrastive + lambda * mlm), averaged over
/// consecutive batches of config.batch_size with masks drawn from a fixed
/// seed, so repeated calls on the same weights agree exactly.
LossBreakdown validation_loss(const VisionLanguageModel& model, std::span<const PretrainPair> pairs,
                              const PretrainConfig& config);

/// Checkpoint header "model" section: architecture + vocabulary words.
nlohmann::json describe_model(const VisionLanguageModel& model);
Checkpoint make_checkpoint(const VisionLanguageModel& model, const PretrainConfig& config, int epoch,
                           double validation_loss, const nlohmann::json& run_config = nlohmann::json::object());
/// Rebuilds the model a vision-language checkpoint was taken from.
std::unique_ptr<VisionLanguageModel> model_from_checkpoint(const Checkpoint& ckpt);
PretrainConfig pretrain_config_of(const Checkpoint& ckpt);

/// Fraction of images whose most similar caption (cosine in the joint
/// space) is their own.
double retrieval_top1(const VisionLanguageModel& model, std::span<const PretrainPair> pairs);

}  // namespace mammovl
