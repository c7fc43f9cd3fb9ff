#pragma once

#include "mammovl/nn/layers.hpp"
#include "mammovl/objectives.hpp"
#include "mammovl/text.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mammovl {

struct Resolution {
  int height = 1024;
  int width = 768;
  bool operator==(const Resolution&) const = default;
};

/// Pixels in height x width x channels order, values in [0, 1].
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> pixels;

  static ImageTensor zeros(int height, int width, int channels = 1);
  float& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Encoder-native output before projection.
struct RawEmbedding {
  std::vector<float> vector;
};

/// Unit-norm vector in the shared space.
struct JointEmbedding {
  std::vector<float> vector;
};

/// length x width, row-major.
struct SequenceEmbedding {
  int length = 0;
  int width = 0;
  std::vector<float> values;
};

enum class EncoderKind { vision, text };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::vision;
  int output_width = 0;
  std::string architecture;
  std::size_t parameter_count = 0;
};

/// Throws ShapeError when the image does not have the expected resolution
/// and ContractError for non-finite or out-of-range pixels.
void validate_image(const ImageTensor& image, Resolution expected);

/// Packs images into a [B, C, H, W] tensor, replicating a single grey
/// channel when the backbone wants more.
nn::Tensor images_to_batch(std::span<const ImageTensor> images, int channels);

// ---------------------------------------------------------------------------
// Vision

class VisionEncoder {
 public:
  virtual ~VisionEncoder() = default;
  virtual EncoderSpec spec() const = 0;
  virtual Resolution resolution() const = 0;
  virtual int channels() const = 0;
  /// batch is [B, C, H, W]; returns [B, output_width].
  virtual nn::Var forward(const nn::Var& batch) const = 0;
  virtual void collect(const std::string& prefix, nn::ParameterList& out) const = 0;
  virtual nlohmann::json descriptor() const = 0;
};

struct TinyConvConfig {
  Resolution resolution{};
  int in_channels = 1;
  std::vector<int> channels{16, 32, 64, 64};  // 3x3 stride-2 convs
  int grid_h = 4;
  int grid_w = 3;
  bool global_max = true;  // append per-channel global maxima to the grid
  int output_width = 256;
};

/// Small stride-2 convolutional stack followed by a coarse average-pooling
/// grid (where), optionally joined by per-channel global maxima (what), and
/// a linear output layer.
class TinyConvEncoder final : public VisionEncoder {
 public:
  TinyConvEncoder(TinyConvConfig cfg, Rng& rng);

  EncoderSpec spec() const override;
  Resolution resolution() const override { return cfg_.resolution; }
  int channels() const override { return cfg_.in_channels; }
  nn::Var forward(const nn::Var& batch) const override;
  void collect(const std::string& prefix, nn::ParameterList& out) const override;
  nlohmann::json descriptor() const override;

  const TinyConvConfig& config() const noexcept { return cfg_; }
  void zero_output_layer() { out_.zero(); }

 private:
  TinyConvConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear out_;
};

/// Pretrained feature extractor living outside this library (for example a
/// full-size backbone behind a process boundary). Produces [B, width].
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int output_width() const = 0;
  virtual int channels() const = 0;
  virtual Resolution resolution() const = 0;
  virtual nn::Tensor extract(const nn::Tensor& batch) const = 0;
};

/// Adapter slot: wraps a FeatureExtractor as a frozen vision encoder.
class AdapterVisionEncoder final : public VisionEncoder {
 public:
  explicit AdapterVisionEncoder(std::shared_ptr<const FeatureExtractor> extractor);
  EncoderSpec spec() const override;
  Resolution resolution() const override { return extractor_->resolution(); }
  int channels() const override { return extractor_->channels(); }
  nn::Var forward(const nn::Var& batch) const override;
  void collect(const std::string&, nn::ParameterList&) const override {}
  nlohmann::json descriptor() const override;

 private:
  std::shared_ptr<const FeatureExtractor> extractor_;
};

// ---------------------------------------------------------------------------
// Text

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual EncoderSpec spec() const = 0;
  virtual int vocab_size() const = 0;
  virtual int max_length() const = 0;
  /// Returns [B * max_length, output_width]; sample b occupies rows
  /// [b * max_length, (b + 1) * max_length).
  virtual nn::Var forward(std::span<const TokenSequence> batch) const = 0;
  virtual void collect(const std::string& prefix, nn::ParameterList& out) const = 0;
  virtual nlohmann::json descriptor() const = 0;
};

struct TinyTextConfig {
  int vocab_size = 0;
  int max_length = 256;
  int width = 256;
  int layers = 2;
  int heads = 4;
  int ff_width = 512;
};

/// Token + learned position embeddings, pre-norm transformer blocks with
/// padding-masked attention, final layer norm.
class TinyTextEncoder final : public TextEncoder {
 public:
  TinyTextEncoder(TinyTextConfig cfg, Rng& rng);

  EncoderSpec spec() const override;
  int vocab_size() const override { return cfg_.vocab_size; }
  int max_length() const override { return cfg_.max_length; }
  nn::Var forward(std::span<const TokenSequence> batch) const override;
  void collect(const std::string& prefix, nn::ParameterList& out) const override;
  nlohmann::json descriptor() const override;
  const TinyTextConfig& config() const noexcept { return cfg_; }

 private:
  TinyTextConfig cfg_;
  nn::Var token_embedding_;
  nn::Var position_embedding_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
};

// ---------------------------------------------------------------------------
// Projection and fusion

/// Single linear map followed by x / max(||x||, 1e-12).
class ProjectionHead {
 public:
  static constexpr float kEpsilon = 1e-12f;

  ProjectionHead() = default;
  ProjectionHead(int in_width, int joint_dim, Rng& rng);

  nn::Var forward(const nn::Var& raw) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const { linear_.collect(prefix, out); }
  int in_width() const { return linear_.in_features(); }
  int joint_dim() const { return linear_.out_features(); }
  /// Identity weights, zero bias; requires in_width == joint_dim.
  void set_identity();

 private:
  nn::Linear linear_;
};

struct FusionConfig {
  int layers = 4;
  int heads = 4;
  int ff_width = 512;
};

/// Transformer over [image token; masked text sequence]. The joint image
/// embedding is mapped linearly to the text width and prepended, and a linear
/// head emits vocabulary logits at every text position.
class FusionModel {
 public:
  FusionModel() = default;
  FusionModel(int joint_dim, int width, int vocab_size, FusionConfig cfg, Rng& rng);

  /// image: [B, joint_dim]; sequence: [B*L, width]; mask: B*L bytes.
  /// Returns logits [B*L, vocab].
  nn::Var forward(const nn::Var& image, const nn::Var& sequence, int batch, int length,
                  std::span<const std::uint8_t> mask) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
  int joint_dim() const { return image_in_.in_features(); }
  int width() const { return image_in_.out_features(); }
  int vocab_size() const { return head_.out_features(); }
  const FusionConfig& config() const noexcept { return cfg_; }

 private:
  FusionConfig cfg_;
  nn::Linear image_in_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear head_;
};

// ---------------------------------------------------------------------------
// Single-sample operations (evaluation mode, no gradient recording).

RawEmbedding encode_image(const VisionEncoder& encoder, const ImageTensor& image);
std::pair<SequenceEmbedding, RawEmbedding> encode_text(const TextEncoder& encoder, const TokenSequence& tokens);
JointEmbedding project(const ProjectionHead& head, const RawEmbedding& raw);
/// Returns logits (length x vocab). `attention_mask` defaults to all ones.
MatrixD fuse(const FusionModel& fusion, const JointEmbedding& image, const SequenceEmbedding& masked_sequence,
             std::span<const std::uint8_t> attention_mask = {});

// ---------------------------------------------------------------------------
// Full vision-language model

struct ModelConfig {
  TinyConvConfig vision{};
  TinyTextConfig text{};
  FusionConfig fusion{};
  int joint_dim = 256;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Vision encoder, text encoder, both projection heads and the fusion model,
/// plus the vocabulary the text side was built with.
class VisionLanguageModel {
 public:
  VisionLanguageModel(const ModelConfig& cfg, Vocabulary vocab, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  const Vocabulary& vocabulary() const noexcept { return vocab_; }
  const TinyConvEncoder& vision() const { return *vision_; }
  const TinyTextEncoder& text() const { return *text_; }
  const ProjectionHead& image_head() const { return image_head_; }
  const ProjectionHead& text_head() const { return text_head_; }
  const FusionModel& fusion() const { return fusion_; }
  std::shared_ptr<TinyConvEncoder> vision_ptr() const { return vision_; }

  /// Deterministically ordered named parameters.
  nn::ParameterList parameters() const;

  /// Joint embeddings for a batch: [B, joint_dim].
  nn::Var embed_images(std::span<const ImageTensor> images) const;
  nn::Var embed_texts(std::span<const TokenSequence> tokens) const;

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  std::shared_ptr<TinyConvEncoder> vision_;
  std::shared_ptr<TinyTextEncoder> text_;
  ProjectionHead image_head_;
  ProjectionHead text_head_;
  FusionModel fusion_;
};

/// Copies values between two parameter lists with identical names/shapes.
void copy_parameter_values(const nn::ParameterList& from, nn::ParameterList& to);
std::size_t count_parameters(const nn::ParameterList& params);

}  // namespace mammovl
