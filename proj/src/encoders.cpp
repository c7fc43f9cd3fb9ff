#include "mammovl/encoders.hpp"

#include "mammovl/errors.hpp"

#include <cmath>

namespace mammovl {

ImageTensor ImageTensor::zeros(int height, int width, int channels) {
  ImageTensor t;
  t.height = height;
  t.width = width;
  t.channels = channels;
  t.pixels.assign(static_cast<std::size_t>(height) * width * channels, 0.0f);
  return t;
}

void validate_image(const ImageTensor& image, Resolution expected) {
  if (image.height != expected.height || image.width != expected.width) {
    throw ShapeError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", encoder expects " + std::to_string(expected.height) + "x" +
                     std::to_string(expected.width));
  }
  if (image.channels < 1 ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * image.channels) {
    throw ShapeError("image pixel buffer does not match its declared shape");
  }
  for (float v : image.pixels) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw ContractError("image pixels must be finite and within [0, 1]");
    }
  }
}

nn::Tensor images_to_batch(std::span<const ImageTensor> images, int channels) {
  if (images.empty()) throw ContractError("empty image batch");
  const int h = images[0].height;
  const int w = images[0].width;
  nn::Tensor out({static_cast<int>(images.size()), channels, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.height != h || img.width != w) throw ShapeError("images in a batch differ in size");
    if (img.channels != channels && img.channels != 1) {
      throw ShapeError("image has " + std::to_string(img.channels) + " channels, backbone expects " +
                       std::to_string(channels));
    }
    for (int c = 0; c < channels; ++c) {
      const int src_c = img.channels == 1 ? 0 : c;
      float* dst = out.data() + ((b * channels + c) * static_cast<std::size_t>(h) * w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[static_cast<std::size_t>(y) * w + x] = img.at(y, x, src_c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

TinyConvEncoder::TinyConvEncoder(TinyConvConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.channels.empty()) throw ConfigError("tiny conv encoder needs at least one conv layer");
  if (cfg_.output_width <= 0) throw ConfigError("encoder output width must be positive");
  int in = cfg_.in_channels;
  int h = cfg_.resolution.height;
  int w = cfg_.resolution.width;
  for (int c : cfg_.channels) {
    convs_.emplace_back(in, c, 3, 2, 1, rng);
    in = c;
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
  }
  if (h < cfg_.grid_h || w < cfg_.grid_w) {
    throw ConfigError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                      " is smaller than the pooling grid");
  }
  out_ = nn::Linear(in * (cfg_.grid_h * cfg_.grid_w + (cfg_.global_max ? 1 : 0)), cfg_.output_width, rng);
}

EncoderSpec TinyConvEncoder::spec() const {
  nn::ParameterList params;
  collect("", params);
  return EncoderSpec{EncoderKind::vision, cfg_.output_width, "tiny-conv", count_parameters(params)};
}

nn::Var TinyConvEncoder::forward(const nn::Var& batch) const {
  nn::Var x = batch;
  for (const auto& conv : convs_) x = nn::relu(conv.forward(x));
  nn::Var pooled = nn::adaptive_avg_pool_flat(x, cfg_.grid_h, cfg_.grid_w);
  if (cfg_.global_max) pooled = nn::concat_cols({pooled, nn::global_max_pool(x)});
  return out_.forward(pooled);
}

void TinyConvEncoder::collect(const std::string& prefix, nn::ParameterList& out) const {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(prefix + "conv" + std::to_string(i), out);
  out_.collect(prefix + "out", out);
}

nlohmann::json TinyConvEncoder::descriptor() const {
  return {{"architecture", "tiny-conv"},
          {"resolution", {cfg_.resolution.height, cfg_.resolution.width}},
          {"in_channels", cfg_.in_channels},
          {"channels", cfg_.channels},
          {"grid", {cfg_.grid_h, cfg_.grid_w}},
          {"global_max", cfg_.global_max},
          {"output_width", cfg_.output_width}};
}

AdapterVisionEncoder::AdapterVisionEncoder(std::shared_ptr<const FeatureExtractor> extractor)
    : extractor_(std::move(extractor)) {
  if (!extractor_) throw ConfigError("adapter vision encoder needs a feature extractor");
}

EncoderSpec AdapterVisionEncoder::spec() const {
  return EncoderSpec{EncoderKind::vision, extractor_->output_width(), "adapter:" + extractor_->name(), 0};
}

nn::Var AdapterVisionEncoder::forward(const nn::Var& batch) const {
  nn::Tensor features = extractor_->extract(batch.value());
  if (features.rows() != batch.value().dim(0) || features.cols() != extractor_->output_width()) {
    throw ShapeError("feature extractor returned " + features.shape_string());
  }
  return nn::Var(std::move(features), false);
}

nlohmann::json AdapterVisionEncoder::descriptor() const {
  return {{"architecture", "adapter"}, {"name", extractor_->name()}, {"output_width", extractor_->output_width()}};
}

// ---------------------------------------------------------------------------

TinyTextEncoder::TinyTextEncoder(TinyTextConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.vocab_size <= Vocabulary::kNumSpecial) throw ConfigError("text encoder vocabulary is too small");
  if (cfg_.max_length < 2) throw ConfigError("text length must be at least 2");
  if (cfg_.width % cfg_.heads != 0) throw ConfigError("text width must be divisible by the head count");
  token_embedding_ = nn::normal_parameter({cfg_.vocab_size, cfg_.width}, 0.02 * std::sqrt(cfg_.width), rng);
  position_embedding_ = nn::normal_parameter({cfg_.max_length, cfg_.width}, 0.02 * std::sqrt(cfg_.width), rng);
  for (int i = 0; i < cfg_.layers; ++i) blocks_.emplace_back(cfg_.width, cfg_.heads, cfg_.ff_width, rng);
  final_ln_ = nn::LayerNorm(cfg_.width);
}

EncoderSpec TinyTextEncoder::spec() const {
  nn::ParameterList params;
  collect("", params);
  return EncoderSpec{EncoderKind::text, cfg_.width, "tiny-transformer", count_parameters(params)};
}

nn::Var TinyTextEncoder::forward(std::span<const TokenSequence> batch) const {
  if (batch.empty()) throw ContractError("empty token batch");
  const int L = cfg_.max_length;
  const int B = static_cast<int>(batch.size());
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<std::uint8_t> mask;
  ids.reserve(static_cast<std::size_t>(B) * L);
  for (const auto& seq : batch) {
    if (static_cast<int>(seq.size()) != L) {
      throw ShapeError("token sequence length " + std::to_string(seq.size()) + " differs from configured " +
                       std::to_string(L));
    }
    validate_tokens(seq, cfg_.vocab_size);
    ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
    mask.insert(mask.end(), seq.attention_mask.begin(), seq.attention_mask.end());
    for (int p = 0; p < L; ++p) positions.push_back(p);
  }
  nn::Var x = nn::add(nn::embedding(token_embedding_, ids), nn::embedding(position_embedding_, positions));
  for (const auto& block : blocks_) x = block.forward(x, B, L, mask);
  return final_ln_.forward(x);
}

void TinyTextEncoder::collect(const std::string& prefix, nn::ParameterList& out) const {
  out.push_back({prefix + "token_embedding", token_embedding_});
  out.push_back({prefix + "position_embedding", position_embedding_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + "block" + std::to_string(i), out);
  final_ln_.collect(prefix + "final_ln", out);
}

nlohmann::json TinyTextEncoder::descriptor() const {
  return {{"architecture", "tiny-transformer"}, {"vocab_size", cfg_.vocab_size}, {"max_length", cfg_.max_length},
          {"width", cfg_.width},  {"layers", cfg_.layers},        {"heads", cfg_.heads},
          {"ff_width", cfg_.ff_width}};
}

// ---------------------------------------------------------------------------

ProjectionHead::ProjectionHead(int in_width, int joint_dim, Rng& rng) : linear_(in_width, joint_dim, rng) {}

nn::Var ProjectionHead::forward(const nn::Var& raw) const {
  if (raw.cols() != linear_.in_features()) {
    throw ShapeError("projection head expects width " + std::to_string(linear_.in_features()) + ", got " +
                     std::to_string(raw.cols()));
  }
  return nn::l2_normalize_rows(linear_.forward(raw), kEpsilon);
}

void ProjectionHead::set_identity() {
  if (linear_.in_features() != linear_.out_features()) {
    throw ShapeError("identity projection needs equal input and output widths");
  }
  auto& w = linear_.weight().value();
  w.fill(0.0f);
  for (int i = 0; i < w.rows(); ++i) w.at(i, i) = 1.0f;
  linear_.bias().value().fill(0.0f);
}

FusionModel::FusionModel(int joint_dim, int width, int vocab_size, FusionConfig cfg, Rng& rng)
    : cfg_(cfg), image_in_(joint_dim, width, rng) {
  if (width % cfg.heads != 0) throw ConfigError("fusion width must be divisible by the head count");
  for (int i = 0; i < cfg.layers; ++i) blocks_.emplace_back(width, cfg.heads, cfg.ff_width, rng);
  final_ln_ = nn::LayerNorm(width);
  head_ = nn::Linear(width, vocab_size, rng);
}

nn::Var FusionModel::forward(const nn::Var& image, const nn::Var& sequence, int batch, int length,
                             std::span<const std::uint8_t> mask) const {
  if (image.rows() != batch || image.cols() != joint_dim()) {
    throw ShapeError("fusion: image embedding shape " + image.value().shape_string() + " does not match batch " +
                     std::to_string(batch) + " x " + std::to_string(joint_dim()));
  }
  if (sequence.rows() != batch * length || sequence.cols() != width()) {
    throw ShapeError("fusion: sequence shape " + sequence.value().shape_string() + " does not match " +
                     std::to_string(batch * length) + " x " + std::to_string(width()));
  }
  if (static_cast<int>(mask.size()) != batch * length) throw ShapeError("fusion: mask size mismatch");
  const nn::Var img_tok = image_in_.forward(image);
  std::vector<nn::Var> parts;
  parts.reserve(static_cast<std::size_t>(batch) * 2);
  std::vector<std::uint8_t> fused_mask;
  fused_mask.reserve(static_cast<std::size_t>(batch) * (length + 1));
  std::vector<int> text_rows;
  text_rows.reserve(static_cast<std::size_t>(batch) * length);
  for (int b = 0; b < batch; ++b) {
    parts.push_back(nn::slice_rows(img_tok, b, 1));
    parts.push_back(nn::slice_rows(sequence, b * length, length));
    fused_mask.push_back(1);
    fused_mask.insert(fused_mask.end(), mask.begin() + b * length, mask.begin() + (b + 1) * length);
    for (int p = 0; p < length; ++p) text_rows.push_back(b * (length + 1) + 1 + p);
  }
  nn::Var x = nn::concat_rows(parts);
  for (const auto& block : blocks_) x = block.forward(x, batch, length + 1, fused_mask);
  x = nn::gather_rows(x, text_rows);
  return head_.forward(final_ln_.forward(x));
}

void FusionModel::collect(const std::string& prefix, nn::ParameterList& out) const {
  image_in_.collect(prefix + "image_in", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + "block" + std::to_string(i), out);
  final_ln_.collect(prefix + "final_ln", out);
  head_.collect(prefix + "head", out);
}

// ---------------------------------------------------------------------------

RawEmbedding encode_image(const VisionEncoder& encoder, const ImageTensor& image) {
  validate_image(image, encoder.resolution());
  nn::NoGradGuard guard;
  const nn::Var out = encoder.forward(nn::Var(images_to_batch(std::span(&image, 1), encoder.channels())));
  return RawEmbedding{out.value().storage()};
}

std::pair<SequenceEmbedding, RawEmbedding> encode_text(const TextEncoder& encoder, const TokenSequence& tokens) {
  nn::NoGradGuard guard;
  const nn::Var out = encoder.forward(std::span(&tokens, 1));
  SequenceEmbedding seq{out.rows(), out.cols(), out.value().storage()};
  RawEmbedding cls{std::vector<float>(seq.values.begin(), seq.values.begin() + seq.width)};
  return {std::move(seq), std::move(cls)};
}

JointEmbedding project(const ProjectionHead& head, const RawEmbedding& raw) {
  nn::NoGradGuard guard;
  const int w = static_cast<int>(raw.vector.size());
  if (w != head.in_width()) {
    throw ShapeError("raw embedding width " + std::to_string(w) + " does not match projection input " +
                     std::to_string(head.in_width()));
  }
  const nn::Var out = head.forward(nn::Var(nn::Tensor({1, w}, raw.vector)));
  return JointEmbedding{out.value().storage()};
}

MatrixD fuse(const FusionModel& fusion, const JointEmbedding& image, const SequenceEmbedding& masked_sequence,
             std::span<const std::uint8_t> attention_mask) {
  nn::NoGradGuard guard;
  const int d = static_cast<int>(image.vector.size());
  if (d != fusion.joint_dim()) throw ShapeError("fuse: image embedding has the wrong dimension");
  if (masked_sequence.width != fusion.width() ||
      masked_sequence.values.size() != static_cast<std::size_t>(masked_sequence.length) * masked_sequence.width) {
    throw ShapeError("fuse: sequence embedding has the wrong width");
  }
  std::vector<std::uint8_t> mask(attention_mask.begin(), attention_mask.end());
  if (mask.empty()) mask.assign(static_cast<std::size_t>(masked_sequence.length), 1);
  const nn::Var logits = fusion.forward(
      nn::Var(nn::Tensor({1, d}, image.vector)),
      nn::Var(nn::Tensor({masked_sequence.length, masked_sequence.width}, masked_sequence.values)), 1,
      masked_sequence.length, mask);
  return logits.value().mat().cast<double>();
}

// ---------------------------------------------------------------------------

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"joint_dim", cfg.joint_dim},
          {"vision",
           {{"resolution", {cfg.vision.resolution.height, cfg.vision.resolution.width}},
            {"in_channels", cfg.vision.in_channels},
            {"channels", cfg.vision.channels},
            {"grid", {cfg.vision.grid_h, cfg.vision.grid_w}},
            {"global_max", cfg.vision.global_max},
            {"output_width", cfg.vision.output_width}}},
          {"text",
           {{"vocab_size", cfg.text.vocab_size},
            {"max_length", cfg.text.max_length},
            {"width", cfg.text.width},
            {"layers", cfg.text.layers},
            {"heads", cfg.text.heads},
            {"ff_width", cfg.text.ff_width}}},
          {"fusion", {{"layers", cfg.fusion.layers}, {"heads", cfg.fusion.heads}, {"ff_width", cfg.fusion.ff_width}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.joint_dim = j.at("joint_dim").get<int>();
  const auto& v = j.at("vision");
  cfg.vision.resolution = {v.at("resolution").at(0).get<int>(), v.at("resolution").at(1).get<int>()};
  cfg.vision.in_channels = v.at("in_channels").get<int>();
  cfg.vision.channels = v.at("channels").get<std::vector<int>>();
  cfg.vision.grid_h = v.at("grid").at(0).get<int>();
  cfg.vision.grid_w = v.at("grid").at(1).get<int>();
  cfg.vision.global_max = v.at("global_max").get<bool>();
  cfg.vision.output_width = v.at("output_width").get<int>();
  const auto& t = j.at("text");
  cfg.text.vocab_size = t.at("vocab_size").get<int>();
  cfg.text.max_length = t.at("max_length").get<int>();
  cfg.text.width = t.at("width").get<int>();
  cfg.text.layers = t.at("layers").get<int>();
  cfg.text.heads = t.at("heads").get<int>();
  cfg.text.ff_width = t.at("ff_width").get<int>();
  const auto& f = j.at("fusion");
  cfg.fusion.layers = f.at("layers").get<int>();
  cfg.fusion.heads = f.at("heads").get<int>();
  cfg.fusion.ff_width = f.at("ff_width").get<int>();
  return cfg;
}

VisionLanguageModel::VisionLanguageModel(const ModelConfig& cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.text.vocab_size = vocab_.size();
  Rng vision_rng(derive_seed(seed, "init/vision"));
  Rng text_rng(derive_seed(seed, "init/text"));
  Rng head_rng(derive_seed(seed, "init/heads"));
  Rng fusion_rng(derive_seed(seed, "init/fusion"));
  vision_ = std::make_shared<TinyConvEncoder>(cfg_.vision, vision_rng);
  text_ = std::make_shared<TinyTextEncoder>(cfg_.text, text_rng);
  image_head_ = ProjectionHead(cfg_.vision.output_width, cfg_.joint_dim, head_rng);
  text_head_ = ProjectionHead(cfg_.text.width, cfg_.joint_dim, head_rng);
  fusion_ = FusionModel(cfg_.joint_dim, cfg_.text.width, vocab_.size(), cfg_.fusion, fusion_rng);
}

nn::ParameterList VisionLanguageModel::parameters() const {
  nn::ParameterList out;
  vision_->collect("vision.", out);
  text_->collect("text.", out);
  image_head_.collect("image_head", out);
  text_head_.collect("text_head", out);
  fusion_.collect("fusion.", out);
  return out;
}

nn::Var VisionLanguageModel::embed_images(std::span<const ImageTensor> images) const {
  for (const auto& img : images) validate_image(img, vision_->resolution());
  const nn::Var batch(images_to_batch(images, vision_->channels()));
  return image_head_.forward(vision_->forward(batch));
}

nn::Var VisionLanguageModel::embed_texts(std::span<const TokenSequence> tokens) const {
  const nn::Var seq = text_->forward(tokens);
  std::vector<int> cls_rows;
  for (std::size_t b = 0; b < tokens.size(); ++b) cls_rows.push_back(static_cast<int>(b) * text_->max_length());
  return text_head_.forward(nn::gather_rows(seq, cls_rows));
}

void copy_parameter_values(const nn::ParameterList& from, nn::ParameterList& to) {
  if (from.size() != to.size()) throw ShapeError("parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].var.value().shape() != to[i].var.value().shape()) {
      throw ShapeError("parameter mismatch at '" + from[i].name + "'");
    }
    to[i].var.value().storage() = from[i].var.value().storage();
  }
}

std::size_t count_parameters(const nn::ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

}  // namespace mammovl
