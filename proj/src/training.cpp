#include "mammovl/training.hpp"

#include "mammovl/concurrency.hpp"
#include "mammovl/config.hpp"
#include "mammovl/data/extract.hpp"
#include "mammovl/data/image.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"
#include "mammovl/nn/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <map>
#include <sstream>
#include <thread>

namespace mammovl {

using nlohmann::json;

void PretrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("pretrain config: " + m); };
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (epochs < 1) fail("epochs must be at least 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) fail("validation_fraction must lie in (0, 1)");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (lambda < 0.0) fail("lambda must be non-negative");
  if (!(mask_probability > 0.0 && mask_probability < 1.0)) fail("mask_probability must lie in (0, 1)");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (resolution.height < 1 || resolution.width < 1) fail("resolution must be positive");
  if (d < 1) fail("d must be positive");
  if (l < 2) fail("l must be at least 2");
  if (max_vocabulary < 1) fail("max_vocabulary must be positive");
  if (augment_shift < 0) fail("augment_shift must be non-negative");
}

ModelConfig PretrainConfig::resolved_model() const {
  ModelConfig m = model;
  m.vision.resolution = resolution;
  m.joint_dim = d;
  m.text.max_length = l;
  return m;
}

json to_json(const PretrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"epochs", c.epochs},
          {"lambda", c.lambda},
          {"mask_probability", c.mask_probability},
          {"temperature", c.temperature},
          {"resolution", {c.resolution.height, c.resolution.width}},
          {"d", c.d},
          {"l", c.l},
          {"seed", c.seed},
          {"validation_fraction", c.validation_fraction},
          {"max_vocabulary", c.max_vocabulary},
          {"augment_shift", c.augment_shift},
          {"model",
           {{"vision",
             {{"in_channels", c.model.vision.in_channels},
              {"channels", c.model.vision.channels},
              {"grid", {c.model.vision.grid_h, c.model.vision.grid_w}},
              {"global_max", c.model.vision.global_max},
              {"output_width", c.model.vision.output_width}}},
            {"text",
             {{"width", c.model.text.width},
              {"layers", c.model.text.layers},
              {"heads", c.model.text.heads},
              {"ff_width", c.model.text.ff_width}}},
            {"fusion",
             {{"layers", c.model.fusion.layers},
              {"heads", c.model.fusion.heads},
              {"ff_width", c.model.fusion.ff_width}}}}}};
}

PretrainConfig pretrain_config_from_json(const json& j, const PretrainConfig& base) {
  const json m = strict_merge(to_json(base), j);
  PretrainConfig c;
  try {
    c.batch_size = m.at("batch_size").get<int>();
    c.learning_rate = m.at("learning_rate").get<double>();
    c.weight_decay = m.at("weight_decay").get<double>();
    c.beta1 = m.at("betas").at(0).get<double>();
    c.beta2 = m.at("betas").at(1).get<double>();
    c.epochs = m.at("epochs").get<int>();
    c.lambda = m.at("lambda").get<double>();
    c.mask_probability = m.at("mask_probability").get<double>();
    c.temperature = m.at("temperature").get<double>();
    c.resolution = {m.at("resolution").at(0).get<int>(), m.at("resolution").at(1).get<int>()};
    c.d = m.at("d").get<int>();
    c.l = m.at("l").get<int>();
    c.seed = m.at("seed").get<std::uint64_t>();
    c.validation_fraction = m.at("validation_fraction").get<double>();
    c.max_vocabulary = m.at("max_vocabulary").get<std::size_t>();
    c.augment_shift = m.at("augment_shift").get<int>();
    const auto& v = m.at("model").at("vision");
    c.model.vision.in_channels = v.at("in_channels").get<int>();
    c.model.vision.channels = v.at("channels").get<std::vector<int>>();
    c.model.vision.grid_h = v.at("grid").at(0).get<int>();
    c.model.vision.grid_w = v.at("grid").at(1).get<int>();
    c.model.vision.global_max = v.at("global_max").get<bool>();
    c.model.vision.output_width = v.at("output_width").get<int>();
    const auto& t = m.at("model").at("text");
    c.model.text.width = t.at("width").get<int>();
    c.model.text.layers = t.at("layers").get<int>();
    c.model.text.heads = t.at("heads").get<int>();
    c.model.text.ff_width = t.at("ff_width").get<int>();
    const auto& f = m.at("model").at("fusion");
    c.model.fusion.layers = f.at("layers").get<int>();
    c.model.fusion.heads = f.at("heads").get<int>();
    c.model.fusion.ff_width = f.at("ff_width").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<PretrainPair> load_pretrain_pairs(const std::filesystem::path& pairs_jsonl, Resolution resolution,
                                              int workers) {
  const auto records = data::read_pairs(pairs_jsonl);
  const auto base = pairs_jsonl.parent_path();
  std::vector<PretrainPair> out(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& r = records[i];
    out[i].id = r.pair_id;
    out[i].group = r.source + "#" + std::to_string(r.page);
    out[i].caption = r.caption;
    out[i].image = data::resize_letterbox(data::read_png(base / r.image_file), resolution);
  });
  return out;
}

ValidationSplit split_validation(std::span<const PretrainPair> pairs, double fraction, std::uint64_t seed) {
  std::vector<std::string> groups;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& m = members[pairs[i].group];
    if (m.empty()) groups.push_back(pairs[i].group);
    m.push_back(i);
  }
  Rng rng(derive_seed(seed, "validation-split"));
  rng.shuffle(groups);
  const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pairs.size())));
  std::vector<bool> held(pairs.size(), false);
  std::size_t count = 0;
  for (const auto& g : groups) {
    if (count >= target) break;
    for (auto i : members[g]) held[i] = true;
    count += members[g].size();
  }
  ValidationSplit s;
  for (std::size_t i = 0; i < pairs.size(); ++i) (held[i] ? s.validation : s.train).push_back(i);
  return s;
}

double wall_clock() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

std::string TrainingLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& s : steps) {
    json j;
    if (kind == "pretrain") {
      j = json{{"step", s.step},           {"epoch", s.epoch}, {"contrastive", s.loss.contrastive},
               {"mlm", s.loss.mlm},        {"total", s.loss.total}, {"lr", s.lr},
               {"timestamp", s.timestamp}};
    } else {
      j = json{{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss.total}, {"lr", s.lr}, {"timestamp", s.timestamp}};
    }
    out << j.dump() << '\n';
  }
  for (const auto& v : validation) {
    json j{{"validation", true}, {"epoch", v.epoch}, {"loss", v.loss}};
    if (v.macro_f1) j["macro_f1"] = *v.macro_f1;
    j["timestamp"] = v.timestamp;
    out << j.dump() << '\n';
  }
  return out.str();
}

void TrainingLog::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write training log " + path.string());
  out << to_jsonl();
}

namespace {

struct PreparedBatch {
  std::vector<ImageTensor> images;
  std::vector<TokenSequence> tokens;
  std::vector<MaskingOutcome> masked;
};

// Translation with edge replication.
ImageTensor shifted(const ImageTensor& img, int dy, int dx) {
  ImageTensor out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(std::clamp(y - dy, 0, img.height - 1), std::clamp(x - dx, 0, img.width - 1), c);
  return out;
}

PreparedBatch prepare_batch(std::span<const PretrainPair> pairs, std::span<const TokenSequence> tokens,
                            std::span<const std::size_t> indices, const MaskingPolicy& policy, Rng& mask_rng,
                            int shift = 0, Rng* shift_rng = nullptr) {
  PreparedBatch b;
  for (auto i : indices) {
    if (shift > 0 && shift_rng) {
      const int dy = shift_rng->below_int(2 * shift + 1) - shift;
      const int dx = shift_rng->below_int(2 * shift + 1) - shift;
      b.images.push_back(shifted(pairs[i].image, dy, dx));
    } else {
      b.images.push_back(pairs[i].image);
    }
    b.tokens.push_back(tokens[i]);
    b.masked.push_back(mask_tokens(tokens[i], policy, mask_rng));
  }
  return b;
}

MatrixD to_double(const nn::Tensor& t) { return t.mat().cast<double>(); }

nn::Tensor to_float(const MatrixD& m, double scale = 1.0) {
  nn::Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  t.mat() = (m * scale).cast<float>();
  return t;
}

struct ForwardResult {
  LossBreakdown loss;
  nn::Var image, text, logits;
  EmbeddingLossGrad contrastive;
  MlmResult mlm;
};

ForwardResult forward_losses(const VisionLanguageModel& model, const PreparedBatch& batch,
                             const PretrainConfig& cfg) {
  const int B = static_cast<int>(batch.images.size());
  const int L = model.text().max_length();
  ForwardResult r;
  r.image = model.embed_images(batch.images);
  r.text = model.embed_texts(batch.tokens);

  std::vector<TokenSequence> masked_seqs;
  std::vector<std::uint8_t> mask;
  for (const auto& m : batch.masked) {
    masked_seqs.push_back(m.masked_sequence);
    mask.insert(mask.end(), m.masked_sequence.attention_mask.begin(), m.masked_sequence.attention_mask.end());
  }
  const nn::Var masked_hidden = model.text().forward(masked_seqs);
  r.logits = model.fusion().forward(r.image, masked_hidden, B, L, mask);

  r.contrastive = contrastive_embedding_loss(to_double(r.image.value()), to_double(r.text.value()), cfg.temperature);
  const MatrixD all_logits = to_double(r.logits.value());
  std::vector<MatrixD> per_sample;
  per_sample.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) per_sample.push_back(all_logits.middleRows(static_cast<Eigen::Index>(b) * L, L));
  r.mlm = mlm_loss_with_grad(per_sample, batch.masked);
  r.loss = combined_loss(r.contrastive.loss, r.mlm.loss, cfg.lambda);
  return r;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> indices, int batch_size, Rng& rng) {
  rng.shuffle(indices);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < indices.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(indices.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i), indices.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // A single leftover pair has no negatives; fold it into the previous batch.
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

std::vector<TokenSequence> tokenize_all(std::span<const PretrainPair> pairs, const Vocabulary& vocab, int l) {
  std::vector<TokenSequence> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(vocab.encode(p.caption, l));
  return out;
}

}  // namespace

LossBreakdown validation_loss(const VisionLanguageModel& model, std::span<const PretrainPair> pairs,
                              const PretrainConfig& config) {
  if (pairs.empty()) throw ContractError("validation_loss: no pairs");
  nn::NoGradGuard guard;
  const auto tokens = tokenize_all(pairs, model.vocabulary(), model.text().max_length());
  const MaskingPolicy policy{config.mask_probability, 0.8, 0.1, model.vocabulary().size()};
  Rng mask_rng(derive_seed(config.seed, "validation-mask"));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  LossBreakdown sum{0.0, 0.0, 0.0, config.lambda};
  std::size_t seen = 0;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(config.batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(config.batch_size));
    const std::span<const std::size_t> idx(order.data() + i, end - i);
    const auto batch = prepare_batch(pairs, tokens, idx, policy, mask_rng);
    const auto r = forward_losses(model, batch, config);
    const double w = static_cast<double>(idx.size());
    sum.contrastive += w * r.loss.contrastive;
    sum.mlm += w * r.loss.mlm;
    seen += idx.size();
  }
  sum.contrastive /= static_cast<double>(seen);
  sum.mlm /= static_cast<double>(seen);
  return combined_loss(sum.contrastive, sum.mlm, config.lambda);
}

json describe_model(const VisionLanguageModel& model) {
  const auto& tokens = model.vocabulary().tokens();
  return {{"architecture", model_config_to_json(model.config())},
          {"vocabulary", std::vector<std::string>(tokens.begin() + Vocabulary::kNumSpecial, tokens.end())}};
}

Checkpoint make_checkpoint(const VisionLanguageModel& model, const PretrainConfig& config, int epoch,
                           double validation_loss, const json& run_config) {
  Checkpoint c;
  c.kind = "vision-language";
  c.config = {{"pretrain", to_json(config)}, {"run", run_config}};
  c.model = describe_model(model);
  c.epoch = epoch;
  c.validation_loss = validation_loss;
  c.tensors = snapshot_parameters(model.parameters());
  return c;
}

std::unique_ptr<VisionLanguageModel> model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "vision-language")
    throw ConfigError("checkpoint kind '" + ckpt.kind + "' is not a vision-language checkpoint");
  ModelConfig cfg;
  std::vector<std::string> words;
  try {
    cfg = model_config_from_json(ckpt.model.at("architecture"));
    words = ckpt.model.at("vocabulary").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint model section: ") + e.what());
  }
  auto model = std::make_unique<VisionLanguageModel>(cfg, Vocabulary(std::move(words)), 0);
  auto params = model->parameters();
  restore_parameters(ckpt.tensors, params);
  return model;
}

PretrainConfig pretrain_config_of(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("pretrain")) throw ConfigError("checkpoint carries no pretrain config");
  return pretrain_config_from_json(ckpt.config.at("pretrain"));
}

PretrainResult pretrain(std::span<const PretrainPair> pairs, const PretrainConfig& config,
                        const PretrainOptions& options) {
  config.validate();
  const auto split = split_validation(pairs, config.validation_fraction, config.seed);
  const auto need = static_cast<std::size_t>(2 * config.batch_size);
  if (split.train.size() < need || split.validation.empty())
    throw ConfigError("pretraining needs at least " + std::to_string(need) + " training pairs after the " +
                      "validation split; have " + std::to_string(split.train.size()) + " of " +
                      std::to_string(pairs.size()));

  std::vector<PretrainPair> val_pairs;
  for (auto i : split.validation) val_pairs.push_back(pairs[i]);

  Vocabulary vocab;
  if (options.vocabulary) {
    vocab = *options.vocabulary;
  } else {
    std::vector<std::string> captions;
    for (auto i : split.train) captions.push_back(pairs[i].caption);
    vocab = Vocabulary::build(captions, config.max_vocabulary);
  }
  VisionLanguageModel model(config.resolved_model(), vocab, config.seed);
  const auto tokens = tokenize_all(pairs, model.vocabulary(), config.l);
  const MaskingPolicy policy{config.mask_probability, 0.8, 0.1, model.vocabulary().size()};

  nn::AdamW opt(model.parameters(),
                {config.learning_rate, config.beta1, config.beta2, 1e-8, config.weight_decay});

  PretrainResult result;
  result.train_pairs = split.train.size();
  result.validation_pairs = split.validation.size();
  result.log.kind = "pretrain";
  double best = std::numeric_limits<double>::infinity();
  long step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng order_rng(derive_seed(derive_seed(config.seed, "epoch-order"), static_cast<std::uint64_t>(epoch)));
    Rng mask_rng(derive_seed(derive_seed(config.seed, "train-mask"), static_cast<std::uint64_t>(epoch)));
    Rng shift_rng(derive_seed(derive_seed(config.seed, "train-shift"), static_cast<std::uint64_t>(epoch)));
    const auto batches = epoch_batches(split.train, config.batch_size, order_rng);

    auto run_step = [&](const PreparedBatch& batch) {
      const auto r = forward_losses(model, batch, config);
      std::vector<std::pair<nn::Var, nn::Tensor>> seeds;
      seeds.emplace_back(r.image, to_float(r.contrastive.grad_image));
      seeds.emplace_back(r.text, to_float(r.contrastive.grad_text));
      if (!r.mlm.empty_batch) {
        MatrixD g(r.logits.rows(), r.logits.cols());
        Eigen::Index row = 0;
        for (const auto& part : r.mlm.grad_logits) {
          g.middleRows(row, part.rows()) = part;
          row += part.rows();
        }
        seeds.emplace_back(r.logits, to_float(g, config.lambda));
      }
      opt.zero_grad();
      nn::backward(seeds);
      opt.step();
      result.log.steps.push_back({++step, epoch, r.loss, config.learning_rate, wall_clock()});
    };

    if (options.workers > 1) {
      // One producer keeps batch preparation (and the mask stream) in order.
      BoundedQueue<PreparedBatch> queue(2);
      std::exception_ptr producer_error;
      std::thread producer([&] {
        try {
          for (const auto& idx : batches)
            queue.push(prepare_batch(pairs, tokens, idx, policy, mask_rng, config.augment_shift, &shift_rng));
        } catch (...) {
          producer_error = std::current_exception();
        }
        queue.close();
      });
      try {
        while (auto batch = queue.pop()) run_step(*batch);
      } catch (...) {
        queue.close();
        producer.join();
        throw;
      }
      producer.join();
      if (producer_error) std::rethrow_exception(producer_error);
    } else {
      for (const auto& idx : batches)
        run_step(prepare_batch(pairs, tokens, idx, policy, mask_rng, config.augment_shift, &shift_rng));
    }

    const LossBreakdown val = validation_loss(model, val_pairs, config);
    const ValidationRecord rec{epoch, val.total, std::nullopt, wall_clock()};
    result.log.validation.push_back(rec);
    if (epoch == 1) result.first_validation_loss = val.total;
    log::info("pretrain epoch " + std::to_string(epoch) + "/" + std::to_string(config.epochs) +
              " validation loss " + std::to_string(val.total));
    if (val.total < best) {
      best = val.total;
      result.checkpoint = make_checkpoint(model, config, epoch, val.total, options.run_config);
      if (!options.checkpoint_path.empty()) save_checkpoint(result.checkpoint, options.checkpoint_path);
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (result.checkpoint.sha256.empty()) result.checkpoint.sha256 = sha256_hex(payload_bytes(result.checkpoint.tensors));
  return result;
}

double retrieval_top1(const VisionLanguageModel& model, std::span<const PretrainPair> pairs) {
  if (pairs.empty()) throw ContractError("retrieval_top1: no pairs");
  nn::NoGradGuard guard;
  const int n = static_cast<int>(pairs.size());
  MatrixD V(n, model.config().joint_dim), T(n, model.config().joint_dim);
  constexpr int kChunk = 64;
  for (int start = 0; start < n; start += kChunk) {
    const int count = std::min(kChunk, n - start);
    std::vector<ImageTensor> images;
    std::vector<TokenSequence> tokens;
    for (int i = start; i < start + count; ++i) {
      images.push_back(pairs[static_cast<std::size_t>(i)].image);
      tokens.push_back(model.vocabulary().encode(pairs[static_cast<std::size_t>(i)].caption,
                                                 model.text().max_length()));
    }
    V.middleRows(start, count) = to_double(model.embed_images(images).value());
    T.middleRows(start, count) = to_double(model.embed_texts(tokens).value());
  }
  const MatrixD s = V * T.transpose();
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    s.row(i).maxCoeff(&best);
    if (best == i) ++correct;
  }
  return static_cast<double>(correct) / n;
}

}  // namespace mammovl
