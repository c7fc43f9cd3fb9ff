#include "mammovl/checkpoint.hpp"
#include "mammovl/config.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/synthetic.hpp"
#include "mammovl/training.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace mammovl;
namespace fs = std::filesystem;

namespace {

PretrainConfig tiny_config(std::uint64_t seed = 5) {
  PretrainConfig c;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.epochs = 2;
  c.temperature = 0.2;
  c.resolution = {32, 24};
  c.d = 16;
  c.l = 16;
  c.seed = seed;
  c.model.vision.channels = {4, 8, 8};
  c.model.vision.output_width = 16;
  c.model.text.width = 16;
  c.model.text.heads = 2;
  c.model.text.ff_width = 32;
  c.model.fusion = {1, 2, 32};
  return c;
}

std::vector<PretrainPair> tiny_pairs(std::size_t n = 40) {
  auto pairs = synth::to_pretrain_pairs(synth::make_pairs(2, 3), {32, 24});
  pairs.resize(n);
  return pairs;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mammovl_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("one epoch yields a checkpoint tagged epoch 1") {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto pairs = tiny_pairs();
  const auto res = pretrain(pairs, cfg);
  CHECK(res.checkpoint.epoch == 1);
  CHECK(res.log.validation.size() == 1);
  CHECK(res.train_pairs + res.validation_pairs == pairs.size());
  CHECK(res.validation_pairs >= 4);
  CHECK(res.checkpoint.validation_loss == doctest::Approx(res.first_validation_loss));
  // 36 train pairs at batch 8: four full batches plus a leftover of four.
  CHECK(res.log.steps.size() == 5);
}

TEST_CASE("too few pairs for the batch size is a config error") {
  auto cfg = tiny_config();
  cfg.batch_size = 64;
  const auto pairs = tiny_pairs(10);
  CHECK_THROWS_AS(pretrain(pairs, cfg), ConfigError);
}

TEST_CASE("invalid settings are rejected before training") {
  const auto pairs = tiny_pairs();
  auto cfg = tiny_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(pretrain(pairs, cfg), ConfigError);
  cfg = tiny_config();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(pretrain(pairs, cfg), ConfigError);
  cfg = tiny_config();
  cfg.mask_probability = 1.0;
  CHECK_THROWS_AS(pretrain(pairs, cfg), ConfigError);
}

TEST_CASE("identical seeds give bitwise identical runs, also with a batch producer thread") {
  const auto pairs = tiny_pairs();
  auto cfg = tiny_config(11);
  cfg.augment_shift = 2;
  const auto a = pretrain(pairs, cfg);
  PretrainOptions threaded;
  threaded.workers = 3;
  const auto b = pretrain(pairs, cfg, threaded);
  REQUIRE(a.log.steps.size() == b.log.steps.size());
  for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
    CHECK(a.log.steps[i].loss.total == b.log.steps[i].loss.total);
    CHECK(a.log.steps[i].loss.contrastive == b.log.steps[i].loss.contrastive);
    CHECK(a.log.steps[i].loss.mlm == b.log.steps[i].loss.mlm);
  }
  CHECK(a.checkpoint.sha256 == b.checkpoint.sha256);

  const auto c = pretrain(pairs, tiny_config(12));
  CHECK(c.log.steps[0].loss.total != a.log.steps[0].loss.total);
}

TEST_CASE("returned checkpoint is the best epoch and is never worse than epoch 1") {
  auto cfg = tiny_config();
  cfg.epochs = 4;
  const auto res = pretrain(tiny_pairs(), cfg);
  double best = res.log.validation.front().loss;
  int best_epoch = 1;
  for (const auto& v : res.log.validation)
    if (v.loss < best) {
      best = v.loss;
      best_epoch = v.epoch;
    }
  CHECK(res.checkpoint.epoch == best_epoch);
  CHECK(res.checkpoint.validation_loss == best);
  CHECK(res.checkpoint.validation_loss <= res.first_validation_loss);
}

TEST_CASE("checkpoint round trip reproduces the recorded validation loss") {
  const auto dir = scratch("roundtrip");
  const auto pairs = tiny_pairs();
  const auto cfg = tiny_config();
  PretrainOptions opts;
  opts.checkpoint_path = dir / "model.ckpt";
  const auto res = pretrain(pairs, cfg, opts);
  REQUIRE(fs::exists(opts.checkpoint_path));

  const auto loaded = load_checkpoint(opts.checkpoint_path);
  CHECK(loaded.epoch == res.checkpoint.epoch);
  CHECK(loaded.sha256 == res.checkpoint.sha256);
  const auto model = model_from_checkpoint(loaded);
  const auto split = split_validation(pairs, cfg.validation_fraction, cfg.seed);
  std::vector<PretrainPair> val;
  for (auto i : split.validation) val.push_back(pairs[i]);
  const auto reloaded_cfg = pretrain_config_of(loaded);
  CHECK(reloaded_cfg.seed == cfg.seed);
  CHECK(validation_loss(*model, val, reloaded_cfg).total == doctest::Approx(loaded.validation_loss).epsilon(1e-6));
  CHECK(model->vocabulary().tokens() == model_from_checkpoint(res.checkpoint)->vocabulary().tokens());
  for (const auto& entry : fs::directory_iterator(dir))
    CHECK(entry.path().filename().string().find(".tmp-") == std::string::npos);
}

TEST_CASE("tampered, truncated and missing checkpoints are refused") {
  const auto dir = scratch("tamper");
  auto cfg = tiny_config();
  cfg.epochs = 1;
  PretrainOptions opts;
  opts.checkpoint_path = dir / "model.ckpt";
  pretrain(tiny_pairs(), cfg, opts);

  std::string bytes;
  {
    std::ifstream in(opts.checkpoint_path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }
  auto write = [&](const fs::path& p, const std::string& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << b;
  };
  std::string flipped = bytes;
  flipped[flipped.size() - 3] = static_cast<char>(flipped[flipped.size() - 3] ^ 0x40);
  write(dir / "flipped.ckpt", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "flipped.ckpt"), IntegrityError);

  write(dir / "short.ckpt", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), IntegrityError);

  write(dir / "junk.ckpt", "not a checkpoint at all");
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), IntegrityError);

  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), ConfigError);
}

TEST_CASE("validation split keeps groups whole and holds out at least the fraction") {
  std::vector<PretrainPair> pairs;
  for (int g = 0; g < 30; ++g)
    for (int k = 0; k <= g % 3; ++k) pairs.push_back({"p", "doc#" + std::to_string(g), {}, "x"});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = split_validation(pairs, 0.1, seed);
    CHECK(s.train.size() + s.validation.size() == pairs.size());
    CHECK(static_cast<double>(s.validation.size()) >= 0.1 * static_cast<double>(pairs.size()));
    std::set<std::string> train_groups, val_groups;
    for (auto i : s.train) train_groups.insert(pairs[i].group);
    for (auto i : s.validation) val_groups.insert(pairs[i].group);
    for (const auto& g : val_groups) CHECK(train_groups.count(g) == 0);
    CHECK(std::is_sorted(s.train.begin(), s.train.end()));
  }
  CHECK(split_validation(pairs, 0.1, 1).validation == split_validation(pairs, 0.1, 1).validation);
}

TEST_CASE("pretrain config parsing is strict and layered") {
  const PretrainConfig base = tiny_config();
  const auto merged = pretrain_config_from_json(nlohmann::json{{"epochs", 7}, {"temperature", 0.5}}, base);
  CHECK(merged.epochs == 7);
  CHECK(merged.temperature == 0.5);
  CHECK(merged.batch_size == base.batch_size);
  CHECK(merged.model.vision.channels == base.model.vision.channels);
  CHECK(to_json(pretrain_config_from_json(to_json(base))) == to_json(base));

  CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"epoch", 7}}), ConfigError);
  CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"model", {{"vision", {{"chanels", 3}}}}}}), ConfigError);
  CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"epochs", "many"}}), ConfigError);
  CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"epochs", 0}}), ConfigError);
}

TEST_CASE("paper defaults") {
  const PretrainConfig c;
  CHECK(c.batch_size == 64);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.epochs == 25);
  CHECK(c.lambda == 1.0);
  CHECK(c.mask_probability == 0.15);
  CHECK(c.temperature == 1.0);
  CHECK(c.max_vocabulary == 30000);
}

TEST_CASE("training log lines carry the documented fields") {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto res = pretrain(tiny_pairs(), cfg);
  std::istringstream in(res.log.to_jsonl());
  std::string line;
  int steps = 0, validation = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("validation")) {
      ++validation;
      CHECK(j.contains("loss"));
      CHECK(j.contains("epoch"));
    } else {
      ++steps;
      for (const char* key : {"step", "epoch", "contrastive", "mlm", "total", "lr", "timestamp"})
        CHECK(j.contains(key));
    }
  }
  CHECK(steps == static_cast<int>(res.log.steps.size()));
  CHECK(validation == 1);
}

TEST_CASE("retrieval accuracy is a fraction and empty input is a contract error") {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto pairs = tiny_pairs();
  const auto res = pretrain(pairs, cfg);
  const auto model = model_from_checkpoint(res.checkpoint);
  const double top1 = retrieval_top1(*model, pairs);
  CHECK(top1 >= 0.0);
  CHECK(top1 <= 1.0);
  CHECK_THROWS_AS(retrieval_top1(*model, std::span<const PretrainPair>{}), ContractError);
}
