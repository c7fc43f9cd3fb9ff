#include "mammovl/checkpoint.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/finetune.hpp"
#include "mammovl/synthetic.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace mammovl;
namespace fs = std::filesystem;

namespace {

PretrainConfig tiny_pretrain(std::uint64_t seed = 2) {
  PretrainConfig c;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.epochs = 1;
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

const Checkpoint& tiny_checkpoint() {
  static const Checkpoint ckpt = [] {
    auto pairs = synth::to_pretrain_pairs(synth::make_pairs(1, 4), {32, 24});
    return pretrain(pairs, tiny_pretrain()).checkpoint;
  }();
  return ckpt;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mammovl_finetune_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<data::LabeledSample> patients(int n, int images_each, int labels = 5) {
  std::vector<data::LabeledSample> out;
  static const int kRaw[] = {1, 2, 0, 4, 5, 6};
  for (int p = 0; p < n; ++p)
    for (int v = 0; v < images_each; ++v)
      out.push_back({"img/" + std::to_string(p) + "_" + std::to_string(v) + ".png", "P" + std::to_string(p),
                     "LCC", BiradsLabel::from_int(kRaw[p % labels]), std::nullopt, "fixture"});
  return out;
}

// Identity "backbone": the two pixels of a 1x2 image are the features.
class PixelFeatures final : public FeatureExtractor {
 public:
  std::string name() const override { return "pixels"; }
  int output_width() const override { return 2; }
  int channels() const override { return 1; }
  Resolution resolution() const override { return {1, 2}; }
  nn::Tensor extract(const nn::Tensor& batch) const override {
    nn::Tensor out({batch.dim(0), 2});
    for (int b = 0; b < batch.dim(0); ++b)
      for (int j = 0; j < 2; ++j) out.data()[b * 2 + j] = batch.data()[b * 2 + j];
    return out;
  }
};

std::vector<Example> tiny_motif_examples(int per_class, std::uint64_t seed) {
  std::vector<Example> out;
  for (const auto& li : synth::make_motif_set(per_class, seed))
    out.push_back({data::resize_letterbox(li.image, {32, 24}), li.motif});
  return out;
}

}  // namespace

TEST_CASE("attach_head keeps the backbone bit for bit and sizes the head") {
  const auto& ckpt = tiny_checkpoint();
  const auto model = model_from_checkpoint(ckpt);
  nn::ParameterList reference;
  model->vision().collect("backbone.", reference);

  const auto a = attach_head(ckpt, 5, 1);
  const auto b = attach_head(ckpt, 5, 1);
  CHECK(parameters_sha256(a.backbone_parameters()) == parameters_sha256(reference));
  CHECK(parameters_sha256(b.backbone_parameters()) == parameters_sha256(a.backbone_parameters()));
  CHECK(a.num_classes() == 5);

  std::vector<ImageTensor> images{data::resize_letterbox(synth::make_motif_set(1, 0)[0].image, {32, 24})};
  nn::NoGradGuard guard;
  CHECK(a.logits(images).value().cols() == 5);
  CHECK(attach_head(ckpt, 3, 1).logits(images).value().cols() == 3);
}

TEST_CASE("attach_head from disk verifies the checkpoint") {
  const auto dir = scratch("attach");
  Checkpoint ckpt = tiny_checkpoint();
  save_checkpoint(ckpt, dir / "vlm.ckpt");
  CHECK(attach_head(dir / "vlm.ckpt", 5, 0).num_classes() == 5);

  std::string bytes;
  {
    std::ifstream in(dir / "vlm.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bytes[bytes.size() / 2 + 200] ^= 0x01;
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(attach_head(dir / "bad.ckpt", 5, 0), IntegrityError);
  CHECK_THROWS_AS(attach_head(dir / "none.ckpt", 5, 0), ConfigError);
}

TEST_CASE("a fresh backbone gives a valid classifier") {
  TinyConvConfig vision;
  vision.resolution = {32, 24};
  vision.channels = {4, 8};
  vision.output_width = 8;
  const auto clf = attach_head(vision, 5, 3);
  const auto examples = tiny_motif_examples(1, 5);
  std::vector<ImageTensor> images;
  for (const auto& e : examples) images.push_back(e.image);
  const auto preds = clf.predict(images, 3);
  CHECK(preds.size() == images.size());
  for (int p : preds) CHECK((p >= 0 && p < 5));
}

TEST_CASE("sample_budget: ALL and the full count return everything") {
  const auto s = patients(10, 3);
  CHECK(sample_budget(s, std::nullopt, 1).size() == 30);
  CHECK(sample_budget(s, 30, 1).size() == 30);
}

TEST_CASE("sample_budget takes whole patients: 40 x 4 at n = 80 is 20 patients") {
  const auto s = patients(40, 4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto idx = sample_budget(s, 80, seed);
    CHECK(idx.size() == 80);
    std::map<std::string, int> per_patient;
    for (auto i : idx) ++per_patient[s[i].patient_id];
    CHECK(per_patient.size() == 20);
    for (const auto& [p, n] : per_patient) CHECK(n == 4);
  }
}

TEST_CASE("sample_budget meets the budget minimally and nests across budgets") {
  auto s = patients(30, 3);
  // Uneven patient sizes.
  for (int extra = 0; extra < 7; ++extra) s.push_back({"x" + std::to_string(extra), "P3", "LCC", BiradsLabel::from_int(4), {}, "f"});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<std::size_t> previous;
    for (std::size_t n : {1u, 5u, 10u, 20u, 40u, 60u, 97u}) {
      const auto idx = sample_budget(s, n, seed);
      CHECK(idx.size() >= n);
      CHECK(std::includes(idx.begin(), idx.end(), previous.begin(), previous.end()));
      previous = idx;
    }
  }
}

TEST_CASE("sample_budget is stratified by patient label") {
  const auto s = patients(100, 2, 5);  // 20 patients per label
  const auto idx = sample_budget(s, 100, 7);
  std::map<int, int> per_label;
  for (auto i : idx) ++per_label[s[i].birads.value()];
  for (const auto& [label, n] : per_label) CHECK(n == 20);
}

TEST_CASE("sample_budget is deterministic per seed and rejects oversize budgets") {
  const auto s = patients(20, 2);
  CHECK(sample_budget(s, 12, 3) == sample_budget(s, 12, 3));
  CHECK(sample_budget(s, 12, 3) != sample_budget(s, 12, 4));
  CHECK_THROWS_AS(sample_budget(s, 41, 3), BudgetError);
  CHECK_THROWS_AS(sample_budget(s, 41, 3), DataValidationError);
  CHECK_THROWS_AS(sample_budget(s, 0, 3), BudgetError);
  const auto uniform = sample_budget(s, 13, 3, BudgetMode::uniform_image);
  CHECK(uniform.size() == 13);
  CHECK(std::set<std::size_t>(uniform.begin(), uniform.end()).size() == 13);
}

TEST_CASE("logistic sanity: separable identity features reach training accuracy 1 within 50 epochs") {
  auto backbone = std::make_shared<AdapterVisionEncoder>(std::make_shared<PixelFeatures>());
  Classifier clf(backbone, 2, 0);
  std::vector<Example> train;
  Rng rng(4);
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    ImageTensor img = ImageTensor::zeros(1, 2);
    const double a = rng.uniform(0.3, 0.7);
    const double margin = rng.uniform(0.15, 0.3);
    img.at(0, 0) = static_cast<float>(a);
    img.at(0, 1) = static_cast<float>(label ? a + margin : a - margin);
    train.push_back({img, label});
  }
  FinetuneConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 50;
  cfg.batch_size = 8;
  cfg.freeze = FreezePolicy::freeze_backbone;
  const auto res = finetune(clf, train, {}, cfg);
  CHECK(res.best_validation_macro_f1 == 1.0);
  std::vector<ImageTensor> images;
  for (const auto& e : train) images.push_back(e.image);
  const auto preds = clf.predict(images);
  int correct = 0;
  for (std::size_t i = 0; i < train.size(); ++i) correct += preds[i] == train[i].label;
  CHECK(correct == 40);
}

TEST_CASE("finetune is deterministic and keeps the best validation epoch") {
  TinyConvConfig vision;
  vision.resolution = {32, 24};
  vision.channels = {4, 8};
  vision.output_width = 8;
  const auto train = tiny_motif_examples(3, 1);
  const auto val = tiny_motif_examples(2, 2);
  FinetuneConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.seed = 9;

  auto a = attach_head(vision, 8, 9);
  auto b = attach_head(vision, 8, 9);
  const auto ra = finetune(a, train, val, cfg);
  const auto rb = finetune(b, train, val, cfg);
  REQUIRE(ra.log.steps.size() == rb.log.steps.size());
  for (std::size_t i = 0; i < ra.log.steps.size(); ++i) CHECK(ra.log.steps[i].loss.total == rb.log.steps[i].loss.total);
  CHECK(parameters_sha256(a.parameters()) == parameters_sha256(b.parameters()));
  CHECK(ra.log.validation.size() == 4);

  double best = -1;
  int best_epoch = 0;
  for (const auto& v : ra.log.validation)
    if (*v.macro_f1 > best) {
      best = *v.macro_f1;
      best_epoch = v.epoch;
    }
  CHECK(ra.best_epoch == best_epoch);
  std::vector<ImageTensor> images;
  std::vector<int> truths;
  for (const auto& e : val) {
    images.push_back(e.image);
    truths.push_back(e.label);
  }
  CHECK(macro_f1(f1_scores(a.predict(images), truths, 8).f1) == doctest::Approx(best).epsilon(1e-12));

  const auto jsonl = ra.log.to_jsonl();
  CHECK(jsonl.find("\"contrastive\"") == std::string::npos);
  CHECK(jsonl.find("\"macro_f1\"") != std::string::npos);
}

TEST_CASE("a frozen backbone is not updated") {
  const auto& ckpt = tiny_checkpoint();
  auto clf = attach_head(ckpt, 8, 0);
  const auto before = parameters_sha256(clf.backbone_parameters());
  const auto head_before = parameters_sha256(clf.head_parameters());
  FinetuneConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.freeze = FreezePolicy::freeze_backbone;
  finetune(clf, tiny_motif_examples(2, 3), {}, cfg);
  CHECK(parameters_sha256(clf.backbone_parameters()) == before);
  CHECK(parameters_sha256(clf.head_parameters()) != head_before);

  cfg.freeze = FreezePolicy::none;
  finetune(clf, tiny_motif_examples(2, 3), {}, cfg);
  CHECK(parameters_sha256(clf.backbone_parameters()) != before);
}

TEST_CASE("excluded and out-of-range labels are contract errors") {
  auto s = patients(4, 1);
  s[2].birads = BiradsLabel::from_int(3);
  std::vector<ImageTensor> images(s.size(), ImageTensor::zeros(32, 24));
  CHECK_THROWS_AS(make_examples(s, images, ClassScheme::five()), ContractError);
  CHECK_THROWS_AS(make_examples(s, images, ClassScheme::three()), ContractError);
  s[2].birads = BiradsLabel::from_int(6);
  const auto ex = make_examples(s, images, ClassScheme::five());
  CHECK(ex[2].label == 4);

  TinyConvConfig vision;
  vision.resolution = {32, 24};
  vision.channels = {4};
  vision.output_width = 4;
  auto clf = attach_head(vision, 3, 0);
  std::vector<Example> bad{{ImageTensor::zeros(32, 24), 3}};
  CHECK_THROWS_AS(finetune(clf, bad, {}, FinetuneConfig{}), ContractError);
}

TEST_CASE("finetune config parsing") {
  const auto c = finetune_config_from_json(nlohmann::json{{"budget", 64}, {"freeze", "freeze-backbone"}});
  CHECK(c.budget == std::optional<std::size_t>(64));
  CHECK(c.freeze == FreezePolicy::freeze_backbone);
  CHECK_FALSE(finetune_config_from_json(nlohmann::json{{"budget", "ALL"}}, c).budget.has_value());
  CHECK(to_json(finetune_config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"budget", 0}}), ConfigError);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"budget", "most"}}), ConfigError);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"freeze", "partial"}}), ConfigError);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"scheme", "SEVEN"}}), ConfigError);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"lr", 0.1}}), ConfigError);
  const FinetuneConfig defaults;
  CHECK(defaults.learning_rate == 1e-4);
  CHECK(defaults.freeze == FreezePolicy::none);
}

TEST_CASE("ablation: structure, arm symmetry and errors") {
  const auto dir = scratch("ablation");
  const auto manifest = synth::write_labeled_study(dir / "study", 24, 1);
  const auto kept = drop_excluded(manifest, ClassScheme::five());
  const auto images = load_sample_images(kept.samples, dir / "study", {32, 24}, 2);
  Checkpoint ckpt = tiny_checkpoint();
  save_checkpoint(ckpt, dir / "vlm.ckpt");

  AblationConfig cfg;
  cfg.budgets = {8, std::nullopt};
  cfg.offset = 4;
  cfg.checkpoint = dir / "vlm.ckpt";
  cfg.finetune.epochs = 1;
  cfg.finetune.batch_size = 8;
  cfg.finetune.learning_rate = 1e-3;
  cfg.finetune.seed = 3;

  const auto reports = run_ablation(kept.samples, images, cfg);
  REQUIRE(reports.size() == 4);
  CHECK(reports[0].arm == Arm::vlm);
  CHECK(reports[1].arm == Arm::baseline);
  CHECK(reports[0].budget == std::optional<std::size_t>(8));
  CHECK(reports[1].budget == std::optional<std::size_t>(12));
  CHECK_FALSE(reports[2].budget.has_value());
  for (const auto& r : reports) {
    REQUIRE(r.folds.size() == 4);
    std::vector<double> f;
    for (const auto& fm : r.folds) f.push_back(fm.macro_f1);
    CHECK(r.std == doctest::Approx(population_std(f)));
    CHECK(r.scheme == "FIVE");
  }
  CHECK(reports[0].train_images >= 8);
  CHECK(reports[1].train_images >= 12);
  CHECK(render_table(reports).find("baseline") != std::string::npos);

  AblationConfig sym = cfg;
  sym.offset = 0;
  sym.budgets = {8};
  sym.baseline_checkpoint = cfg.checkpoint;
  const auto s = run_ablation(kept.samples, images, sym);
  CHECK(s[0].mean == s[1].mean);
  CHECK(s[0].std == s[1].std);

  AblationConfig mapped = cfg;
  mapped.budgets = {std::nullopt};
  mapped.finetune.scheme = "THREE";
  mapped.eval_mode = EvalMode::mapped_from_five;
  const auto m = run_ablation(kept.samples, images, mapped);
  REQUIRE(m.size() == 2);
  CHECK(m[0].folds[0].per_class_f1.size() == 3);
  CHECK(m[0].scheme == "THREE");

  AblationConfig missing = cfg;
  missing.checkpoint = dir / "absent.ckpt";
  CHECK_THROWS_AS(run_ablation(kept.samples, images, missing), ConfigError);
  missing.checkpoint.clear();
  CHECK_THROWS_AS(run_ablation(kept.samples, images, missing), ConfigError);

  AblationConfig oversize = cfg;
  oversize.budgets = {8};
  oversize.offset = 2000;
  CHECK_THROWS_AS(run_ablation(kept.samples, images, oversize), BudgetError);
}
