#include "mammovl/finetune.hpp"

#include "mammovl/concurrency.hpp"
#include "mammovl/config.hpp"
#include "mammovl/data/image.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"
#include "mammovl/nn/optim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace mammovl {

using nlohmann::json;

Classifier::Classifier(std::shared_ptr<VisionEncoder> backbone, int num_classes, std::uint64_t seed)
    : backbone_(std::move(backbone)) {
  if (!backbone_) throw ContractError("classifier needs a backbone");
  if (num_classes < 2) throw ContractError("classifier needs at least 2 classes");
  Rng rng(derive_seed(seed, "init/classifier-head"));
  head_ = nn::Linear(backbone_->spec().output_width, num_classes, rng);
}

nn::Var Classifier::head_logits(const nn::Var& features) const { return head_.forward(features); }

nn::Var Classifier::logits(std::span<const ImageTensor> images) const {
  for (const auto& img : images) validate_image(img, backbone_->resolution());
  return head_logits(backbone_->forward(nn::Var(images_to_batch(images, backbone_->channels()))));
}

std::vector<int> Classifier::predict(std::span<const ImageTensor> images, int batch) const {
  nn::NoGradGuard guard;
  std::vector<int> out;
  out.reserve(images.size());
  const auto step = static_cast<std::size_t>(std::max(batch, 1));
  for (std::size_t i = 0; i < images.size(); i += step) {
    const auto part = images.subspan(i, std::min(step, images.size() - i));
    const auto z = logits(part).value();
    for (int r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      z.mat().row(r).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

nn::ParameterList Classifier::backbone_parameters() const {
  nn::ParameterList out;
  backbone_->collect("backbone.", out);
  return out;
}

nn::ParameterList Classifier::head_parameters() const {
  nn::ParameterList out;
  head_.collect("head", out);
  return out;
}

nn::ParameterList Classifier::parameters() const {
  auto out = backbone_parameters();
  for (auto& p : head_parameters()) out.push_back(std::move(p));
  return out;
}

Classifier attach_head(const Checkpoint& checkpoint, int num_classes, std::uint64_t seed) {
  const auto model = model_from_checkpoint(checkpoint);
  return Classifier(model->vision_ptr(), num_classes, seed);
}

Classifier attach_head(const std::filesystem::path& checkpoint, int num_classes, std::uint64_t seed) {
  return attach_head(load_checkpoint(checkpoint), num_classes, seed);
}

Classifier attach_head(const TinyConvConfig& vision, int num_classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init/vision"));
  return Classifier(std::make_shared<TinyConvEncoder>(vision, rng), num_classes, seed);
}

// ---------------------------------------------------------------------------

namespace {

struct PatientGroups {
  std::vector<std::string> order;  // first appearance
  std::map<std::string, std::vector<std::size_t>> members;
};

PatientGroups group_patients(std::span<const data::LabeledSample> samples) {
  PatientGroups g;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& m = g.members[samples[i].patient_id];
    if (m.empty()) g.order.push_back(samples[i].patient_id);
    m.push_back(i);
  }
  return g;
}

// Most common raw label of a patient, ties to the larger label.
int patient_stratum(std::span<const data::LabeledSample> samples, const std::vector<std::size_t>& members) {
  std::array<int, 7> counts{};
  for (auto i : members) ++counts[static_cast<std::size_t>(samples[i].birads.value())];
  int best = 0;
  for (int v = 0; v < 7; ++v)
    if (counts[static_cast<std::size_t>(v)] >= counts[static_cast<std::size_t>(best)]) best = v;
  return best;
}

}  // namespace

std::vector<std::size_t> sample_budget(std::span<const data::LabeledSample> samples, std::optional<std::size_t> n,
                                       std::uint64_t seed, BudgetMode mode) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (!n) return all;
  if (*n == 0) throw BudgetError("budget must be at least 1 image");
  if (*n > samples.size())
    throw BudgetError("budget of " + std::to_string(*n) + " images exceeds the " + std::to_string(samples.size()) +
                      " available");

  Rng rng(derive_seed(seed, "budget"));
  std::vector<std::size_t> chosen;
  if (mode == BudgetMode::uniform_image) {
    rng.shuffle(all);
    chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(*n));
  } else {
    const auto groups = group_patients(samples);
    std::map<int, std::vector<std::string>> strata;
    for (const auto& p : groups.order) strata[patient_stratum(samples, groups.members.at(p))].push_back(p);
    struct Slot {
      double key;
      int stratum;
      const std::string* patient;
    };
    std::vector<Slot> slots;
    for (auto& [label, patients] : strata) {
      rng.shuffle(patients);
      const double m = static_cast<double>(patients.size());
      for (std::size_t j = 0; j < patients.size(); ++j)
        slots.push_back({(static_cast<double>(j) + 0.5) / m, label, &patients[j]});
    }
    std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
      return a.key != b.key ? a.key < b.key : a.stratum < b.stratum;
    });
    for (const auto& s : slots) {
      if (chosen.size() >= *n) break;
      const auto& m = groups.members.at(*s.patient);
      chosen.insert(chosen.end(), m.begin(), m.end());
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// ---------------------------------------------------------------------------

namespace {

std::string freeze_name(FreezePolicy f) { return f == FreezePolicy::none ? "none" : "freeze-backbone"; }
std::string budget_mode_name(BudgetMode m) {
  return m == BudgetMode::stratified_patient ? "stratified-patient" : "uniform-image";
}

}  // namespace

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("finetune config: " + m); };
  if (budget && *budget < 1) fail("budget must be at least 1 or ALL");
  try {
    ClassScheme::parse(scheme);
  } catch (const Error& e) {
    fail(e.what());
  }
  if (head != "linear") fail("unknown head '" + head + "' (known: linear)");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) fail("validation_fraction must lie in [0, 1)");
}

json to_json(const FinetuneConfig& c) {
  return {{"budget", c.budget ? json(*c.budget) : json("ALL")},
          {"scheme", c.scheme},
          {"head", c.head},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"freeze", freeze_name(c.freeze)},
          {"budget_mode", budget_mode_name(c.budget_mode)},
          {"validation_fraction", c.validation_fraction}};
}

FinetuneConfig finetune_config_from_json(const json& j, const FinetuneConfig& base) {
  if (!j.is_object()) throw ConfigError("finetune config must be a JSON object");
  json overrides = j;
  std::optional<json> budget;
  if (overrides.contains("budget")) {
    budget = overrides.at("budget");
    overrides.erase("budget");
  }
  const json m = strict_merge(to_json(base), overrides);
  FinetuneConfig c = base;
  try {
    if (budget) {
      if (budget->is_string() && budget->get<std::string>() == "ALL") {
        c.budget.reset();
      } else if (budget->is_number_unsigned() || (budget->is_number_integer() && budget->get<long long>() >= 0)) {
        c.budget = budget->get<std::size_t>();
      } else {
        throw ConfigError("finetune config: budget must be a non-negative count or \"ALL\"");
      }
    }
    c.scheme = m.at("scheme").get<std::string>();
    c.head = m.at("head").get<std::string>();
    c.learning_rate = m.at("learning_rate").get<double>();
    c.weight_decay = m.at("weight_decay").get<double>();
    c.beta1 = m.at("betas").at(0).get<double>();
    c.beta2 = m.at("betas").at(1).get<double>();
    c.epochs = m.at("epochs").get<int>();
    c.batch_size = m.at("batch_size").get<int>();
    c.seed = m.at("seed").get<std::uint64_t>();
    const auto freeze = m.at("freeze").get<std::string>();
    if (freeze == "none") {
      c.freeze = FreezePolicy::none;
    } else if (freeze == "freeze-backbone") {
      c.freeze = FreezePolicy::freeze_backbone;
    } else {
      throw ConfigError("finetune config: freeze must be \"none\" or \"freeze-backbone\"");
    }
    const auto mode = m.at("budget_mode").get<std::string>();
    if (mode == "stratified-patient") {
      c.budget_mode = BudgetMode::stratified_patient;
    } else if (mode == "uniform-image") {
      c.budget_mode = BudgetMode::uniform_image;
    } else {
      throw ConfigError("finetune config: budget_mode must be \"stratified-patient\" or \"uniform-image\"");
    }
    c.validation_fraction = m.at("validation_fraction").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("finetune config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Example> make_examples(std::span<const data::LabeledSample> samples, std::span<const ImageTensor> images,
                                   const ClassScheme& scheme) {
  if (samples.size() != images.size())
    throw ContractError("make_examples: " + std::to_string(samples.size()) + " samples but " +
                        std::to_string(images.size()) + " images");
  const auto labels = map_labels(samples, scheme);
  std::vector<Example> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back({images[i], labels[i]});
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct EvalOutcome {
  double loss = 0.0;
  double macro_f1 = 0.0;
};

EvalOutcome evaluate_examples(const Classifier& clf, std::span<const Example> examples, int batch) {
  nn::NoGradGuard guard;
  std::vector<int> preds, truths;
  double loss_sum = 0.0;
  const auto step = static_cast<std::size_t>(std::max(batch, 1));
  for (std::size_t i = 0; i < examples.size(); i += step) {
    const auto end = std::min(examples.size(), i + step);
    std::vector<ImageTensor> images;
    std::vector<int> y;
    for (std::size_t j = i; j < end; ++j) {
      images.push_back(examples[j].image);
      y.push_back(examples[j].label);
    }
    const auto z = clf.logits(images);
    loss_sum += static_cast<double>(nn::softmax_cross_entropy(z, y).value().data()[0]) * static_cast<double>(y.size());
    for (int r = 0; r < z.value().rows(); ++r) {
      Eigen::Index best = 0;
      z.value().mat().row(r).maxCoeff(&best);
      preds.push_back(static_cast<int>(best));
    }
    truths.insert(truths.end(), y.begin(), y.end());
  }
  const auto f1 = f1_scores(preds, truths, clf.num_classes());
  return {loss_sum / static_cast<double>(examples.size()), macro_f1(f1.f1)};
}

}  // namespace

FinetuneResult finetune(Classifier& classifier, std::span<const Example> train, std::span<const Example> validation,
                        const FinetuneConfig& config) {
  config.validate();
  if (train.empty()) throw ContractError("finetune: empty training set");
  const int k = classifier.num_classes();
  for (auto set : {train, validation})
    for (const auto& e : set)
      if (e.label < 0 || e.label >= k)
        throw ContractError("finetune: class index " + std::to_string(e.label) + " outside [0, " +
                            std::to_string(k) + ")");
  const auto val = validation.empty() ? train : validation;
  const bool frozen = config.freeze == FreezePolicy::freeze_backbone;

  auto params = classifier.parameters();
  nn::AdamW opt(frozen ? classifier.head_parameters() : params,
                {config.learning_rate, config.beta1, config.beta2, 1e-8, config.weight_decay});

  FinetuneResult result;
  result.log.kind = "finetune";
  double best = -1.0;
  std::vector<TensorRecord> best_weights;
  long step = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(derive_seed(derive_seed(config.seed, "finetune-order"), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); i += bs) {
      const auto end = std::min(order.size(), i + bs);
      std::vector<ImageTensor> images;
      std::vector<int> y;
      for (std::size_t j = i; j < end; ++j) {
        images.push_back(train[order[j]].image);
        y.push_back(train[order[j]].label);
      }
      nn::Var z;
      if (frozen) {
        nn::Var features;
        {
          nn::NoGradGuard guard;
          for (const auto& img : images) validate_image(img, classifier.backbone().resolution());
          features = classifier.backbone().forward(
              nn::Var(images_to_batch(images, classifier.backbone().channels())));
        }
        z = classifier.head_logits(nn::Var(features.value()));
      } else {
        z = classifier.logits(images);
      }
      const auto loss = nn::softmax_cross_entropy(z, y);
      const double value = loss.value().data()[0];
      if (!std::isfinite(value))
        throw NumericalAbort("finetune", "non-finite loss at step " + std::to_string(step + 1));
      opt.zero_grad();
      nn::backward(loss);
      opt.step();
      LossBreakdown lb;
      lb.total = value;
      result.log.steps.push_back({++step, epoch, lb, config.learning_rate, wall_clock()});
    }
    const auto ev = evaluate_examples(classifier, val, std::max(config.batch_size, 64));
    result.log.validation.push_back({epoch, ev.loss, ev.macro_f1, wall_clock()});
    if (ev.macro_f1 > best) {
      best = ev.macro_f1;
      result.best_epoch = epoch;
      best_weights = snapshot_parameters(params);
    }
  }
  restore_parameters(best_weights, params);
  result.best_validation_macro_f1 = best;
  return result;
}

std::vector<ImageTensor> load_sample_images(std::span<const data::LabeledSample> samples,
                                            const std::filesystem::path& base, Resolution resolution,
                                            int workers) {
  std::vector<ImageTensor> out(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    std::filesystem::path p = samples[i].image_path;
    if (p.is_relative()) p = base / p;
    out[i] = data::resize_letterbox(data::read_png(p), resolution);
  });
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Patients of `pool` moved to validation: a seeded ceil(fraction) share,
// leaving at least one patient for training.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(
    std::span<const data::LabeledSample> samples, const std::vector<std::size_t>& pool, double fraction,
    std::uint64_t seed) {
  std::vector<std::string> patients;
  std::set<std::string> seen;
  for (auto i : pool)
    if (seen.insert(samples[i].patient_id).second) patients.push_back(samples[i].patient_id);
  Rng rng(derive_seed(seed, "finetune-validation"));
  rng.shuffle(patients);
  auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(patients.size())));
  take = std::min(take, patients.size() > 0 ? patients.size() - 1 : 0);
  const std::set<std::string> held(patients.begin(), patients.begin() + static_cast<std::ptrdiff_t>(take));
  std::vector<std::size_t> train, val;
  for (auto i : pool) (held.count(samples[i].patient_id) ? val : train).push_back(i);
  return {train, val};
}

}  // namespace

CrossValidationResult cross_validate(std::span<const data::LabeledSample> samples,
                                     std::span<const ImageTensor> images, const FoldAssignment& folds,
                                     const ClassifierFactory& factory, const FinetuneConfig& config,
                                     const CrossValidationOptions& options) {
  config.validate();
  if (samples.size() != images.size()) throw ContractError("cross_validate: samples and images differ in length");
  if (folds.sample_fold.size() != samples.size()) throw ContractError("cross_validate: fold assignment size mismatch");
  const ClassScheme& scheme = ClassScheme::parse(config.scheme);
  const bool mapped = options.eval_mode == EvalMode::mapped_from_five;
  if (mapped && scheme.name != SchemeName::three)
    throw ConfigError("mapped evaluation collapses FIVE onto THREE; set scheme to THREE");
  const ClassScheme& train_scheme = mapped ? ClassScheme::five() : scheme;
  const auto labels = map_labels(samples, train_scheme);

  CrossValidationResult out;
  MetricReport& report = out.report;
  report.scheme = scheme.label();
  report.arm = options.arm;
  report.budget = options.budget;
  for (int fold = 0; fold < folds.k; ++fold) {
    const std::uint64_t fold_seed = derive_seed(config.seed, static_cast<std::uint64_t>(fold));
    const auto [pool, val_idx] =
        carve_validation(samples, folds.train_indices(fold), config.validation_fraction, fold_seed);
    std::vector<data::LabeledSample> pool_samples;
    for (auto i : pool) pool_samples.push_back(samples[i]);
    const auto chosen = sample_budget(pool_samples, options.budget, fold_seed, config.budget_mode);

    std::vector<Example> train, val;
    for (auto c : chosen) train.push_back({images[pool[c]], labels[pool[c]]});
    for (auto i : val_idx) val.push_back({images[i], labels[i]});

    Classifier clf = factory(train_scheme.num_classes, fold_seed);
    FinetuneConfig fc = config;
    fc.seed = fold_seed;
    out.logs.push_back(finetune(clf, train, val, fc).log);

    const auto test_idx = folds.test_indices(fold);
    std::vector<ImageTensor> test_images;
    std::vector<int> truths;
    for (auto i : test_idx) {
      test_images.push_back(images[i]);
      truths.push_back(labels[i]);
    }
    auto preds = clf.predict(test_images);
    for (std::size_t j = 0; j < test_idx.size(); ++j) out.predictions.push_back({test_idx[j], fold, preds[j]});
    if (mapped) {
      for (auto& p : preds) p = five_to_three(p);
      for (auto& t : truths) t = five_to_three(t);
    }
    auto fm = fold_metrics(fold, preds, truths, scheme.num_classes);
    fm.train_size = train.size();
    fm.test_size = test_idx.size();
    report.train_images = std::max(report.train_images, train.size());
    report.folds.push_back(std::move(fm));
    log::info(arm_name(options.arm) + " n=" + (options.budget ? std::to_string(*options.budget) : "ALL") + " fold " +
              std::to_string(fold + 1) + "/" + std::to_string(folds.k) + " macro-F1 " +
              std::to_string(report.folds.back().macro_f1));
    if (options.on_fold) options.on_fold(fold, clf);
  }
  summarize(report);
  return out;
}

Checkpoint classifier_checkpoint(const Classifier& classifier, const json& run_config) {
  Checkpoint c;
  c.kind = "classifier";
  c.config = run_config;
  c.model = {{"num_classes", classifier.num_classes()}, {"backbone", classifier.backbone().descriptor()}};
  c.tensors = snapshot_parameters(classifier.parameters());
  c.sha256 = sha256_hex(payload_bytes(c.tensors));
  return c;
}

std::vector<MetricReport> run_ablation(std::span<const data::LabeledSample> samples,
                                       std::span<const ImageTensor> images, const AblationConfig& config) {
  config.finetune.validate();
  if (samples.size() != images.size()) throw ContractError("run_ablation: samples and images differ in length");
  if (config.budgets.empty()) throw ConfigError("ablation needs at least one budget");
  if (config.checkpoint.empty()) throw ConfigError("ablation needs a pretrained checkpoint");
  const bool mapped = config.eval_mode == EvalMode::mapped_from_five;
  const ClassScheme& train_scheme = mapped ? ClassScheme::five() : ClassScheme::parse(config.finetune.scheme);

  const Checkpoint vlm = load_checkpoint(config.checkpoint);
  std::optional<Checkpoint> baseline_ckpt;
  if (!config.baseline_checkpoint.empty()) baseline_ckpt = load_checkpoint(config.baseline_checkpoint);
  TinyConvConfig baseline_vision;
  try {
    baseline_vision = model_config_from_json(vlm.model.at("architecture")).vision;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint model section: ") + e.what());
  }

  std::vector<data::LabeledSample> kept;
  std::vector<ImageTensor> kept_images;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (map_label(samples[i].birads, train_scheme)) {
      kept.push_back(samples[i]);
      kept_images.push_back(images[i]);
    }
  const auto folds = kfold_split(kept, config.folds, config.finetune.seed, config.granularity);

  const ClassifierFactory vlm_factory = [&](int k, std::uint64_t seed) { return attach_head(vlm, k, seed); };
  const ClassifierFactory baseline_factory = [&](int k, std::uint64_t seed) {
    return baseline_ckpt ? attach_head(*baseline_ckpt, k, seed) : attach_head(baseline_vision, k, seed);
  };

  std::vector<MetricReport> reports;
  for (const auto& budget : config.budgets) {
    for (Arm arm : {Arm::vlm, Arm::baseline}) {
      CrossValidationOptions opts;
      opts.arm = arm;
      opts.eval_mode = config.eval_mode;
      if (budget) opts.budget = *budget + (arm == Arm::baseline ? config.offset : 0);
      reports.push_back(cross_validate(kept, kept_images, folds, arm == Arm::vlm ? vlm_factory : baseline_factory,
                                       config.finetune, opts)
                            .report);
    }
  }
  return reports;
}

}  // namespace mammovl
