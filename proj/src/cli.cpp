#include "mammovl/cli.hpp"

#include "mammovl/concurrency.hpp"
#include "mammovl/config.hpp"
#include "mammovl/data/extract.hpp"
#include "mammovl/data/image.hpp"
#include "mammovl/data/manifest.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/evaluation.hpp"
#include "mammovl/finetune.hpp"
#include "mammovl/log.hpp"
#include "mammovl/synthetic.hpp"
#include "mammovl/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace mammovl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCommands[] = {"extract", "preprocess", "pretrain", "finetune", "evaluate", "ablate", "synth"};

json budget_json(const std::optional<std::size_t>& b) { return b ? json(*b) : json("ALL"); }

std::optional<std::size_t> parse_budget(const json& j, const std::string& where) {
  if (j.is_string() && j.get<std::string>() == "ALL") return std::nullopt;
  if (j.is_number_unsigned() && j.get<std::size_t>() > 0) return j.get<std::size_t>();
  throw ConfigError(where + ": budget must be a positive count or \"ALL\"");
}

std::vector<std::optional<std::size_t>> parse_budget_list(const std::string& text) {
  std::vector<std::optional<std::size_t>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "ALL") {
      out.push_back(std::nullopt);
      continue;
    }
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("--budgets: bad entry '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("--budgets is empty");
  return out;
}

Resolution parse_resolution(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer() ||
      j[0].get<int>() <= 0 || j[1].get<int>() <= 0)
    throw ConfigError(where + ": resolution must be [height, width]");
  return {j[0].get<int>(), j[1].get<int>()};
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "per-scheme") return EvalMode::per_scheme;
  if (s == "mapped-from-five") return EvalMode::mapped_from_five;
  throw ConfigError("eval_mode must be per-scheme or mapped-from-five, got '" + s + "'");
}

SplitGranularity parse_granularity(const std::string& s) {
  if (s == "patient") return SplitGranularity::patient;
  if (s == "image") return SplitGranularity::image;
  throw ConfigError("granularity must be patient or image, got '" + s + "'");
}

data::CapMode parse_cap_mode(const std::string& s) {
  if (s == "patient-coherent") return data::CapMode::patient_coherent;
  if (s == "image-level") return data::CapMode::image_level;
  throw ConfigError("cap_mode must be patient-coherent or image-level, got '" + s + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw ConfigError("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

// ---------------------------------------------------------------------------
// Predictions file: one row per held-out image.

constexpr const char* kPredictionHeader = "fold,image_path,patient_id,birads,arm,budget,train_size,scheme,prediction";

struct PredictionRow {
  int fold = 0;
  std::string image_path;
  std::string patient_id;
  int birads = 0;
  std::string arm;
  std::string budget;
  std::size_t train_size = 0;
  std::string scheme;
  int prediction = 0;
};

std::vector<PredictionRow> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read predictions " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kPredictionHeader)
    throw DataValidationError(path.string() + ": header must be '" + std::string(kPredictionHeader) + "'");
  std::vector<PredictionRow> rows;
  std::vector<std::string> problems;
  for (std::size_t row = 2; std::getline(in, line); ++row) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    try {
      if (f.size() != 9) throw std::invalid_argument("expected 9 fields");
      PredictionRow r;
      r.fold = std::stoi(f[0]);
      r.image_path = f[1];
      r.patient_id = f[2];
      r.birads = std::stoi(f[3]);
      if (!BiradsLabel::valid(r.birads)) throw std::invalid_argument("birads outside 0..6");
      r.arm = f[4];
      r.budget = f[5];
      r.train_size = std::stoull(f[6]);
      r.scheme = ClassScheme::parse(f[7]).label();
      r.prediction = std::stoi(f[8]);
      if (r.fold < 0 || r.prediction < 0 || r.prediction >= ClassScheme::parse(r.scheme).num_classes)
        throw std::invalid_argument("fold or prediction out of range");
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      problems.push_back("row " + std::to_string(row) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = path.string() + ": " + std::to_string(problems.size()) + " bad row(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(problems.size(), 10); ++i) msg += "\n  " + problems[i];
    throw DataValidationError(msg);
  }
  if (rows.empty()) throw DataValidationError(path.string() + ": no predictions");
  return rows;
}

// ---------------------------------------------------------------------------

struct Context {
  json config;  // resolved snapshot
  fs::path out_dir;
  int workers = 1;
  std::uint64_t seed = 0;
  std::ostream* out = nullptr;
};

fs::path subdir(const Context& ctx, const char* name) {
  auto p = ctx.out_dir / name;
  fs::create_directories(p);
  return p;
}

void print_path(const Context& ctx, const fs::path& p) { *ctx.out << p.string() << '\n'; }

std::string budget_label(const std::optional<std::size_t>& b) { return b ? std::to_string(*b) : "ALL"; }

// ---------------------------------------------------------------------------

void cmd_extract(const Context& ctx) {
  const auto& sec = ctx.config.at("extract");
  const auto inputs = sec.at("inputs").get<std::vector<std::string>>();
  if (inputs.empty()) throw ConfigError("extract: no input documents");
  const auto& profile = data::find_profile(sec.at("profile").get<std::string>());
  std::optional<data::CommandOcr> ocr;
  if (const auto cmd = sec.at("ocr_command").get<std::string>(); !cmd.empty()) ocr.emplace(cmd);

  data::ExtractionResult all;
  for (const auto& input : inputs) {
    log::info("extracting " + input);
    data::merge_into(all, data::extract_pairs(fs::path(input), profile, ocr ? &*ocr : nullptr));
  }
  data::write_extraction(all, ctx.out_dir);
  write_json(subdir(ctx, "metrics") / "extract.json", {{"pairs", all.pairs.size()},
                                                       {"rejects", all.rejects.size()},
                                                       {"figures", all.figures},
                                                       {"captions", all.captions}});
  *ctx.out << "pairs: " << all.pairs.size() << ", rejects: " << all.rejects.size() << '\n';
  print_path(ctx, ctx.out_dir / "pairs.jsonl");
  print_path(ctx, ctx.out_dir / "rejects.jsonl");
}

void cmd_preprocess(const Context& ctx) {
  const auto& sec = ctx.config.at("preprocess");
  const fs::path manifest_path = sec.at("manifest").get<std::string>();
  if (manifest_path.empty()) throw ConfigError("preprocess: --manifest is required");
  const fs::path base = manifest_path.parent_path();
  const auto loaded = data::load_manifest(manifest_path);

  auto filtered = data::filter_views(loaded);
  auto& m = filtered.manifest;
  const std::size_t missing = data::mark_missing_paths(m, base);
  if (missing > 0) {
    log::warn(std::to_string(missing) + " image(s) not found; dropped");
    std::erase_if(m.samples, [](const data::LabeledSample& s) { return s.missing; });
  }
  const std::size_t before_cap = m.samples.size();
  auto capped = data::cap_class_counts(m, sec.at("cap").get<std::size_t>(), sec.at("cap_labels").get<std::vector<int>>(),
                                       ctx.seed, parse_cap_mode(sec.at("cap_mode").get<std::string>()));

  std::optional<data::CommandDetector> detector;
  if (const auto cmd = sec.at("detector_command").get<std::string>(); !cmd.empty()) detector.emplace(cmd);
  std::optional<Resolution> target;
  if (!sec.at("resolution").empty()) target = parse_resolution(sec.at("resolution"), "preprocess");

  const auto images_dir = subdir(ctx, "images");
  std::vector<data::CropSource> sources(capped.samples.size());
  std::vector<char> blank(capped.samples.size(), 0);
  parallel_for(capped.samples.size(), ctx.workers, [&](std::size_t i) {
    auto& s = capped.samples[i];
    const auto cropped = data::crop_breast(data::read_png(base / s.image_path), detector ? &*detector : nullptr);
    sources[i] = cropped.source;
    blank[i] = cropped.blank;
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    if (target) {
      const auto t = data::resize_letterbox(cropped.image, *target);
      data::write_png(data::GrayImage{t.width, t.height, t.pixels}, images_dir / name);
    } else {
      data::write_png(cropped.image, images_dir / name);
    }
    s.image_path = std::string("images/") + name;
  });
  const auto out_manifest = ctx.out_dir / "manifest.csv";
  data::write_manifest(capped, out_manifest);

  json removed = json::object();
  for (const auto& [view, n] : filtered.removed_by_view) removed[view] = n;
  std::map<std::string, std::size_t> by_source{{"detector", 0}, {"fallback", 0}, {"unchanged", 0}};
  for (auto s : sources)
    ++by_source[s == data::CropSource::detector ? "detector" : s == data::CropSource::fallback ? "fallback" : "unchanged"];
  json counts = json::object();
  for (const auto& [label, n] : capped.counts()) counts[std::to_string(label)] = n;
  write_json(subdir(ctx, "metrics") / "preprocess.json",
             {{"input_rows", loaded.samples.size()},
              {"removed_by_view", removed},
              {"missing", missing},
              {"removed_by_cap", before_cap - capped.samples.size()},
              {"kept", capped.samples.size()},
              {"label_counts", counts},
              {"crop_source", by_source},
              {"blank", std::count(blank.begin(), blank.end(), 1)}});
  print_path(ctx, out_manifest);
}

PretrainConfig resolve_pretrain(const json& sec, std::uint64_t seed) {
  const auto preset = sec.at("preset").get<std::string>();
  PretrainConfig base;
  if (preset == "desk") base = synth::desk_pretrain_config(seed);
  else if (preset != "paper") throw ConfigError("pretrain: preset must be paper or desk, got '" + preset + "'");
  auto cfg = pretrain_config_from_json(sec.at("training"), base);
  cfg.seed = seed;
  return cfg;
}

void cmd_pretrain(const Context& ctx) {
  const auto& sec = ctx.config.at("pretrain");
  const fs::path pairs_path = sec.at("pairs").get<std::string>();
  if (pairs_path.empty()) throw ConfigError("pretrain: --pairs is required");
  const auto cfg = pretrain_config_from_json(sec.at("training"));
  const auto pairs = load_pretrain_pairs(pairs_path, cfg.resolution, ctx.workers);
  log::info("pretraining on " + std::to_string(pairs.size()) + " pairs");

  PretrainOptions opts;
  opts.checkpoint_path = subdir(ctx, "checkpoints") / "best.ckpt";
  opts.workers = ctx.workers;
  opts.run_config = ctx.config;
  opts.on_epoch = [&](const ValidationRecord& v) {
    log::info("epoch " + std::to_string(v.epoch) + "/" + std::to_string(cfg.epochs) + " validation loss " +
              std::to_string(v.loss));
  };
  const auto res = pretrain(pairs, cfg, opts);
  const auto log_path = subdir(ctx, "logs") / "pretrain.jsonl";
  res.log.write(log_path);

  json epochs = json::array();
  for (const auto& v : res.log.validation) epochs.push_back({{"epoch", v.epoch}, {"loss", v.loss}});
  const auto metrics_path = subdir(ctx, "metrics") / "pretrain.json";
  write_json(metrics_path, {{"best_epoch", res.checkpoint.epoch},
                            {"best_validation_loss", res.checkpoint.validation_loss},
                            {"first_validation_loss", res.first_validation_loss},
                            {"train_pairs", res.train_pairs},
                            {"validation_pairs", res.validation_pairs},
                            {"checkpoint_sha256", res.checkpoint.sha256},
                            {"validation", epochs}});
  print_path(ctx, opts.checkpoint_path);
  print_path(ctx, log_path);
  print_path(ctx, metrics_path);
}

struct LoadedStudy {
  std::vector<data::LabeledSample> samples;
  std::vector<ImageTensor> images;
};

/// Loads the manifest and drops labels the training scheme excludes.
LoadedStudy load_study(const fs::path& manifest_path, const ClassScheme& scheme, Resolution resolution, int workers) {
  if (manifest_path.empty()) throw ConfigError("--manifest is required");
  auto m = data::load_manifest(manifest_path);
  const std::size_t before = m.samples.size();
  m = drop_excluded(m, scheme);
  if (m.samples.size() != before)
    log::info("dropped " + std::to_string(before - m.samples.size()) + " image(s) excluded under " + scheme.label());
  if (m.samples.empty()) throw DataValidationError(manifest_path.string() + ": no usable images");
  LoadedStudy s;
  s.images = load_sample_images(m.samples, manifest_path.parent_path(), resolution, workers);
  s.samples = std::move(m.samples);
  return s;
}

FinetuneConfig resolve_finetune(const json& sec, std::uint64_t seed) {
  auto cfg = finetune_config_from_json(sec.at("training"));
  cfg.seed = seed;
  return cfg;
}

void cmd_finetune(const Context& ctx) {
  const auto& sec = ctx.config.at("finetune");
  const auto cfg = finetune_config_from_json(sec.at("training"));
  const auto mode = parse_eval_mode(sec.at("eval_mode").get<std::string>());
  const auto& train_scheme = mode == EvalMode::mapped_from_five ? ClassScheme::five() : ClassScheme::parse(cfg.scheme);

  const fs::path ckpt_path = sec.at("checkpoint").get<std::string>();
  std::optional<Checkpoint> ckpt;
  Resolution resolution = parse_resolution(sec.at("resolution"), "finetune");
  TinyConvConfig vision;
  if (!ckpt_path.empty()) {
    ckpt = load_checkpoint(ckpt_path);
    resolution = pretrain_config_of(*ckpt).resolution;
  } else {
    PretrainConfig p = sec.at("preset") == "desk" ? synth::desk_pretrain_config(ctx.seed) : PretrainConfig{};
    p.resolution = resolution;
    vision = p.resolved_model().vision;
  }
  const Arm arm = ckpt ? Arm::vlm : Arm::baseline;

  const auto study = load_study(sec.at("manifest").get<std::string>(), train_scheme, resolution, ctx.workers);
  const auto folds = kfold_split(study.samples, sec.at("folds").get<int>(), ctx.seed,
                                 parse_granularity(sec.at("granularity").get<std::string>()));
  const auto ckpt_dir = subdir(ctx, "checkpoints");
  CrossValidationOptions opts;
  opts.budget = cfg.budget;
  opts.eval_mode = mode;
  opts.arm = arm;
  opts.on_fold = [&](int fold, const Classifier& clf) {
    auto c = classifier_checkpoint(clf, ctx.config);
    save_checkpoint(c, ckpt_dir / ("fold" + std::to_string(fold) + ".ckpt"));
  };
  const ClassifierFactory factory = [&](int k, std::uint64_t seed) {
    return ckpt ? attach_head(*ckpt, k, seed) : attach_head(vision, k, seed);
  };
  const auto res = cross_validate(study.samples, study.images, folds, factory, cfg, opts);

  const auto logs_dir = subdir(ctx, "logs");
  for (std::size_t f = 0; f < res.logs.size(); ++f)
    res.logs[f].write(logs_dir / ("finetune_fold" + std::to_string(f) + ".jsonl"));

  std::vector<FoldPrediction> preds = res.predictions;
  std::stable_sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) { return a.sample < b.sample; });
  std::ostringstream csv;
  csv << kPredictionHeader << '\n';
  for (const auto& p : preds) {
    const auto& s = study.samples[p.sample];
    csv << p.fold << ',' << csv_field(s.image_path) << ',' << csv_field(s.patient_id) << ',' << s.birads.value() << ','
        << arm_name(arm) << ',' << budget_label(cfg.budget) << ',' << res.report.folds[p.fold].train_size << ','
        << train_scheme.label() << ',' << p.prediction << '\n';
  }
  const auto pred_path = ctx.out_dir / "predictions.csv";
  write_text(pred_path, csv.str());
  const auto metrics_path = subdir(ctx, "metrics") / "finetune.json";
  write_json(metrics_path, to_json(res.report));
  const auto table_path = subdir(ctx, "tables") / "finetune.txt";
  write_text(table_path, render_table(std::span(&res.report, 1)));
  print_path(ctx, pred_path);
  print_path(ctx, metrics_path);
  print_path(ctx, table_path);
}

void cmd_evaluate(const Context& ctx) {
  const auto& sec = ctx.config.at("evaluate");
  const fs::path pred_path = sec.at("predictions").get<std::string>();
  if (pred_path.empty()) throw ConfigError("evaluate: --predictions is required");
  const auto rows = read_predictions(pred_path);
  const auto& source = ClassScheme::parse(rows.front().scheme);
  for (const auto& r : rows)
    if (r.scheme != source.label()) throw DataValidationError(pred_path.string() + ": mixed prediction schemes");
  const auto requested = sec.at("scheme").get<std::string>();
  const auto& scheme = requested.empty() ? source : ClassScheme::parse(requested);
  const bool collapse = source.name == SchemeName::five && scheme.name == SchemeName::three;
  if (source.name == SchemeName::three && scheme.name == SchemeName::five)
    throw ConfigError("evaluate: THREE-class predictions cannot be scored under FIVE");

  // (arm, budget) -> fold -> (predictions, truths, train size)
  struct FoldData {
    std::vector<int> preds, truths;
    std::size_t train_size = 0;
  };
  std::map<std::pair<std::string, std::string>, std::map<int, FoldData>> groups;
  std::size_t skipped = 0;
  for (const auto& r : rows) {
    const auto truth = map_label(BiradsLabel::from_int(r.birads), scheme);
    if (!truth) {
      ++skipped;
      continue;
    }
    auto& fd = groups[{r.arm, r.budget}][r.fold];
    fd.preds.push_back(collapse ? five_to_three(r.prediction) : r.prediction);
    fd.truths.push_back(*truth);
    fd.train_size = r.train_size;
  }
  if (skipped > 0) log::info(std::to_string(skipped) + " row(s) excluded under " + scheme.label());
  if (groups.empty()) throw DataValidationError(pred_path.string() + ": nothing left to score");

  std::vector<MetricReport> reports;
  for (const auto& [key, folds] : groups) {
    MetricReport rep;
    rep.scheme = scheme.label();
    if (key.first == arm_name(Arm::vlm)) rep.arm = Arm::vlm;
    else if (key.first == arm_name(Arm::baseline)) rep.arm = Arm::baseline;
    else throw DataValidationError(pred_path.string() + ": unknown arm '" + key.first + "'");
    rep.budget = key.second == "ALL" ? std::nullopt : parse_budget(json::parse(key.second, nullptr, false), "evaluate");
    for (const auto& [fold, fd] : folds) {
      auto fm = fold_metrics(fold, fd.preds, fd.truths, scheme.num_classes);
      fm.train_size = fd.train_size;
      fm.test_size = fd.preds.size();
      rep.train_images = std::max(rep.train_images, fd.train_size);
      rep.folds.push_back(std::move(fm));
    }
    summarize(rep);
    reports.push_back(std::move(rep));
  }
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  const auto metrics_path = subdir(ctx, "metrics") / "evaluation.json";
  write_json(metrics_path, arr);
  const auto tables = subdir(ctx, "tables");
  write_text(tables / "evaluation.txt", render_table(reports));
  write_text(tables / "evaluation.csv", render_csv(reports));
  print_path(ctx, metrics_path);
  print_path(ctx, tables / "evaluation.txt");
  print_path(ctx, tables / "evaluation.csv");
}

void cmd_ablate(const Context& ctx) {
  const auto& sec = ctx.config.at("ablate");
  AblationConfig ac;
  for (const auto& b : sec.at("budgets")) ac.budgets.push_back(parse_budget(b, "ablate"));
  ac.offset = sec.at("offset").get<std::size_t>();
  ac.checkpoint = sec.at("checkpoint").get<std::string>();
  ac.baseline_checkpoint = sec.at("baseline_checkpoint").get<std::string>();
  ac.folds = sec.at("folds").get<int>();
  ac.eval_mode = parse_eval_mode(sec.at("eval_mode").get<std::string>());
  ac.granularity = parse_granularity(sec.at("granularity").get<std::string>());
  ac.finetune = finetune_config_from_json(sec.at("training"));
  if (ac.checkpoint.empty()) throw ConfigError("ablate: --checkpoint is required");

  const auto resolution = pretrain_config_of(load_checkpoint(ac.checkpoint)).resolution;
  const auto& train_scheme =
      ac.eval_mode == EvalMode::mapped_from_five ? ClassScheme::five() : ClassScheme::parse(ac.finetune.scheme);
  const auto study = load_study(sec.at("manifest").get<std::string>(), train_scheme, resolution, ctx.workers);
  const auto reports = run_ablation(study.samples, study.images, ac);

  json arr = json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  const auto metrics_path = subdir(ctx, "metrics") / "ablation.json";
  write_json(metrics_path, arr);
  const auto tables = subdir(ctx, "tables");
  write_text(tables / "ablation.txt", render_table(reports));
  write_text(tables / "ablation.csv", render_csv(reports));
  write_text(tables / "learning_curve.csv", learning_curve_csv(reports));
  print_path(ctx, metrics_path);
  print_path(ctx, tables / "ablation.txt");
  print_path(ctx, tables / "ablation.csv");
  print_path(ctx, tables / "learning_curve.csv");
}

void cmd_synth(const Context& ctx) {
  const auto& sec = ctx.config.at("synth");
  const int rounds = sec.at("rounds").get<int>();
  const int patients = sec.at("patients").get<int>();
  if (rounds <= 0 || patients <= 0) throw ConfigError("synth: rounds and patients must be positive");
  const auto atlas = ctx.out_dir / "atlas.pdf";
  synth::write_atlas(synth::make_pairs(rounds, ctx.seed), atlas);
  synth::write_labeled_study(ctx.out_dir / "study", patients, derive_seed(ctx.seed, "study"));
  print_path(ctx, atlas);
  print_path(ctx, ctx.out_dir / "study" / "manifest.csv");
}

// ---------------------------------------------------------------------------

/// Command-line values; unset optionals leave the config untouched.
struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
  std::optional<int> workers;
  std::optional<std::string> log_level;

  std::vector<std::string> inputs;
  std::optional<std::string> profile, ocr_command;

  std::optional<std::string> manifest, detector_command, cap_mode;
  std::optional<std::size_t> cap;

  std::optional<std::string> pairs, preset;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr, temperature, lambda;

  std::optional<std::string> checkpoint, baseline_checkpoint, scheme, budget, budgets, eval_mode, granularity;
  std::optional<int> folds;
  std::optional<std::size_t> offset;
  std::optional<std::string> predictions;

  std::optional<int> rounds, patients;
};

template <typename T>
void set_if(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

json flag_overrides(const std::string& cmd, const Flags& f) {
  json j = json::object();
  set_if(j, "seed", f.seed);
  set_if(j, "output_dir", f.out);
  set_if(j, "num_workers", f.workers);
  set_if(j, "log_level", f.log_level);
  json sec = json::object();
  json training = json::object();
  if (cmd == "extract") {
    if (!f.inputs.empty()) sec["inputs"] = f.inputs;
    set_if(sec, "profile", f.profile);
    set_if(sec, "ocr_command", f.ocr_command);
  } else if (cmd == "preprocess") {
    set_if(sec, "manifest", f.manifest);
    set_if(sec, "detector_command", f.detector_command);
    set_if(sec, "cap_mode", f.cap_mode);
    set_if(sec, "cap", f.cap);
  } else if (cmd == "pretrain") {
    set_if(sec, "pairs", f.pairs);
    set_if(sec, "preset", f.preset);
    set_if(training, "epochs", f.epochs);
    set_if(training, "batch_size", f.batch_size);
    set_if(training, "learning_rate", f.lr);
    set_if(training, "temperature", f.temperature);
    set_if(training, "lambda", f.lambda);
  } else if (cmd == "finetune" || cmd == "ablate") {
    set_if(sec, "manifest", f.manifest);
    set_if(sec, "checkpoint", f.checkpoint);
    set_if(sec, "folds", f.folds);
    set_if(sec, "eval_mode", f.eval_mode);
    set_if(sec, "granularity", f.granularity);
    set_if(training, "epochs", f.epochs);
    set_if(training, "batch_size", f.batch_size);
    set_if(training, "learning_rate", f.lr);
    set_if(training, "scheme", f.scheme);
    if (cmd == "finetune") {
      set_if(sec, "preset", f.preset);
      if (f.budget) training["budget"] = *f.budget == "ALL" ? json("ALL") : json(parse_budget_list(*f.budget).at(0).value());
    } else {
      set_if(sec, "baseline_checkpoint", f.baseline_checkpoint);
      set_if(sec, "offset", f.offset);
      if (f.budgets) {
        json arr = json::array();
        for (const auto& b : parse_budget_list(*f.budgets)) arr.push_back(budget_json(b));
        sec["budgets"] = arr;
      }
    }
  } else if (cmd == "evaluate") {
    set_if(sec, "predictions", f.predictions);
    set_if(sec, "scheme", f.scheme);
  } else if (cmd == "synth") {
    set_if(sec, "rounds", f.rounds);
    set_if(sec, "patients", f.patients);
  }
  if (!training.empty()) sec["training"] = training;
  if (!sec.empty()) j[cmd] = sec;
  return j;
}

/// Overlays `layer` onto `merged`: "training" objects are collected into
/// `training` (checked later by the owning module), the rest goes through
/// strict_merge.
void apply_layer(json& merged, std::map<std::string, json>& training, json layer, const std::string& origin) {
  if (!layer.is_object()) throw ConfigError(origin + ": run config must be a JSON object");
  for (auto& [name, sec] : layer.items()) {
    if (!sec.is_object() || !sec.contains("training")) continue;
    auto& t = sec["training"];
    if (!t.is_object()) throw ConfigError(origin + ": " + name + ".training must be an object");
    auto& acc = training[name];
    if (acc.is_null()) acc = json::object();
    acc.update(t);
    sec.erase("training");
  }
  try {
    merged = strict_merge(merged, layer);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

/// Resolves defaults, the config file and flags into the snapshot for `cmd`.
json resolve(const std::string& cmd, const Flags& flags) {
  json merged = default_run_config();
  std::map<std::string, json> training;
  if (!flags.config_path.empty()) apply_layer(merged, training, read_json_file(flags.config_path), flags.config_path);
  apply_layer(merged, training, flag_overrides(cmd, flags), "command line");

  const auto seed = merged.at("seed").get<std::uint64_t>();
  const json t = training.count(cmd) ? training[cmd] : json::object();
  json snapshot = {{"command", cmd},
                   {"seed", merged["seed"]},
                   {"output_dir", merged["output_dir"]},
                   {"num_workers", merged["num_workers"]},
                   {"log_level", merged["log_level"]},
                   {cmd, merged[cmd]}};
  if (cmd == "pretrain") {
    snapshot[cmd]["training"] = to_json(resolve_pretrain(json{{"preset", merged[cmd]["preset"]}, {"training", t}}, seed));
  } else if (cmd == "finetune" || cmd == "ablate") {
    snapshot[cmd]["training"] = to_json(resolve_finetune(json{{"training", t}}, seed));
  } else if (!t.empty()) {
    throw ConfigError(cmd + " takes no training section");
  }
  return snapshot;
}

int run_command(const std::string& cmd, const Flags& flags, std::ostream& out) {
  const json config = resolve(cmd, flags);
  log::set_level(log::parse_level(config.at("log_level").get<std::string>()));
  Context ctx;
  ctx.config = config;
  ctx.out_dir = config.at("output_dir").get<std::string>();
  ctx.workers = config.at("num_workers").get<int>();
  ctx.seed = config.at("seed").get<std::uint64_t>();
  ctx.out = &out;
  if (ctx.out_dir.empty()) throw ConfigError("--out is required");
  if (ctx.workers < 1) throw ConfigError("--workers must be at least 1");

  const auto snapshot_path = ctx.out_dir / "config.json";
  if (fs::exists(snapshot_path) && !flags.force)
    throw ConfigError(ctx.out_dir.string() + " already holds a run; pass --force to overwrite");
  fs::create_directories(ctx.out_dir);
  write_json(snapshot_path, config);

  if (cmd == "extract") cmd_extract(ctx);
  else if (cmd == "preprocess") cmd_preprocess(ctx);
  else if (cmd == "pretrain") cmd_pretrain(ctx);
  else if (cmd == "finetune") cmd_finetune(ctx);
  else if (cmd == "evaluate") cmd_evaluate(ctx);
  else if (cmd == "ablate") cmd_ablate(ctx);
  else if (cmd == "synth") cmd_synth(ctx);
  return exit_code::ok;
}

}  // namespace

json default_run_config() {
  return {
      {"seed", 0},
      {"output_dir", ""},
      {"num_workers", 1},
      {"log_level", "info"},
      {"extract", {{"inputs", json::array()}, {"profile", "default"}, {"ocr_command", ""}}},
      {"preprocess",
       {{"manifest", ""},
        {"cap", 25000},
        {"cap_labels", {1, 2}},
        {"cap_mode", "patient-coherent"},
        {"detector_command", ""},
        {"resolution", json::array()}}},
      {"pretrain", {{"pairs", ""}, {"preset", "paper"}}},
      {"finetune",
       {{"manifest", ""},
        {"checkpoint", ""},
        {"preset", "paper"},
        {"resolution", {1024, 768}},
        {"folds", 4},
        {"granularity", "patient"},
        {"eval_mode", "per-scheme"}}},
      {"evaluate", {{"predictions", ""}, {"scheme", ""}}},
      {"ablate",
       {{"manifest", ""},
        {"checkpoint", ""},
        {"baseline_checkpoint", ""},
        {"budgets", {64, 1000, 5000, 10000, "ALL"}},
        {"offset", 2000},
        {"folds", 4},
        {"granularity", "patient"},
        {"eval_mode", "per-scheme"}}},
      {"synth", {{"rounds", 8}, {"patients", 64}}},
  };
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision-language pretraining and BI-RADS fine-tuning for mammography", "mammovl"};
  app.require_subcommand(1);
  Flags f;

  auto add_globals = [&](CLI::App* a) {
    a->add_option("--config", f.config_path, "JSON run config; flags override its values");
    a->add_option("--seed", f.seed, "Master seed");
    a->add_option("--out", f.out, "Output directory");
    a->add_flag("--force", f.force, "Overwrite an existing run in --out");
    a->add_option("--workers", f.workers, "Worker threads");
    a->add_option("--log-level", f.log_level, "debug, info, warn, error or off");
  };

  auto* extract = app.add_subcommand("extract", "Mine figure-caption pairs from atlas PDFs");
  extract->add_option("inputs", f.inputs, "Atlas PDF files");
  extract->add_option("--profile", f.profile, "Layout profile");
  extract->add_option("--ocr-command", f.ocr_command, "OCR program for rasterized captions");

  auto* preprocess = app.add_subcommand("preprocess", "Filter, cap and crop a labeled manifest");
  preprocess->add_option("--manifest", f.manifest, "Manifest CSV or JSONL");
  preprocess->add_option("--cap", f.cap, "Per-class image cap");
  preprocess->add_option("--cap-mode", f.cap_mode, "patient-coherent or image-level");
  preprocess->add_option("--detector-command", f.detector_command, "Breast detector program");

  auto* pretrain = app.add_subcommand("pretrain", "Contrastive + masked-language-model pretraining");
  pretrain->add_option("--pairs", f.pairs, "pairs.jsonl from extract");
  pretrain->add_option("--preset", f.preset, "paper or desk");
  pretrain->add_option("--epochs", f.epochs);
  pretrain->add_option("--batch-size", f.batch_size);
  pretrain->add_option("--lr", f.lr, "Learning rate");
  pretrain->add_option("--temperature", f.temperature);
  pretrain->add_option("--lambda", f.lambda, "MLM loss weight");

  auto* finetune = app.add_subcommand("finetune", "k-fold fine-tuning of a BI-RADS classifier");
  auto* ablate = app.add_subcommand("ablate", "Sample-efficiency comparison of VLM and baseline arms");
  for (auto* a : {finetune, ablate}) {
    a->add_option("--manifest", f.manifest, "Labeled manifest");
    a->add_option("--checkpoint", f.checkpoint, "Pretrained checkpoint");
    a->add_option("--scheme", f.scheme, "FIVE or THREE");
    a->add_option("--folds", f.folds);
    a->add_option("--eval-mode", f.eval_mode, "per-scheme or mapped-from-five");
    a->add_option("--granularity", f.granularity, "patient or image");
    a->add_option("--epochs", f.epochs);
    a->add_option("--batch-size", f.batch_size);
    a->add_option("--lr", f.lr, "Learning rate");
  }
  finetune->add_option("--budget", f.budget, "Training images per fold, or ALL");
  finetune->add_option("--preset", f.preset, "Backbone size without a checkpoint: paper or desk");
  ablate->add_option("--budgets", f.budgets, "Comma-separated budgets, e.g. 64,1000,ALL");
  ablate->add_option("--offset", f.offset, "Extra images for the baseline arm");
  ablate->add_option("--baseline-checkpoint", f.baseline_checkpoint, "Baseline backbone; random init when absent");

  auto* evaluate = app.add_subcommand("evaluate", "Macro-F1 reports from a predictions file");
  evaluate->add_option("--predictions", f.predictions, "predictions.csv from finetune");
  evaluate->add_option("--scheme", f.scheme, "FIVE or THREE (default: the predictions' scheme)");

  auto* synth = app.add_subcommand("synth", "Write a synthetic atlas PDF and labeled study");
  synth->add_option("--rounds", f.rounds, "Atlas size in rounds of 32 pairs");
  synth->add_option("--patients", f.patients, "Patients in the labeled study");

  for (const char* name : kCommands) add_globals(app.get_subcommand(name));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? exit_code::ok : exit_code::usage;
  }

  std::string cmd;
  for (const char* name : kCommands)
    if (app.got_subcommand(name)) cmd = name;

  try {
    return run_command(cmd, f, out);
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << '\n';
    return exit_code::numerical;
  } catch (const DataValidationError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const ContractError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const ExtractionError& e) {
    err << "extraction error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::internal;
  }
}

}  // namespace mammovl::cli
