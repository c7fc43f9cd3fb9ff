#include "mammovl/cli.hpp"
#include "mammovl/rng.hpp"

#include "metric_oracle.hpp"
#include "pdf_fixtures.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = mammovl::cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mammovl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Small desk-scale run shared by the fine-tuning cases: a 32-pair atlas, a
// 16-patient study and a one-epoch checkpoint.
struct DeskRun {
  fs::path root, manifest, checkpoint;
};

const DeskRun& desk_run() {
  static const DeskRun run_once = [] {
    DeskRun d;
    d.root = scratch("desk");
    REQUIRE(run({"synth", "--rounds", "1", "--patients", "16", "--seed", "3", "--out", (d.root / "syn").string()})
                .code == 0);
    REQUIRE(run({"extract", (d.root / "syn" / "atlas.pdf").string(), "--out", (d.root / "ex").string()}).code == 0);
    spit(d.root / "pretrain.json",
         R"({"pretrain": {"preset": "desk", "training": {"epochs": 1, "batch_size": 8}}, "log_level": "warn"})");
    const auto r = run({"pretrain", "--config", (d.root / "pretrain.json").string(), "--pairs",
                        (d.root / "ex" / "pairs.jsonl").string(), "--out", (d.root / "pt").string()});
    REQUIRE(r.code == 0);
    d.manifest = d.root / "syn" / "study" / "manifest.csv";
    d.checkpoint = d.root / "pt" / "checkpoints" / "best.ckpt";
    return d;
  }();
  return run_once;
}

}  // namespace

TEST_CASE("extract prints the summary counts and artifact paths") {
  const auto dir = scratch("extract");
  spit(dir / "atlas.pdf", fixtures::three_pairs_one_reject());
  const auto r = run({"extract", (dir / "atlas.pdf").string(), "--out", (dir / "run").string()});
  CHECK(r.code == 0);
  std::istringstream lines(r.out);
  std::string first;
  std::getline(lines, first);
  CHECK(first == "pairs: 3, rejects: 1");
  CHECK(r.out.find((dir / "run" / "pairs.jsonl").string()) != std::string::npos);
  CHECK(fs::exists(dir / "run" / "rejects.jsonl"));
  CHECK(fs::exists(dir / "run" / "config.json"));
}

TEST_CASE("extract errors exit with the usage code") {
  const auto dir = scratch("extract_errors");
  CHECK(run({"extract", (dir / "absent.pdf").string(), "--out", (dir / "a").string()}).code == 2);

  spit(dir / "atlas.pdf", fixtures::three_pairs_one_reject());
  const auto r = run({"extract", (dir / "atlas.pdf").string(), "--profile", "nonesuch", "--out", (dir / "b").string()});
  CHECK(r.code == 2);
  for (const char* known : {"default", "side-caption", "caption-above"}) CHECK(r.err.find(known) != std::string::npos);
}

TEST_CASE("a second run into the same directory needs --force") {
  const auto dir = scratch("force");
  spit(dir / "atlas.pdf", fixtures::three_pairs_one_reject());
  const std::vector<std::string> args = {"extract", (dir / "atlas.pdf").string(), "--out", (dir / "run").string()};
  REQUIRE(run(args).code == 0);
  const auto again = run(args);
  CHECK(again.code == 2);
  CHECK(again.err.find("--force") != std::string::npos);
  auto forced = args;
  forced.push_back("--force");
  CHECK(run(forced).code == 0);
}

TEST_CASE("flags override the config file and the snapshot records the result") {
  const auto dir = scratch("precedence");
  spit(dir / "atlas.pdf", fixtures::three_pairs_one_reject());
  spit(dir / "run.json", R"({"seed": 5, "num_workers": 2, "extract": {"profile": "nonesuch"}})");
  const auto r = run({"extract", (dir / "atlas.pdf").string(), "--config", (dir / "run.json").string(), "--profile",
                      "default", "--seed", "9", "--out", (dir / "run").string()});
  REQUIRE(r.code == 0);
  const auto snap = json::parse(slurp(dir / "run" / "config.json"));
  CHECK(snap["seed"] == 9);
  CHECK(snap["num_workers"] == 2);
  CHECK(snap["extract"]["profile"] == "default");
  CHECK(snap["command"] == "extract");
}

TEST_CASE("config files are parsed strictly") {
  const auto dir = scratch("strict");
  spit(dir / "atlas.pdf", fixtures::three_pairs_one_reject());
  const auto pdf = (dir / "atlas.pdf").string();
  spit(dir / "typo.json", R"({"extract": {"profil": "default"}})");
  CHECK(run({"extract", pdf, "--config", (dir / "typo.json").string(), "--out", (dir / "a").string()}).code == 2);
  spit(dir / "type.json", R"({"seed": "seven"})");
  CHECK(run({"extract", pdf, "--config", (dir / "type.json").string(), "--out", (dir / "b").string()}).code == 2);
  spit(dir / "broken.json", R"({"seed": )");
  CHECK(run({"extract", pdf, "--config", (dir / "broken.json").string(), "--out", (dir / "c").string()}).code == 2);
  spit(dir / "training.json", R"({"pretrain": {"training": {"epoch": 3}}})");
  CHECK(run({"pretrain", "--pairs", "x.jsonl", "--config", (dir / "training.json").string(), "--out",
             (dir / "d").string()})
            .code == 2);
  CHECK(run({"extract", pdf, "--config", (dir / "absent.json").string(), "--out", (dir / "e").string()}).code == 2);
}

TEST_CASE("usage errors and help") {
  CHECK(run({}).code == 2);
  CHECK(run({"train"}).code == 2);
  CHECK(run({"extract", "--bogus"}).code == 2);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"extract", "a.pdf"}).code == 2);  // no --out
}

TEST_CASE("pretrain: zero epochs is a config error, a diverging run a numerical abort") {
  const auto& d = desk_run();
  const auto pairs = (d.root / "ex" / "pairs.jsonl").string();
  const auto cfg = (d.root / "pretrain.json").string();
  CHECK(run({"pretrain", "--pairs", pairs, "--epochs", "0", "--out", (d.root / "zero").string()}).code == 2);
  const auto r =
      run({"pretrain", "--pairs", pairs, "--config", cfg, "--lr", "1e30", "--epochs", "2", "--out", (d.root / "nan").string()});
  CHECK(r.code == 3);
  CHECK(fs::exists(d.root / "nan" / "config.json"));

  CHECK(fs::exists(d.checkpoint));
  CHECK(fs::exists(d.root / "pt" / "logs" / "pretrain.jsonl"));
  const auto snap = json::parse(slurp(d.root / "pt" / "config.json"));
  CHECK(snap["pretrain"]["training"]["epochs"] == 1);
  CHECK(snap["pretrain"]["training"]["temperature"] == 0.1);  // from the desk preset
}

TEST_CASE("finetune with a budget beyond the data is a data error") {
  const auto& d = desk_run();
  const auto r = run({"finetune", "--manifest", d.manifest.string(), "--checkpoint", d.checkpoint.string(), "--budget",
                      "100000", "--epochs", "1", "--out", (d.root / "big").string(), "--log-level", "warn"});
  CHECK(r.code == 4);
}

TEST_CASE("finetune with a tampered checkpoint is refused") {
  const auto& d = desk_run();
  const auto bad = d.root / "bad.ckpt";
  auto bytes = slurp(d.checkpoint);
  bytes[bytes.size() - 5] = static_cast<char>(bytes[bytes.size() - 5] ^ 0x10);
  spit(bad, bytes);
  CHECK(run({"finetune", "--manifest", d.manifest.string(), "--checkpoint", bad.string(), "--out",
             (d.root / "tamper").string()})
            .code == 2);
}

TEST_CASE("finetune then evaluate, reproducibly") {
  const auto& d = desk_run();
  auto finetune_into = [&](const std::string& name) {
    return run({"finetune", "--manifest", d.manifest.string(), "--checkpoint", d.checkpoint.string(), "--epochs", "2",
                "--batch-size", "16", "--lr", "1e-3", "--seed", "4", "--out", (d.root / name).string(), "--log-level",
                "warn"});
  };
  const auto a = finetune_into("ft_a");
  REQUIRE(a.code == 0);
  REQUIRE(finetune_into("ft_b").code == 0);
  CHECK(slurp(d.root / "ft_a" / "metrics" / "finetune.json") == slurp(d.root / "ft_b" / "metrics" / "finetune.json"));
  CHECK(slurp(d.root / "ft_a" / "predictions.csv") == slurp(d.root / "ft_b" / "predictions.csv"));
  for (int f = 0; f < 4; ++f) CHECK(fs::exists(d.root / "ft_a" / "checkpoints" / ("fold" + std::to_string(f) + ".ckpt")));

  // Scoring the predictions under their own scheme reproduces the
  // fine-tuning report.
  const auto e = run({"evaluate", "--predictions", (d.root / "ft_a" / "predictions.csv").string(), "--out",
                      (d.root / "ev").string()});
  REQUIRE(e.code == 0);
  const auto ft = json::parse(slurp(d.root / "ft_a" / "metrics" / "finetune.json"));
  const auto ev = json::parse(slurp(d.root / "ev" / "metrics" / "evaluation.json"));
  REQUIRE(ev.size() == 1);
  CHECK(ev[0]["macro_f1_mean"] == ft["macro_f1_mean"]);
  CHECK(ev[0]["folds"] == ft["folds"]);
}

TEST_CASE("evaluate under THREE matches the confusion-matrix oracle") {
  const auto dir = scratch("evaluate");
  // Raw BI-RADS -> THREE class, and FIVE class index -> THREE class.
  const int three_of_birads[7] = {1, 0, 0, -1, 2, 2, 2};
  const int three_of_five[5] = {0, 0, 1, 2, 2};
  mammovl::Rng rng(21);
  std::ostringstream csv;
  csv << "fold,image_path,patient_id,birads,arm,budget,train_size,scheme,prediction\n";
  std::vector<std::vector<int>> preds(3), truths(3);
  for (int i = 0; i < 150; ++i) {
    const int fold = i % 3;
    const int birads = static_cast<int>(rng.below(7));
    const int pred = static_cast<int>(rng.below(5));
    csv << fold << ",img" << i << ".png,P" << i / 2 << ',' << birads << ",VLM,64,64,FIVE," << pred << '\n';
    if (three_of_birads[birads] < 0) continue;
    preds[fold].push_back(three_of_five[pred]);
    truths[fold].push_back(three_of_birads[birads]);
  }
  spit(dir / "predictions.csv", csv.str());
  const auto r = run({"evaluate", "--predictions", (dir / "predictions.csv").string(), "--scheme", "THREE", "--out",
                      (dir / "run").string()});
  REQUIRE(r.code == 0);
  const auto rep = json::parse(slurp(dir / "run" / "metrics" / "evaluation.json")).at(0);
  CHECK(rep["scheme"] == "THREE");
  CHECK(rep["budget"] == 64);
  std::vector<double> per_fold;
  for (int f = 0; f < 3; ++f) {
    const double m = oracle::mean(oracle::confusion_f1(preds[f], truths[f], 3));
    per_fold.push_back(m);
    CHECK(rep["folds"][f]["macro_f1"].get<double>() == doctest::Approx(m).epsilon(1e-12));
  }
  const double mu = oracle::mean(per_fold);
  double var = 0.0;
  for (double v : per_fold) var += (v - mu) * (v - mu);
  CHECK(rep["macro_f1_mean"].get<double>() == doctest::Approx(mu).epsilon(1e-12));
  CHECK(rep["macro_f1_std"].get<double>() == doctest::Approx(std::sqrt(var / 3.0)).epsilon(1e-12));
}

TEST_CASE("evaluate rejects malformed predictions with row detail") {
  const auto dir = scratch("evaluate_bad");
  spit(dir / "p.csv",
       "fold,image_path,patient_id,birads,arm,budget,train_size,scheme,prediction\n"
       "0,a.png,P1,2,VLM,ALL,10,FIVE,1\n"
       "0,b.png,P1,9,VLM,ALL,10,FIVE,1\n");
  const auto r = run({"evaluate", "--predictions", (dir / "p.csv").string(), "--out", (dir / "run").string()});
  CHECK(r.code == 4);
  CHECK(r.err.find("row 3") != std::string::npos);

  spit(dir / "three.csv",
       "fold,image_path,patient_id,birads,arm,budget,train_size,scheme,prediction\n"
       "0,a.png,P1,2,VLM,ALL,10,THREE,0\n");
  CHECK(run({"evaluate", "--predictions", (dir / "three.csv").string(), "--scheme", "FIVE", "--out",
             (dir / "run2").string()})
            .code == 2);
}

TEST_CASE("ablate with offset 0 and a shared checkpoint yields identical arms") {
  const auto& d = desk_run();
  const auto r = run({"ablate", "--manifest", d.manifest.string(), "--checkpoint", d.checkpoint.string(),
                      "--baseline-checkpoint", d.checkpoint.string(), "--offset", "0", "--budgets", "16,ALL",
                      "--epochs", "1", "--batch-size", "16", "--out", (d.root / "ab").string(), "--log-level", "warn"});
  REQUIRE(r.code == 0);
  const auto reports = json::parse(slurp(d.root / "ab" / "metrics" / "ablation.json"));
  REQUIRE(reports.size() == 4);
  for (int b = 0; b < 2; ++b) {
    const auto& vlm = reports[2 * b];
    const auto& base = reports[2 * b + 1];
    CHECK(vlm["arm"] == "VLM");
    CHECK(base["arm"] == "baseline");
    CHECK(vlm["folds"] == base["folds"]);
    CHECK(vlm["macro_f1_mean"] == base["macro_f1_mean"]);
  }
  for (const char* f : {"ablation.txt", "ablation.csv", "learning_curve.csv"})
    CHECK(fs::exists(d.root / "ab" / "tables" / f));
}
