#include "mammovl/data/manifest.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/rng.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace mammovl;
using namespace mammovl::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mammovl-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

LabeledSample sample(std::string path, std::string patient, std::string view, int birads) {
  return {std::move(path), std::move(patient), std::move(view), BiradsLabel::from_int(birads), std::nullopt, "fixture"};
}

std::string random_text(Rng& rng) {
  static const std::string alphabet = "abcXYZ019 _-.,\"/";
  std::string s;
  const int n = 1 + rng.below_int(12);
  for (int i = 0; i < n; ++i) s.push_back(alphabet[rng.below(alphabet.size())]);
  return s;
}

}  // namespace

TEST_CASE("load_manifest reads a valid five-row file") {
  const std::string csv =
      "image_path,patient_id,view,birads,density,dataset\n"
      "a.png,p1,LCC,1,2,embed\n"
      "b.png,p1,LMLO,1,2,embed\n"
      "c.png,p2,RCC,4,,embed\n"
      "d.png,p2,RMLO,0,3,embed\n"
      "e.png,p3,LCC,5,,embed\n";
  const Manifest m = parse_manifest_csv(csv, "five");
  REQUIRE(m.samples.size() == 5);
  CHECK(m.samples[2].view == "RCC");
  CHECK(m.samples[2].birads.value() == 4);
  CHECK_FALSE(m.samples[2].density.has_value());
  CHECK(m.samples[0].density == 2);
  CHECK(m.counts().at(1) == 2);
}

TEST_CASE("load_manifest collects every bad row with its number") {
  const std::string csv =
      "image_path,patient_id,view,birads,density,dataset\n"
      "a.png,p1,LCC,9,,x\n"
      "b.png,p1,TOP,1,,x\n"
      "a.png,p2,RCC,1,,x\n"
      "c.png,p3,RCC,2,7,x\n";
  try {
    parse_manifest_csv(csv, "bad");
    FAIL("expected a validation error");
  } catch (const DataValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4 invalid row(s)") != std::string::npos);
    CHECK(msg.find("row 1: invalid BI-RADS value '9'") != std::string::npos);
    CHECK(msg.find("row 2: unknown view 'TOP'") != std::string::npos);
    CHECK(msg.find("row 3: duplicate image_path") != std::string::npos);
    CHECK(msg.find("row 4: invalid density") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_manifest_csv("path,patient\n", "x"), DataValidationError);
}

TEST_CASE("write then load gives back the same manifest") {
  const fs::path dir = temp_dir("manifest-roundtrip");
  Manifest m;
  m.name = "rt";
  m.samples = {sample("img/a,1.png", "p \"1\"", "LCC", 2), sample("img/b.png", "p2", "RXCCL", 6)};
  m.samples[1].density = 4;
  write_manifest(m, dir / "m.csv");
  const Manifest back = load_manifest(dir / "m.csv");
  CHECK(back == m);
  CHECK(back.name == "rt");
  CHECK(fs::exists(dir / "m.csv.meta.json"));
}

TEST_CASE("stored counts are checked on load") {
  const fs::path dir = temp_dir("manifest-counts");
  Manifest m;
  m.samples = {sample("a.png", "p1", "LCC", 1)};
  write_manifest(m, dir / "m.csv");
  std::ofstream(dir / "m.csv", std::ios::app) << "b.png,p1,LMLO,1,,x\n";
  CHECK_THROWS_AS(load_manifest(dir / "m.csv"), DataValidationError);
}

TEST_CASE("JSON-lines manifests load through the alternate reader") {
  const fs::path dir = temp_dir("manifest-jsonl");
  std::ofstream(dir / "m.jsonl")
      << R"({"image_path":"a.png","patient_id":"p1","view":"LCC","birads":2,"density":null,"dataset":"t"})" << '\n'
      << R"({"image_path":"b.png","patient_id":"p1","view":"LMLO","birads":0,"density":3,"dataset":"t"})" << '\n';
  const Manifest m = load_manifest(dir / "m.jsonl");
  REQUIRE(m.samples.size() == 2);
  CHECK(m.samples[1].density == 3);
  std::ofstream(dir / "bad.jsonl") << R"({"image_path":"a.png","patient_id":"p1","view":"LCC","birads":7})" << '\n';
  CHECK_THROWS_AS(load_manifest(dir / "bad.jsonl"), DataValidationError);
}

TEST_CASE("manifest round trip holds for randomized manifests") {
  Rng rng(42);
  const std::vector<std::string> views{"LCC", "LMLO", "RCC", "RMLO", "LML", "RXCCL"};
  for (int trial = 0; trial < 1000; ++trial) {
    Manifest m;
    const int n = rng.below_int(8);
    for (int i = 0; i < n; ++i) {
      LabeledSample s = sample(std::to_string(i) + random_text(rng), random_text(rng),
                               views[rng.below(views.size())], rng.below_int(7));
      if (rng.uniform() < 0.5) s.density = 1 + rng.below_int(4);
      s.dataset = rng.uniform() < 0.3 ? std::string() : random_text(rng);
      m.samples.push_back(s);
    }
    const Manifest back = parse_manifest_csv(format_manifest_csv(m));
    REQUIRE(back == m);
  }
}

TEST_CASE("mark_missing_paths flags absent images") {
  const fs::path dir = temp_dir("manifest-missing");
  std::ofstream(dir / "here.png") << "x";
  Manifest m;
  m.samples = {sample("here.png", "p1", "LCC", 1), sample("gone.png", "p1", "LMLO", 1)};
  CHECK(mark_missing_paths(m, dir) == 1);
  CHECK_FALSE(m.samples[0].missing);
  CHECK(m.samples[1].missing);
}

TEST_CASE("filter_views keeps only the four standard views") {
  Manifest m;
  m.samples = {sample("a", "p1", "LCC", 1), sample("b", "p1", "LMLO", 1), sample("c", "p2", "RCC", 2),
               sample("d", "p2", "LLM", 2)};
  const auto r = filter_views(m);
  CHECK(r.manifest.samples.size() == 3);
  CHECK(r.removed == 1);
  CHECK(r.removed_by_view.at("LLM") == 1);
  m.samples.pop_back();
  CHECK(filter_views(m).manifest == m);
  CHECK(filter_views(Manifest{}).manifest.samples.empty());
}

TEST_CASE("cap_class_counts trims capped labels to exactly the cap") {
  Manifest m;
  for (int i = 0; i < 3000; ++i) m.samples.push_back(sample("one" + std::to_string(i), "p" + std::to_string(i / 4), "LCC", 1));
  for (int i = 0; i < 700; ++i) m.samples.push_back(sample("four" + std::to_string(i), "q" + std::to_string(i), "RCC", 4));
  for (auto mode : {CapMode::patient_coherent, CapMode::image_level}) {
    const Manifest capped = cap_class_counts(m, 2500, {1, 2}, 7, mode);
    CHECK(capped.counts().at(1) == 2500);
    CHECK(capped.counts().at(4) == 700);
    // order-stable and never invents samples
    std::size_t j = 0;
    for (const auto& s : capped.samples) {
      while (j < m.samples.size() && !(m.samples[j] == s)) ++j;
      REQUIRE(j < m.samples.size());
    }
    const Manifest again = cap_class_counts(m, 2500, {1, 2}, 7, mode);
    CHECK(again == capped);
  }
  // patient-coherent: all retained patients of label 1 are whole (4 images each)
  const Manifest pc = cap_class_counts(m, 2500, {1, 2}, 7, CapMode::patient_coherent);
  std::map<std::string, int> per_patient;
  for (const auto& s : pc.samples)
    if (s.birads.value() == 1) ++per_patient[s.patient_id];
  for (const auto& [p, n] : per_patient) CHECK(n == 4);
}

TEST_CASE("cap_class_counts leaves counts at or below the cap untouched") {
  Manifest m;
  for (int i = 0; i < 10; ++i) m.samples.push_back(sample("a" + std::to_string(i), "p", "LCC", 2));
  CHECK(cap_class_counts(m, 10) == m);
  CHECK(cap_class_counts(m, 3).samples.size() == 3);
}
