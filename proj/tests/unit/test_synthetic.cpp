#include "mammovl/data/extract.hpp"
#include "mammovl/data/pdf.hpp"
#include "mammovl/synthetic.hpp"

#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace mammovl;
namespace fs = std::filesystem;

TEST_CASE("caption vocabulary has exactly 64 words and covers every caption") {
  const auto words = synth::caption_words();
  CHECK(words.size() == 64);
  const std::set<std::string> allowed(words.begin(), words.end());
  CHECK(allowed.size() == 64);
  std::set<std::string> used;
  Rng rng(3);
  for (int i = 0; i < 4000; ++i) {
    const auto text = synth::caption(i % synth::kMotifs, (i / 8) % synth::kQuadrants, rng);
    for (const auto& w : tokenize_words(text)) {
      REQUIRE(allowed.count(w) == 1);
      used.insert(w);
    }
    REQUIRE(tokenize_words(text).size() <= 15);
  }
  CHECK(used == allowed);
  CHECK(synth::caption_vocabulary().size() == 64 + Vocabulary::kNumSpecial);
}

TEST_CASE("corpus layout: 224 + 32 with one held-out pair per combination") {
  const auto c = synth::make_corpus(1);
  CHECK(c.train.size() == 224);
  REQUIRE(c.held_out.size() == 32);
  std::set<std::pair<int, int>> combos;
  for (const auto& p : c.held_out) combos.insert({p.motif, p.quadrant});
  CHECK(combos.size() == 32);
  std::map<std::pair<int, int>, int> train_counts;
  for (const auto& p : c.train) ++train_counts[{p.motif, p.quadrant}];
  for (const auto& [k, n] : train_counts) CHECK(n == 7);
  for (const auto& p : c.train) {
    CHECK(p.image.width == synth::kWidth);
    CHECK(p.image.height == synth::kHeight);
    CHECK(p.caption.find(std::string(synth::motif_phrase(p.motif))) != std::string::npos);
  }
}

TEST_CASE("generator is deterministic per seed") {
  const auto a = synth::make_pairs(1, 9);
  const auto b = synth::make_pairs(1, 9);
  const auto c = synth::make_pairs(1, 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].caption == b[i].caption);
  }
  CHECK_FALSE(a[0].image == c[0].image);
}

TEST_CASE("rendered pixels stay in range and the motif lands in its quadrant") {
  Rng rng(4);
  for (int m = 0; m < synth::kMotifs; ++m)
    for (int q = 0; q < synth::kQuadrants; ++q) {
      const auto img = synth::render(m, q, rng);
      double top = 0, bottom = 0;
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
          const float v = img.at(x, y);
          REQUIRE(v >= 0.0f);
          REQUIRE(v <= 1.0f);
          if (v > 0.45f) (y < img.height / 2 ? top : bottom) += v;
        }
      if (q < 2) CHECK(top > bottom);
      else CHECK(bottom > top);
    }
}

TEST_CASE("atlas PDF extracts back to the same pairs") {
  const auto pairs = synth::make_pairs(1, 2);
  const std::vector<synth::SynthPair> first(pairs.begin(), pairs.begin() + 7);
  const auto doc = pdf::Document::parse(synth::atlas_pdf(first));
  CHECK(doc.page_count() == 3);
  const auto r = data::extract_pairs(doc, "synthetic-atlas", data::find_profile("default"));
  CHECK(r.rejects.empty());
  REQUIRE(r.pairs.size() == 7);
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(r.pairs[i].caption == first[i].caption);
    CHECK(data::to_gray8(r.pairs[i].figure.image) == data::to_gray8(first[i].image));
  }
}

TEST_CASE("labeled study writes PNGs and a loadable manifest") {
  const fs::path dir = fs::temp_directory_path() / "mammovl-test-study";
  fs::remove_all(dir);
  const auto m = synth::write_labeled_study(dir, 5, 0);
  CHECK(m.samples.size() == 20);
  const auto loaded = data::load_manifest(dir / "manifest.csv");
  CHECK(loaded == m);
  CHECK(fs::exists(dir / m.samples[3].image_path));
}
