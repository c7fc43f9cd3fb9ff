#pragma once

// Procedural image-caption corpus for desk-scale runs: 128x96 canvases with
// one of eight drawn findings in one of four quadrants, captioned from a
// fixed 64-word vocabulary.

#include "mammovl/data/image.hpp"
#include "mammovl/data/manifest.hpp"
#include "mammovl/rng.hpp"
#include "mammovl/text.hpp"
#include "mammovl/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mammovl::synth {

inline constexpr int kMotifs = 8;
inline constexpr int kQuadrants = 4;
inline constexpr int kHeight = 128;
inline constexpr int kWidth = 96;

enum class Motif {
  round_mass,
  oval_mass,
  spiculated_mass,
  clustered_calcifications,
  linear_calcifications,
  architectural_distortion,
  focal_asymmetry,
  rim_calcification,
};

/// "round mass", "upper outer", ...
std::string_view motif_phrase(int motif);
std::string_view quadrant_phrase(int quadrant);

/// BI-RADS label used when motifs stand in for findings in a labeled study.
int motif_birads(int motif);

/// Every word a caption can contain (64 entries, sorted).
std::vector<std::string> caption_words();
Vocabulary caption_vocabulary();

/// Breast-shaped tissue with the motif drawn at a jittered position inside
/// the quadrant. Quadrants: 0 upper outer, 1 upper inner, 2 lower outer,
/// 3 lower inner; "inner" is the chest-wall side (x = 0).
data::GrayImage render(int motif, int quadrant, Rng& rng);

/// Templated sentence naming the motif and the quadrant.
std::string caption(int motif, int quadrant, Rng& rng);

struct SynthPair {
  std::string id;
  int motif = 0;
  int quadrant = 0;
  data::GrayImage image;
  std::string caption;
};

/// rounds x 32 pairs; every round covers each (motif, quadrant) once.
std::vector<SynthPair> make_pairs(int rounds, std::uint64_t seed);

struct Corpus {
  std::vector<SynthPair> train;     // 224 pairs
  std::vector<SynthPair> held_out;  // one full round: 32 distinct combinations
};

/// The 256-pair corpus, last round held out.
Corpus make_corpus(std::uint64_t seed);

struct LabeledImage {
  data::GrayImage image;
  int motif = 0;
  int quadrant = 0;
};

/// Class-balanced motif classification set, quadrants drawn at random.
std::vector<LabeledImage> make_motif_set(int per_class, std::uint64_t seed);

/// Lays the pairs out as an atlas PDF, three figures per page, each with a
/// "Figure N." caption line below it.
std::string atlas_pdf(const std::vector<SynthPair>& pairs);
void write_atlas(const std::vector<SynthPair>& pairs, const std::filesystem::path& path);

/// Writes PNGs for `patients` patients x 4 standard views under
/// dir/images plus dir/manifest.csv. Each patient carries one motif, so all
/// of their views share a BI-RADS label.
data::Manifest write_labeled_study(const std::filesystem::path& dir, int patients, std::uint64_t seed);

/// Letterboxes to `resolution` (the identity at 128x96). Pairs are their own
/// validation groups.
std::vector<PretrainPair> to_pretrain_pairs(const std::vector<SynthPair>& pairs,
                                            Resolution resolution = {kHeight, kWidth});

/// Tiny-encoder settings used for the synthetic corpus.
PretrainConfig desk_pretrain_config(std::uint64_t seed);

}  // namespace mammovl::synth
