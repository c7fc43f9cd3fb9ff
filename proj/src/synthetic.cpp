#include "mammovl/synthetic.hpp"

#include "mammovl/data/pdf.hpp"
#include "mammovl/errors.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>

namespace mammovl::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr std::array<std::string_view, kMotifs> kMotifPhrases{
    "round mass",      "oval mass",         "spiculated mass",          "clustered calcifications",
    "linear calcifications", "architectural distortion", "focal asymmetry", "rim calcification"};

constexpr std::array<std::string_view, kQuadrants> kQuadrantPhrases{"upper outer", "upper inner", "lower outer",
                                                                    "lower inner"};

constexpr std::array<int, kMotifs> kBirads{2, 3, 5, 4, 4, 0, 0, 1};

constexpr std::array<std::string_view, 13> kDescriptors{"small",  "large",      "subtle",   "dense",   "faint",
                                                        "prominent", "solitary", "new",     "stable",  "persistent",
                                                        "isolated",  "obscured", "irregular"};

constexpr std::array<std::string_view, 2> kSides{"left", "right"};
constexpr std::array<std::string_view, 2> kViews{"craniocaudal", "mediolateral oblique"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, Rng& rng) {
  return a[rng.below(N)];
}

void check_motif(int motif, int quadrant) {
  if (motif < 0 || motif >= kMotifs) throw ContractError("motif index out of range");
  if (quadrant < 0 || quadrant >= kQuadrants) throw ContractError("quadrant index out of range");
}

// Soft-edged primitives. Each writes max(existing, value * coverage).

void blend(data::GrayImage& img, int x, int y, float v) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  float& p = img.at(x, y);
  p = std::max(p, v);
}

float coverage(double signed_inside) { return static_cast<float>(std::clamp(signed_inside + 0.5, 0.0, 1.0)); }

void ellipse(data::GrayImage& img, double cx, double cy, double rx, double ry, double angle, float v) {
  const double r = std::max(rx, ry) + 2;
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r); ++y)
    for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r); ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (c * dx + s * dy) / rx, w = (-s * dx + c * dy) / ry;
      const double dist = std::sqrt(u * u + w * w);
      blend(img, x, y, v * coverage((1.0 - dist) * std::min(rx, ry)));
    }
}

void disk(data::GrayImage& img, double cx, double cy, double r, float v) { ellipse(img, cx, cy, r, r, 0.0, v); }

void segment(data::GrayImage& img, double x0, double y0, double x1, double y1, double half_width, float v) {
  const double lo_x = std::min(x0, x1) - half_width - 2, hi_x = std::max(x0, x1) + half_width + 2;
  const double lo_y = std::min(y0, y1) - half_width - 2, hi_y = std::max(y0, y1) + half_width + 2;
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = std::max(dx * dx + dy * dy, 1e-9);
  for (int y = static_cast<int>(lo_y); y <= static_cast<int>(hi_y); ++y)
    for (int x = static_cast<int>(lo_x); x <= static_cast<int>(hi_x); ++x) {
      const double t = std::clamp(((x - x0) * dx + (y - y0) * dy) / len2, 0.0, 1.0);
      const double px = x0 + t * dx - x, py = y0 + t * dy - y;
      blend(img, x, y, v * coverage(half_width - std::sqrt(px * px + py * py)));
    }
}

void ring(data::GrayImage& img, double cx, double cy, double r, double half_width, float v) {
  const double outer = r + half_width + 2;
  for (int y = static_cast<int>(cy - outer); y <= static_cast<int>(cy + outer); ++y)
    for (int x = static_cast<int>(cx - outer); x <= static_cast<int>(cx + outer); ++x) {
      const double d = std::hypot(x - cx, y - cy);
      blend(img, x, y, v * coverage(half_width - std::abs(d - r)));
    }
}

void gaussian_blob(data::GrayImage& img, double cx, double cy, double sigma, float v) {
  const double r = 3 * sigma;
  for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r); ++y)
    for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r); ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      blend(img, x, y, static_cast<float>(v * std::exp(-d2 / (2 * sigma * sigma))));
    }
}

void tissue(data::GrayImage& img, Rng& rng) {
  // Half ellipse against the chest wall at x = 0.
  const double cy = kHeight / 2.0 + rng.uniform(-3, 3);
  const double rx = 86 + rng.uniform(-4, 4), ry = 62 + rng.uniform(-3, 3);
  const double base = rng.uniform(0.18, 0.28);
  struct Blob {
    double x, y, sigma, amp;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < 6; ++i)
    blobs.push_back({rng.uniform(0, 70), rng.uniform(cy - ry, cy + ry), rng.uniform(6, 14), rng.uniform(-0.03, 0.03)});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double e = (x / rx) * (x / rx) + ((y - cy) / ry) * ((y - cy) / ry);
      if (e >= 1.0) continue;
      double v = base * std::min(1.0, (1.0 - e) * 6.0);
      for (const auto& b : blobs)
        v += b.amp * std::exp(-((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (2 * b.sigma * b.sigma));
      img.at(x, y) = static_cast<float>(std::max(0.0, v));
    }
}

void draw_motif(data::GrayImage& img, int motif, double cx, double cy, Rng& rng) {
  // Each motif has its own contrast band so that brightness carries part of
  // the class signal alongside shape.
  static constexpr double kContrast[kMotifs] = {0.95, 0.85, 1.0, 0.75, 0.65, 0.55, 0.5, 0.8};
  const double r = rng.uniform(14, 17);
  const double angle = rng.uniform(0, kPi);
  const float v = static_cast<float>(kContrast[motif] + rng.uniform(-0.03, 0.03));
  switch (static_cast<Motif>(motif)) {
    case Motif::round_mass:
      disk(img, cx, cy, r * 0.75, v);
      break;
    case Motif::oval_mass:
      ellipse(img, cx, cy, r * 1.5, r * 0.35, angle, v);
      break;
    case Motif::spiculated_mass: {
      disk(img, cx, cy, r * 0.35, v);
      const int spikes = 8 + rng.below_int(3);
      for (int i = 0; i < spikes; ++i) {
        const double a = angle + 2 * kPi * i / spikes + rng.uniform(-0.15, 0.15);
        segment(img, cx, cy, cx + r * 1.1 * std::cos(a), cy + r * 1.1 * std::sin(a), 0.7, v);
      }
      break;
    }
    case Motif::clustered_calcifications: {
      const int dots = 9 + rng.below_int(4);
      for (int i = 0; i < dots; ++i) {
        const double a = rng.uniform(0, 2 * kPi), d = r * 0.55 * std::sqrt(rng.uniform());
        disk(img, cx + d * std::cos(a), cy + d * std::sin(a), 1.6, v);
      }
      break;
    }
    case Motif::linear_calcifications: {
      const int dots = 5 + rng.below_int(2);
      for (int i = 0; i < dots; ++i) {
        const double t = -1.0 + 2.0 * i / (dots - 1);
        disk(img, cx + t * r * 1.3 * std::cos(angle), cy + t * r * 1.3 * std::sin(angle), 1.8, v);
      }
      break;
    }
    case Motif::architectural_distortion: {
      // Long faint strands crossing off-centre, no central density.
      const int lines = 3 + rng.below_int(2);
      for (int i = 0; i < lines; ++i) {
        const double a = angle + kPi * i / lines + rng.uniform(-0.1, 0.1);
        const double ox = rng.uniform(-3, 3), oy = rng.uniform(-3, 3);
        segment(img, cx + ox - 1.5 * r * std::cos(a), cy + oy - 1.5 * r * std::sin(a),
                cx + ox + 1.5 * r * std::cos(a), cy + oy + 1.5 * r * std::sin(a), 1.0, v);
      }
      break;
    }
    case Motif::focal_asymmetry:
      gaussian_blob(img, cx, cy, r * 0.8, v);
      break;
    case Motif::rim_calcification:
      ring(img, cx, cy, r * 0.75, 1.0, v);
      break;
  }
}

}  // namespace

std::string_view motif_phrase(int motif) {
  check_motif(motif, 0);
  return kMotifPhrases[static_cast<std::size_t>(motif)];
}

std::string_view quadrant_phrase(int quadrant) {
  check_motif(0, quadrant);
  return kQuadrantPhrases[static_cast<std::size_t>(quadrant)];
}

int motif_birads(int motif) {
  check_motif(motif, 0);
  return kBirads[static_cast<std::size_t>(motif)];
}

std::vector<std::string> caption_words() {
  return {
      "a",
      "architectural",
      "asymmetry",
      "at",
      "breast",
      "calcification",
      "calcifications",
      "clustered",
      "craniocaudal",
      "demonstrates",
      "dense",
      "distortion",
      "example",
      "faint",
      "finding",
      "focal",
      "follow",
      "image",
      "in",
      "inner",
      "irregular",
      "is",
      "isolated",
      "large",
      "left",
      "linear",
      "located",
      "lower",
      "mammogram",
      "mass",
      "mediolateral",
      "near",
      "new",
      "noted",
      "oblique",
      "obscured",
      "of",
      "on",
      "outer",
      "oval",
      "persistent",
      "prominent",
      "quadrant",
      "reveals",
      "right",
      "rim",
      "round",
      "screening",
      "seen",
      "shows",
      "small",
      "solitary",
      "spiculated",
      "stable",
      "study",
      "subtle",
      "the",
      "there",
      "this",
      "typical",
      "up",
      "upper",
      "view",
      "within"};
}

Vocabulary caption_vocabulary() { return Vocabulary(caption_words()); }

data::GrayImage render(int motif, int quadrant, Rng& rng) {
  check_motif(motif, quadrant);
  auto img = data::GrayImage::filled(kWidth, kHeight);
  tissue(img, rng);
  const bool upper = quadrant < 2;
  const bool outer = quadrant % 2 == 0;
  const double cx = (outer ? 60.0 : 28.0) + rng.uniform(-5, 5);
  const double cy = (upper ? 38.0 : 90.0) + rng.uniform(-5, 5);
  draw_motif(img, motif, cx, cy, rng);
  for (auto& p : img.pixels) p = std::clamp(p + static_cast<float>(0.01 * rng.normal()), 0.0f, 1.0f);
  return img;
}

std::string caption(int motif, int quadrant, Rng& rng) {
  check_motif(motif, quadrant);
  const std::string m(kMotifPhrases[static_cast<std::size_t>(motif)]);
  const std::string q(kQuadrantPhrases[static_cast<std::size_t>(quadrant)]);
  const std::string d(pick(kDescriptors, rng));
  const std::string side(pick(kSides, rng));
  switch (rng.below_int(8)) {
    case 0: {
      std::string s = d + " " + m + " in the " + q + " quadrant of the " + side + " breast.";
      s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
      return s;
    }
    case 1:
      return "There is a " + d + " " + m + " seen in the " + q + " quadrant.";
    case 2: {
      std::string s = std::string(pick(kViews, rng)) + " view shows a " + d + " " + m + " located at the " + q +
                      " quadrant.";
      s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
      return s;
    }
    case 3:
      return "Example of " + m + " within the " + q + " quadrant, " + side + " breast.";
    case 4:
      return "Mammogram demonstrates " + d + " " + m + " in the " + q + " quadrant.";
    case 5:
      return "This image shows typical " + m + " noted in the " + q + " quadrant.";
    case 6:
      return "Finding of " + m + " is noted at the " + q + " quadrant on screening.";
    default:
      return "Follow up study reveals " + d + " " + m + " near the " + q + " quadrant.";
  }
}

std::vector<SynthPair> make_pairs(int rounds, std::uint64_t seed) {
  if (rounds < 1) throw ContractError("make_pairs: rounds must be positive");
  std::vector<SynthPair> out;
  Rng order_rng(derive_seed(seed, "synth/order"));
  for (int r = 0; r < rounds; ++r) {
    auto combos = order_rng.permutation(kMotifs * kQuadrants);
    for (std::size_t c : combos) {
      const auto index = out.size();
      Rng rng(derive_seed(derive_seed(seed, "synth/pair"), static_cast<std::uint64_t>(index)));
      SynthPair p;
      char id[32];
      std::snprintf(id, sizeof id, "syn-%04zu", index);
      p.id = id;
      p.motif = static_cast<int>(c) / kQuadrants;
      p.quadrant = static_cast<int>(c) % kQuadrants;
      p.image = render(p.motif, p.quadrant, rng);
      p.caption = caption(p.motif, p.quadrant, rng);
      out.push_back(std::move(p));
    }
  }
  return out;
}

Corpus make_corpus(std::uint64_t seed) {
  auto pairs = make_pairs(8, seed);
  Corpus c;
  const auto split = pairs.size() - kMotifs * kQuadrants;
  c.train.assign(std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.begin() + split));
  c.held_out.assign(std::make_move_iterator(pairs.begin() + split), std::make_move_iterator(pairs.end()));
  return c;
}

std::vector<LabeledImage> make_motif_set(int per_class, std::uint64_t seed) {
  if (per_class < 1) throw ContractError("make_motif_set: per_class must be positive");
  std::vector<LabeledImage> out;
  for (int i = 0; i < per_class; ++i)
    for (int m = 0; m < kMotifs; ++m) {
      Rng rng(derive_seed(derive_seed(seed, "synth/motif-set"), out.size()));
      const int q = rng.below_int(kQuadrants);
      out.push_back({render(m, q, rng), m, q});
    }
  return out;
}

std::string atlas_pdf(const std::vector<SynthPair>& pairs) {
  pdf::Writer w;
  constexpr double kFigW = 112.5, kFigH = 150.0, kSlot = 235.0, kTop = 720.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const int slot = static_cast<int>(i % 3);
    if (slot == 0) w.add_page();
    const double y1 = kTop - slot * kSlot;
    const double y0 = y1 - kFigH;
    w.add_image(pairs[i].image, {72, y0, 72 + kFigW, y1});
    w.add_text("Figure " + std::to_string(i + 1) + ". " + pairs[i].caption, 72, y0 - 14, 9);
  }
  return w.finish();
}

void write_atlas(const std::vector<SynthPair>& pairs, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = atlas_pdf(pairs);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataValidationError("cannot write " + path.string());
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  std::fclose(f);
  if (!ok) throw DataValidationError("short write to " + path.string());
}

data::Manifest write_labeled_study(const std::filesystem::path& dir, int patients, std::uint64_t seed) {
  if (patients < 1) throw ContractError("write_labeled_study: need at least one patient");
  std::filesystem::create_directories(dir / "images");
  data::Manifest m;
  m.name = "synthetic";
  static constexpr std::array<const char*, 4> kViewCodes{"LCC", "LMLO", "RCC", "RMLO"};
  for (int p = 0; p < patients; ++p) {
    char pid[16];
    std::snprintf(pid, sizeof pid, "P%04d", p);
    const int motif = p % kMotifs;
    for (std::size_t v = 0; v < kViewCodes.size(); ++v) {
      Rng rng(derive_seed(derive_seed(seed, "synth/study"), static_cast<std::uint64_t>(p * 4) + v));
      const auto img = render(motif, rng.below_int(kQuadrants), rng);
      const std::string rel = std::string("images/") + pid + "_" + kViewCodes[v] + ".png";
      data::write_png(img, dir / rel);
      m.samples.push_back({rel, pid, kViewCodes[v], BiradsLabel::from_int(kBirads[static_cast<std::size_t>(motif)]),
                           1 + (p % 4), "synthetic"});
    }
  }
  data::write_manifest(m, dir / "manifest.csv");
  return m;
}

std::vector<PretrainPair> to_pretrain_pairs(const std::vector<SynthPair>& pairs, Resolution resolution) {
  std::vector<PretrainPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.id, p.id, data::resize_letterbox(p.image, resolution), p.caption});
  return out;
}

PretrainConfig desk_pretrain_config(std::uint64_t seed) {
  PretrainConfig c;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.temperature = 0.1;
  c.lambda = 3.0;
  c.augment_shift = 10;
  c.epochs = 25;
  c.resolution = {kHeight, kWidth};
  c.d = 64;
  c.l = 16;
  c.seed = seed;
  c.model.vision.channels = {16, 32, 64, 64};
  c.model.vision.output_width = 64;
  c.model.text.width = 64;
  c.model.text.heads = 4;
  c.model.text.ff_width = 128;
  c.model.fusion = {2, 4, 128};
  return c;
}

}  // namespace mammovl::synth
