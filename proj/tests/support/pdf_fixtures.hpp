#pragma once

// Constructed PDF layouts with known figure/caption geometry.

#include "mammovl/data/extract.hpp"
#include "mammovl/data/pdf.hpp"

#include <string>

namespace fixtures {

inline mammovl::data::GrayImage pattern(int w, int h, int seed) {
  auto img = mammovl::data::GrayImage::filled(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<float>((x * (seed + 3) + y * (seed + 7)) % 256) / 255.0f;
  return img;
}

// Page 1: figure A captioned below; figures B and C side by side sharing one
// caption. Page 2: figure D captioned below. 4 figures, 3 captions.
inline std::string four_figures_three_captions() {
  mammovl::pdf::Writer w;
  w.add_page();
  w.add_image(pattern(64, 48, 1), {72, 560, 252, 700});
  w.add_text("Figure 1. Round mass with circumscribed margins in the upper", 72, 540);
  w.add_text("outer quadrant.", 72, 528);
  w.add_image(pattern(64, 48, 2), {72, 300, 252, 440});
  w.add_image(pattern(64, 48, 3), {300, 300, 480, 440});
  w.add_text("Figure 2. Craniocaudal and mediolateral oblique views of grouped amorphous calcifications.",
             72, 280);
  w.add_page();
  w.add_image(pattern(64, 48, 4), {100, 500, 300, 650});
  w.add_text("FIG. 3 Architectural distortion without a central mass.", 100, 484);
  return w.finish();
}

// One figure with unrelated body text far away.
inline std::string figure_without_caption() {
  mammovl::pdf::Writer w;
  w.add_page();
  w.add_image(pattern(64, 48, 5), {72, 500, 272, 650});
  w.add_text("Chapter 4 discusses screening intervals.", 72, 200);
  return w.finish();
}

// Two figures, each with its own caption.
inline std::string two_captioned_figures() {
  mammovl::pdf::Writer w;
  w.add_page();
  w.add_image(pattern(64, 48, 6), {72, 520, 272, 680});
  w.add_text("Figure 7. Spiculated mass.", 72, 505);
  w.add_image(pattern(64, 48, 7), {72, 250, 272, 410});
  w.add_text("Figure 8. Benign skin calcifications.", 72, 235);
  return w.finish();
}

// One figure whose caption is a rasterized strip below it.
inline std::string rasterized_caption() {
  mammovl::pdf::Writer w;
  w.add_page();
  w.add_image(pattern(64, 48, 8), {72, 520, 272, 680});
  w.add_image(pattern(200, 12, 9), {72, 490, 372, 508});
  return w.finish();
}

// Three captioned figures plus one orphan.
inline std::string three_pairs_one_reject() {
  mammovl::pdf::Writer w;
  w.add_page();
  w.add_image(pattern(64, 48, 10), {72, 560, 252, 700});
  w.add_text("Figure 1. Focal asymmetry.", 72, 545);
  w.add_image(pattern(64, 48, 11), {300, 560, 480, 700});
  w.add_text("Figure 2. Dense breast tissue.", 300, 545);
  w.add_image(pattern(64, 48, 12), {72, 300, 252, 440});
  w.add_text("Figure 3. Lymph node in the axilla.", 72, 285);
  w.add_page();
  w.add_image(pattern(64, 48, 13), {72, 500, 272, 650});
  return w.finish();
}

struct FixedOcr final : mammovl::data::OcrAdapter {
  std::string text;
  mutable int calls = 0;
  explicit FixedOcr(std::string t) : text(std::move(t)) {}
  std::string recognize(const mammovl::data::GrayImage&) const override {
    ++calls;
    return text;
  }
};

}  // namespace fixtures
