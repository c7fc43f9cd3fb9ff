#pragma once

#include "mammovl/encoders.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mammovl::data {

/// Single-channel image with intensities in [0, 1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // row-major

  static GrayImage filled(int width, int height, float value = 0.0f);
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

/// Reads 8- or 16-bit PNG (grey, grey+alpha, RGB or RGBA; colour is reduced
/// to luma). Throws DataValidationError if undecodable.
GrayImage read_png(const std::filesystem::path& path);
GrayImage decode_png(const std::vector<std::uint8_t>& bytes);
/// Writes 8-bit greyscale PNG.
void write_png(const GrayImage& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const GrayImage& image);

GrayImage from_gray8(int width, int height, const std::uint8_t* data);
std::vector<std::uint8_t> to_gray8(const GrayImage& image);

/// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  double confidence = 0.0;
};

/// Breast-region detector boundary (an external model or a mock).
class DetectorAdapter {
 public:
  virtual ~DetectorAdapter() = default;
  virtual std::vector<Detection> detect(const GrayImage& image) const = 0;
};

/// Runs an external program: the image is written as a PNG to a temporary
/// file, the program is invoked with that path as its last argument and
/// must print one "x0 y0 x1 y1 confidence" line per box on stdout.
class CommandDetector final : public DetectorAdapter {
 public:
  explicit CommandDetector(std::string command) : command_(std::move(command)) {}
  std::vector<Detection> detect(const GrayImage& image) const override;

 private:
  std::string command_;
};

enum class CropSource { detector, fallback, unchanged };

struct CropResult {
  GrayImage image;
  Box box;
  CropSource source = CropSource::fallback;
  bool blank = false;  // input had no foreground; returned unchanged
};

/// Otsu threshold on a 256-bin histogram; returns the threshold in [0, 1].
/// Pixels strictly above the threshold are foreground.
double otsu_threshold(const GrayImage& image);

/// Tight box around the largest 8-connected foreground component, widened
/// by `margin` of the box size on each side and clamped to the image.
std::optional<Box> foreground_box(const GrayImage& image, double margin = 0.02);

GrayImage crop(const GrayImage& image, const Box& box);

CropResult crop_breast(const GrayImage& image, const DetectorAdapter* detector = nullptr);

struct LetterboxGeometry {
  double scale = 1.0;
  int content_height = 0;
  int content_width = 0;
  int pad_top = 0;
  int pad_left = 0;
};

/// Closed-form letterbox placement of an h x w input inside `target`.
LetterboxGeometry letterbox_geometry(int height, int width, Resolution target);

/// Aspect-preserving resize with zero padding. Downscaling averages source
/// area, upscaling interpolates bilinearly; equal sizes copy exactly.
ImageTensor resize_letterbox(const GrayImage& image, Resolution target = {});
ImageTensor resize_letterbox(const GrayImage& image, Resolution target, LetterboxGeometry* geometry);

}  // namespace mammovl::data
