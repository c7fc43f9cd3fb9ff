#include "mammovl/data/image.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

namespace mammovl::data {

namespace fs = std::filesystem;

GrayImage GrayImage::filled(int width, int height, float value) {
  if (width < 0 || height < 0) throw ContractError("negative image size");
  GrayImage g;
  g.width = width;
  g.height = height;
  g.pixels.assign(static_cast<std::size_t>(width) * height, value);
  return g;
}

GrayImage from_gray8(int width, int height, const std::uint8_t* data) {
  GrayImage g = GrayImage::filled(width, height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<float>(data[i]) / 255.0f;
  return g;
}

std::vector<std::uint8_t> to_gray8(const GrayImage& image) {
  std::vector<std::uint8_t> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

GrayImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw DataValidationError(std::string("undecodable PNG: ") + img.message);
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataValidationError(std::string("undecodable PNG: ") + img.message);
  }
  return from_gray8(static_cast<int>(img.width), static_cast<int>(img.height), buf.data());
}

GrayImage read_png(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataValidationError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const DataValidationError& e) {
    throw DataValidationError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  if (image.width <= 0 || image.height <= 0) throw ContractError("cannot encode an empty image");
  const auto gray = to_gray8(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, gray.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, gray.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

void write_png(const GrayImage& image, const fs::path& path) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------

std::vector<Detection> CommandDetector::detect(const GrayImage& image) const {
  const fs::path tmp = fs::temp_directory_path() /
                       ("mammovl-detect-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)) + ".png");
  write_png(image, tmp);
  const std::string cmd = command_ + " '" + tmp.string() + "'";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  if (!pipe) throw Error("cannot run detector: " + command_);
  std::string output;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) output += buf.data();
  pipe.reset();
  fs::remove(tmp);
  std::vector<Detection> out;
  std::istringstream lines(output);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream ls(line);
    Detection d;
    if (ls >> d.box.x0 >> d.box.y0 >> d.box.x1 >> d.box.y1 >> d.confidence) out.push_back(d);
  }
  return out;
}

double otsu_threshold(const GrayImage& image) {
  std::array<double, 256> hist{};
  for (float v : image.pixels) hist[static_cast<std::size_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))] += 1;
  const double total = static_cast<double>(image.pixels.size());
  if (total == 0) return 0.0;
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best = -1;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t / 255.0;
}

std::optional<Box> foreground_box(const GrayImage& image, double margin) {
  const int w = image.width, h = image.height;
  if (w == 0 || h == 0) return std::nullopt;
  const double thr = otsu_threshold(image);
  const float cut = static_cast<float>(thr + 0.5 / 255.0);  // strictly above the threshold bin
  std::vector<std::int32_t> label(static_cast<std::size_t>(w) * h, -1);
  std::vector<int> stack;
  Box best;
  std::size_t best_size = 0;
  int next = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (label[i] >= 0 || image.pixels[i] < cut) continue;
      Box b{x, y, x + 1, y + 1};
      std::size_t size = 0;
      label[i] = next;
      stack.assign(1, static_cast<int>(i));
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int px = p % w, py = p / w;
        ++size;
        b.x0 = std::min(b.x0, px);
        b.y0 = std::min(b.y0, py);
        b.x1 = std::max(b.x1, px + 1);
        b.y1 = std::max(b.y1, py + 1);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = px + dx, ny = py + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
            if (label[j] >= 0 || image.pixels[j] < cut) continue;
            label[j] = next;
            stack.push_back(static_cast<int>(j));
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best = b;
      }
      ++next;
    }
  }
  if (best_size == 0) return std::nullopt;
  const int mx = static_cast<int>(std::lround(margin * best.width()));
  const int my = static_cast<int>(std::lround(margin * best.height()));
  return Box{std::max(0, best.x0 - mx), std::max(0, best.y0 - my), std::min(w, best.x1 + mx),
             std::min(h, best.y1 + my)};
}

GrayImage crop(const GrayImage& image, const Box& box) {
  if (box.empty() || box.x0 < 0 || box.y0 < 0 || box.x1 > image.width || box.y1 > image.height)
    throw ContractError("crop box outside image");
  GrayImage out = GrayImage::filled(box.width(), box.height());
  for (int y = 0; y < box.height(); ++y)
    std::copy_n(&image.pixels[static_cast<std::size_t>(box.y0 + y) * image.width + box.x0], box.width(),
                &out.pixels[static_cast<std::size_t>(y) * out.width]);
  return out;
}

CropResult crop_breast(const GrayImage& image, const DetectorAdapter* detector) {
  if (image.width <= 0 || image.height <= 0) throw ContractError("crop_breast: empty image");
  if (detector) {
    auto found = detector->detect(image);
    std::stable_sort(found.begin(), found.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    if (!found.empty()) {
      Box b = found.front().box;
      b = {std::max(0, b.x0), std::max(0, b.y0), std::min(image.width, b.x1), std::min(image.height, b.y1)};
      if (!b.empty()) return {crop(image, b), b, CropSource::detector, false};
    }
    log::warn("crop: detector returned no usable box, using threshold fallback");
  }
  const auto box = foreground_box(image);
  if (!box) return {image, Box{0, 0, image.width, image.height}, CropSource::unchanged, true};
  return {crop(image, *box), *box, CropSource::fallback, false};
}

// ---------------------------------------------------------------------------

LetterboxGeometry letterbox_geometry(int height, int width, Resolution target) {
  if (height <= 0 || width <= 0) throw ContractError("letterbox: image has zero size");
  LetterboxGeometry g;
  g.scale = std::min(static_cast<double>(target.height) / height, static_cast<double>(target.width) / width);
  g.content_height = std::clamp(static_cast<int>(std::lround(height * g.scale)), 1, target.height);
  g.content_width = std::clamp(static_cast<int>(std::lround(width * g.scale)), 1, target.width);
  g.pad_top = (target.height - g.content_height) / 2;
  g.pad_left = (target.width - g.content_width) / 2;
  return g;
}

namespace {

struct Tap {
  int index;
  float weight;
};

// Source taps for each of `dst` output samples covering `src` inputs.
std::vector<std::vector<Tap>> resample_taps(int src, int dst) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(dst));
  const double ratio = static_cast<double>(src) / dst;
  for (int o = 0; o < dst; ++o) {
    auto& t = taps[static_cast<std::size_t>(o)];
    if (src == dst) {
      t.push_back({o, 1.0f});
    } else if (src > dst) {
      // box filter over the covered source interval
      const double a = o * ratio, b = (o + 1) * ratio;
      for (int s = static_cast<int>(std::floor(a)); s < std::min(src, static_cast<int>(std::ceil(b))); ++s) {
        const double cover = std::min(b, s + 1.0) - std::max(a, static_cast<double>(s));
        if (cover > 0) t.push_back({s, static_cast<float>(cover / ratio)});
      }
    } else {
      const double pos = std::clamp((o + 0.5) * ratio - 0.5, 0.0, static_cast<double>(src - 1));
      const int s0 = static_cast<int>(std::floor(pos));
      const int s1 = std::min(s0 + 1, src - 1);
      const double f = pos - s0;
      t.push_back({s0, static_cast<float>(1.0 - f)});
      if (f > 0) t.push_back({s1, static_cast<float>(f)});
    }
  }
  return taps;
}

}  // namespace

ImageTensor resize_letterbox(const GrayImage& image, Resolution target) {
  return resize_letterbox(image, target, nullptr);
}

ImageTensor resize_letterbox(const GrayImage& image, Resolution target, LetterboxGeometry* geometry) {
  const LetterboxGeometry g = letterbox_geometry(image.height, image.width, target);
  if (geometry) *geometry = g;
  const auto xt = resample_taps(image.width, g.content_width);
  const auto yt = resample_taps(image.height, g.content_height);
  // Horizontal pass, then vertical.
  std::vector<float> tmp(static_cast<std::size_t>(image.height) * g.content_width);
  for (int y = 0; y < image.height; ++y) {
    const float* row = &image.pixels[static_cast<std::size_t>(y) * image.width];
    for (int x = 0; x < g.content_width; ++x) {
      float acc = 0;
      for (const Tap& t : xt[static_cast<std::size_t>(x)]) acc += t.weight * row[t.index];
      tmp[static_cast<std::size_t>(y) * g.content_width + x] = acc;
    }
  }
  ImageTensor out = ImageTensor::zeros(target.height, target.width);
  for (int y = 0; y < g.content_height; ++y) {
    for (int x = 0; x < g.content_width; ++x) {
      float acc = 0;
      for (const Tap& t : yt[static_cast<std::size_t>(y)])
        acc += t.weight * tmp[static_cast<std::size_t>(t.index) * g.content_width + x];
      out.at(y + g.pad_top, x + g.pad_left) = std::clamp(acc, 0.0f, 1.0f);
    }
  }
  return out;
}

}  // namespace mammovl::data
