#pragma once

#include "mammovl/data/image.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mammovl::pdf {

struct Object;
using ObjectPtr = std::shared_ptr<const Object>;
using Array = std::vector<ObjectPtr>;
using Dict = std::map<std::string, ObjectPtr>;

struct Name {
  std::string value;
};
struct Ref {
  int num = 0;
  int gen = 0;
};
struct Stream {
  Dict dict;
  std::string data;  // raw, still encoded
};

/// A parsed PDF object. Strings hold raw bytes.
struct Object {
  std::variant<std::monostate, bool, double, std::string, Name, Array, Dict, Ref, Stream> value;

  bool is_null() const { return std::holds_alternative<std::monostate>(value); }
  const double* number() const { return std::get_if<double>(&value); }
  const std::string* string() const { return std::get_if<std::string>(&value); }
  const Name* name() const { return std::get_if<Name>(&value); }
  const Array* array() const { return std::get_if<Array>(&value); }
  const Dict* dict() const;  // also the dictionary of a stream
  const Ref* ref() const { return std::get_if<Ref>(&value); }
  const Stream* stream() const { return std::get_if<Stream>(&value); }
};

/// Axis-aligned rectangle in page space (points, origin bottom-left).
struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

/// An image drawn on a page.
struct PlacedImage {
  int page = 0;  // 1-based
  int index = 0;  // draw order on the page
  Rect rect;
  data::GrayImage image;
  std::string decode_error;  // non-empty when the pixels could not be decoded
};

/// A run of text drawn with a single Tj/TJ operator.
struct TextRun {
  int page = 0;
  std::string text;
  double x = 0, y = 0;  // baseline origin
  double size = 0;      // effective font size
  double width = 0;     // estimated advance
};

struct Page {
  int number = 0;
  Rect media_box;
  std::vector<PlacedImage> images;
  std::vector<TextRun> text;
};

/// Object-scanning PDF reader: indirect objects are located by scanning
/// rather than through the cross-reference table, which also copes with
/// damaged xref sections. Handles object streams, FlateDecode with PNG
/// predictors, ASCIIHexDecode, DCTDecode images, single-byte fonts and
/// ToUnicode maps. Throws ExtractionError on unparseable or encrypted input.
class Document {
 public:
  static Document parse(std::string bytes);
  static Document open(const std::filesystem::path& path);

  std::size_t page_count() const { return pages_.size(); }
  const Page& page(std::size_t i) const { return pages_.at(i); }
  const std::vector<Page>& pages() const { return pages_; }

 private:
  std::vector<Page> pages_;
};

/// Decodes a stream's data through its filter chain.
std::string decode_stream(const Stream& stream);

// ---------------------------------------------------------------------------
// Minimal writer used to build fixtures and synthetic atlases.

class Writer {
 public:
  /// Starts a new page of the given size in points.
  void add_page(double width = 612, double height = 792);
  /// Draws a greyscale image (Flate-compressed) into `rect`.
  void add_image(const data::GrayImage& image, Rect rect);
  /// Draws one line of Helvetica text with its baseline at (x, y).
  void add_text(const std::string& text, double x, double y, double size = 10);
  std::string finish() const;
  void save(const std::filesystem::path& path) const;

 private:
  struct PageContent {
    double width = 612, height = 792;
    std::string ops;
    std::vector<std::size_t> images;
  };
  std::vector<PageContent> pages_;
  std::vector<data::GrayImage> images_;
};

}  // namespace mammovl::pdf
