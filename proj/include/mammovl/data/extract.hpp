#pragma once

#include "mammovl/data/image.hpp"
#include "mammovl/data/pdf.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mammovl::data {

struct ExtractedFigure {
  std::string document_id;
  int page = 0;
  int index = 0;  // draw order on the page
  pdf::Rect box;
  GrayImage image;

  /// Stable reference "<document>#p<page>/i<index>".
  std::string ref() const;
};

struct CaptionRecord {
  std::string text;
  int page = 0;
  pdf::Rect anchor;
  bool ocr_flag = false;
};

struct ImageTextPair {
  std::string pair_id;
  ExtractedFigure figure;
  std::string caption;
  std::string source;  // document id
  int page = 0;
  bool ocr_flag = false;
};

struct Reject {
  std::string figure_ref;
  std::string reason;  // "no-caption", "caption-unreadable", "undecodable-image"
};

enum class Placement { below, beside, above };

/// Caption-matching heuristic for one atlas layout. Distances are in points.
struct LayoutProfile {
  std::string name;
  double proximity_radius = 48.0;
  std::string caption_pattern = R"(^\s*(figure|fig\.?)\s*[0-9]+([.-][0-9]+)*[a-z]?\s*[.:]?)";
  std::vector<Placement> placements{Placement::below};
  bool strip_label = true;           // drop the matched "Figure 3." prefix
  double min_figure_size = 24.0;     // smaller images (logos, rules) are ignored
  double strip_min_aspect = 5.0;     // wide, short images are rasterized captions
  double strip_max_height = 48.0;
  double line_gap_factor = 1.6;      // max baseline gap, in font sizes, inside a block
};

/// Built-in profiles: "default" (caption below), "side-caption" (caption to
/// the right, then below) and "caption-above".
const std::vector<LayoutProfile>& builtin_profiles();
/// Throws ConfigError listing the known names when `name` is unknown.
const LayoutProfile& find_profile(const std::string& name);
std::vector<std::string> profile_names();
LayoutProfile profile_from_json(const nlohmann::json& j);

/// Text recognition boundary for captions that exist only as pixels.
class OcrAdapter {
 public:
  virtual ~OcrAdapter() = default;
  virtual std::string recognize(const GrayImage& image) const = 0;
};

/// Runs `command <png-path>` and takes its stdout as the recognised text.
class CommandOcr final : public OcrAdapter {
 public:
  explicit CommandOcr(std::string command) : command_(std::move(command)) {}
  std::string recognize(const GrayImage& image) const override;

 private:
  std::string command_;
};

struct ExtractionResult {
  std::vector<ImageTextPair> pairs;
  std::vector<Reject> rejects;
  std::size_t figures = 0;
  std::size_t captions = 0;
};

/// Collapses whitespace runs and trims.
std::string normalize_whitespace(const std::string& text);

/// Caption blocks found in the page's text layer (before pattern matching).
std::vector<CaptionRecord> text_blocks(const pdf::Page& page, const LayoutProfile& profile);

ExtractionResult extract_pairs(const pdf::Document& document, const std::string& document_id,
                               const LayoutProfile& profile, const OcrAdapter* ocr = nullptr);
/// Document id is the file stem.
ExtractionResult extract_pairs(const std::filesystem::path& path, const LayoutProfile& profile,
                               const OcrAdapter* ocr = nullptr);

/// One pair per figure, all sharing the caption text. Throws ContractError
/// for an empty figure list.
std::vector<ImageTextPair> expand_shared_captions(const CaptionRecord& caption,
                                                  const std::vector<ExtractedFigure>& figures);

void merge_into(ExtractionResult& into, ExtractionResult&& from);

/// Writes images/<pair_id>.png, pairs.jsonl and rejects.jsonl under `dir`.
void write_extraction(const ExtractionResult& result, const std::filesystem::path& dir);

/// One row of pairs.jsonl.
struct PairRecord {
  std::string pair_id;
  std::string image_file;  // relative to the pairs file
  std::string caption;
  std::string source;
  int page = 0;
  bool ocr_flag = false;
};

/// Throws DataValidationError on malformed rows or duplicate ids.
std::vector<PairRecord> read_pairs(const std::filesystem::path& pairs_jsonl);

}  // namespace mammovl::data
