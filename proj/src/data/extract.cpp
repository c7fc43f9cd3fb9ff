#include "mammovl/data/extract.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <regex>
#include <set>
#include <sstream>

namespace mammovl::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kEdgeTolerance = 2.0;

std::string two_digits(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

bool overlaps(double a0, double a1, double b0, double b1) { return a0 < b1 && b0 < a1; }

// Gap from figure to caption for one placement, or a negative value when the
// caption is not on that side.
double gap(const pdf::Rect& f, const pdf::Rect& c, Placement p) {
  switch (p) {
    case Placement::below:
      if (c.y1 > f.y0 + kEdgeTolerance || !overlaps(f.x0, f.x1, c.x0, c.x1)) return -1;
      return std::max(0.0, f.y0 - c.y1);
    case Placement::above:
      if (c.y0 < f.y1 - kEdgeTolerance || !overlaps(f.x0, f.x1, c.x0, c.x1)) return -1;
      return std::max(0.0, c.y0 - f.y1);
    case Placement::beside:
      if (c.x0 < f.x1 - kEdgeTolerance || !overlaps(f.y0, f.y1, c.y0, c.y1)) return -1;
      return std::max(0.0, c.x0 - f.x1);
  }
  return -1;
}

// True when figure g sits between figure f and caption c on side p.
bool blocks(const pdf::Rect& f, const pdf::Rect& g, const pdf::Rect& c, Placement p) {
  switch (p) {
    case Placement::below:
      return g.y1 <= f.y0 + kEdgeTolerance && g.y0 >= c.y1 - kEdgeTolerance && overlaps(g.x0, g.x1, c.x0, c.x1);
    case Placement::above:
      return g.y0 >= f.y1 - kEdgeTolerance && g.y1 <= c.y0 + kEdgeTolerance && overlaps(g.x0, g.x1, c.x0, c.x1);
    case Placement::beside:
      return g.x0 >= f.x1 - kEdgeTolerance && g.x1 <= c.x0 + kEdgeTolerance && overlaps(g.y0, g.y1, c.y0, c.y1);
  }
  return false;
}

struct Candidate {
  CaptionRecord record;
  bool readable = true;
};

struct Line {
  double y = 0, size = 0, x0 = 0, x1 = 0;
  std::string text;
};

}  // namespace

std::string ExtractedFigure::ref() const {
  return document_id + "#p" + std::to_string(page) + "/i" + std::to_string(index);
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  bool space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      space = !out.empty();
    } else {
      if (space) out.push_back(' ');
      out.push_back(static_cast<char>(c));
      space = false;
    }
  }
  return out;
}

const std::vector<LayoutProfile>& builtin_profiles() {
  static const std::vector<LayoutProfile> profiles = [] {
    LayoutProfile below;
    below.name = "default";
    LayoutProfile side;
    side.name = "side-caption";
    side.placements = {Placement::beside, Placement::below};
    side.proximity_radius = 36.0;
    LayoutProfile above;
    above.name = "caption-above";
    above.placements = {Placement::above};
    return std::vector<LayoutProfile>{below, side, above};
  }();
  return profiles;
}

std::vector<std::string> profile_names() {
  std::vector<std::string> names;
  for (const auto& p : builtin_profiles()) names.push_back(p.name);
  return names;
}

const LayoutProfile& find_profile(const std::string& name) {
  for (const auto& p : builtin_profiles())
    if (p.name == name) return p;
  std::string known;
  for (const auto& n : profile_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown layout profile '" + name + "' (known: " + known + ")");
}

LayoutProfile profile_from_json(const json& j) {
  static const std::set<std::string> keys{"name", "proximity_radius", "caption_pattern", "placements",
                                          "strip_label", "min_figure_size", "strip_min_aspect",
                                          "strip_max_height", "line_gap_factor", "base"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError("layout profile: unknown key '" + k + "'");
  LayoutProfile p = j.contains("base") ? find_profile(j["base"].get<std::string>()) : LayoutProfile{};
  try {
    p.name = j.value("name", p.name.empty() ? std::string("custom") : p.name);
    p.proximity_radius = j.value("proximity_radius", p.proximity_radius);
    p.caption_pattern = j.value("caption_pattern", p.caption_pattern);
    p.strip_label = j.value("strip_label", p.strip_label);
    p.min_figure_size = j.value("min_figure_size", p.min_figure_size);
    p.strip_min_aspect = j.value("strip_min_aspect", p.strip_min_aspect);
    p.strip_max_height = j.value("strip_max_height", p.strip_max_height);
    p.line_gap_factor = j.value("line_gap_factor", p.line_gap_factor);
    if (j.contains("placements")) {
      p.placements.clear();
      for (const auto& v : j["placements"]) {
        const auto s = v.get<std::string>();
        if (s == "below") p.placements.push_back(Placement::below);
        else if (s == "beside") p.placements.push_back(Placement::beside);
        else if (s == "above") p.placements.push_back(Placement::above);
        else throw ConfigError("layout profile: unknown placement '" + s + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("layout profile: ") + e.what());
  }
  if (p.proximity_radius <= 0) throw ConfigError("layout profile: proximity_radius must be positive");
  try {
    std::regex test(p.caption_pattern);
  } catch (const std::regex_error&) {
    throw ConfigError("layout profile: invalid caption_pattern");
  }
  return p;
}

std::string CommandOcr::recognize(const GrayImage& image) const {
  const fs::path tmp = fs::temp_directory_path() /
                       ("mammovl-ocr-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)) + ".png");
  write_png(image, tmp);
  const std::string cmd = command_ + " '" + tmp.string() + "'";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  if (!pipe) throw ExtractionError("cannot run OCR command: " + command_);
  std::string out;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) out += buf.data();
  pipe.reset();
  fs::remove(tmp);
  return out;
}

std::vector<CaptionRecord> text_blocks(const pdf::Page& page, const LayoutProfile& profile) {
  // Runs -> lines (shared baseline) -> blocks (stacked lines that overlap
  // horizontally and sit within line_gap_factor font sizes).
  std::vector<pdf::TextRun> runs = page.text;
  std::stable_sort(runs.begin(), runs.end(), [](const pdf::TextRun& a, const pdf::TextRun& b) {
    return a.y != b.y ? a.y > b.y : a.x < b.x;
  });
  std::vector<Line> lines;
  for (const auto& r : runs) {
    const double size = std::max(r.size, 1.0);
    Line* target = nullptr;
    for (auto& l : lines)
      if (std::abs(l.y - r.y) <= 0.3 * size && r.x >= l.x0 - size && r.x <= l.x1 + 3 * size) target = &l;
    if (!target) {
      lines.push_back({r.y, size, r.x, r.x + r.width, r.text});
      continue;
    }
    if (r.x > target->x1 + 0.1 * size && !target->text.empty() && target->text.back() != ' ' && r.text.front() != ' ')
      target->text.push_back(' ');
    target->text += r.text;
    target->x0 = std::min(target->x0, r.x);
    target->x1 = std::max(target->x1, r.x + r.width);
    target->size = std::max(target->size, size);
  }
  std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.y > b.y; });

  std::vector<CaptionRecord> blocks;
  std::vector<Line> last_line;
  for (const auto& l : lines) {
    bool joined = false;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const Line& prev = last_line[b];
      const double dy = prev.y - l.y;
      if (dy > 0 && dy <= profile.line_gap_factor * std::max(prev.size, l.size) &&
          overlaps(prev.x0, prev.x1, l.x0, l.x1)) {
        std::string& t = blocks[b].text;
        if (!t.empty() && t.back() == '-' && !l.text.empty() && std::islower(static_cast<unsigned char>(l.text[0])))
          t.pop_back();
        else
          t.push_back(' ');
        t += l.text;
        auto& a = blocks[b].anchor;
        a.x0 = std::min(a.x0, l.x0);
        a.x1 = std::max(a.x1, l.x1);
        a.y0 = std::min(a.y0, l.y - 0.25 * l.size);
        last_line[b] = l;
        joined = true;
        break;
      }
    }
    if (!joined) {
      blocks.push_back({l.text, page.number, {l.x0, l.y - 0.25 * l.size, l.x1, l.y + 0.8 * l.size}, false});
      last_line.push_back(l);
    }
  }
  for (auto& b : blocks) b.text = normalize_whitespace(b.text);
  return blocks;
}

std::vector<ImageTextPair> expand_shared_captions(const CaptionRecord& caption,
                                                  const std::vector<ExtractedFigure>& figures) {
  if (figures.empty()) throw ContractError("expand_shared_captions: caption has no figures");
  if (normalize_whitespace(caption.text).empty()) throw ContractError("expand_shared_captions: empty caption");
  std::vector<ImageTextPair> out;
  std::set<std::string> ids;
  for (const auto& f : figures) {
    ImageTextPair p;
    p.pair_id = f.document_id + "-p" + two_digits(f.page, 4) + "-i" + two_digits(f.index, 3);
    if (!ids.insert(p.pair_id).second) throw ContractError("expand_shared_captions: figure listed twice");
    p.figure = f;
    p.caption = normalize_whitespace(caption.text);
    p.source = f.document_id;
    p.page = f.page;
    p.ocr_flag = caption.ocr_flag;
    out.push_back(std::move(p));
  }
  return out;
}

ExtractionResult extract_pairs(const pdf::Document& document, const std::string& document_id,
                               const LayoutProfile& profile, const OcrAdapter* ocr) {
  std::regex pattern;
  try {
    pattern = std::regex(profile.caption_pattern, std::regex::ECMAScript | std::regex::icase);
  } catch (const std::regex_error&) {
    throw ConfigError("layout profile '" + profile.name + "': invalid caption_pattern");
  }
  ExtractionResult result;
  for (const auto& page : document.pages()) {
    std::vector<Candidate> candidates;
    for (auto& b : text_blocks(page, profile)) {
      std::smatch m;
      if (!std::regex_search(b.text, m, pattern) || m.position(0) != 0) continue;
      if (profile.strip_label) b.text = normalize_whitespace(b.text.substr(static_cast<std::size_t>(m.length(0))));
      if (!b.text.empty()) candidates.push_back({b, true});
    }
    std::vector<const pdf::PlacedImage*> figures;
    for (const auto& img : page.images) {
      const double w = img.rect.width(), h = img.rect.height();
      const bool strip = h > 0 && w / h >= profile.strip_min_aspect && h <= profile.strip_max_height;
      if (strip) {
        CaptionRecord rec{{}, page.number, img.rect, true};
        if (ocr && img.decode_error.empty()) {
          rec.text = normalize_whitespace(ocr->recognize(img.image));
          std::smatch m;
          if (profile.strip_label && std::regex_search(rec.text, m, pattern) && m.position(0) == 0)
            rec.text = normalize_whitespace(rec.text.substr(static_cast<std::size_t>(m.length(0))));
          if (!rec.text.empty()) candidates.push_back({rec, true});
        } else {
          candidates.push_back({rec, false});
        }
        continue;
      }
      if (w >= profile.min_figure_size && h >= profile.min_figure_size) figures.push_back(&img);
    }
    result.figures += figures.size();

    // Each figure takes its nearest qualifying caption.
    std::map<std::size_t, std::vector<ExtractedFigure>> by_caption;
    for (const auto* f : figures) {
      ExtractedFigure fig{document_id, page.number, f->index, f->rect, f->image};
      if (!f->decode_error.empty()) {
        log::warn("extract: " + fig.ref() + ": " + f->decode_error);
        result.rejects.push_back({fig.ref(), "undecodable-image"});
        continue;
      }
      double best = profile.proximity_radius + 1e-9;
      std::optional<std::size_t> best_idx;
      bool unreadable_nearby = false;
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        for (std::size_t p = 0; p < profile.placements.size(); ++p) {
          const Placement pl = profile.placements[p];
          const double g = gap(f->rect, candidates[c].record.anchor, pl);
          if (g < 0 || g > profile.proximity_radius) continue;
          const bool blocked = std::any_of(figures.begin(), figures.end(), [&](const pdf::PlacedImage* o) {
            return o != f && blocks(f->rect, o->rect, candidates[c].record.anchor, pl);
          });
          if (blocked) continue;
          if (!candidates[c].readable) {
            unreadable_nearby = true;
            continue;
          }
          if (g < best) {
            best = g;
            best_idx = c;
          }
          break;  // earlier placements take precedence for this caption
        }
      }
      if (best_idx) by_caption[*best_idx].push_back(std::move(fig));
      else result.rejects.push_back({fig.ref(), unreadable_nearby ? "caption-unreadable" : "no-caption"});
    }
    for (auto& [c, figs] : by_caption) {
      ++result.captions;
      for (auto& p : expand_shared_captions(candidates[c].record, figs)) result.pairs.push_back(std::move(p));
    }
  }
  std::sort(result.pairs.begin(), result.pairs.end(),
            [](const ImageTextPair& a, const ImageTextPair& b) { return a.pair_id < b.pair_id; });
  return result;
}

ExtractionResult extract_pairs(const fs::path& path, const LayoutProfile& profile, const OcrAdapter* ocr) {
  if (!fs::exists(path)) throw ExtractionError("no such document: " + path.string());
  return extract_pairs(pdf::Document::open(path), path.stem().string(), profile, ocr);
}

void merge_into(ExtractionResult& into, ExtractionResult&& from) {
  std::set<std::string> ids;
  for (const auto& p : into.pairs) ids.insert(p.pair_id);
  for (auto& p : from.pairs) {
    if (!ids.insert(p.pair_id).second) throw ExtractionError("duplicate pair id " + p.pair_id + " across documents");
    into.pairs.push_back(std::move(p));
  }
  for (auto& r : from.rejects) into.rejects.push_back(std::move(r));
  into.figures += from.figures;
  into.captions += from.captions;
  std::sort(into.pairs.begin(), into.pairs.end(),
            [](const ImageTextPair& a, const ImageTextPair& b) { return a.pair_id < b.pair_id; });
}

void write_extraction(const ExtractionResult& result, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ofstream pairs(dir / "pairs.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& p : result.pairs) {
    const std::string file = "images/" + p.pair_id + ".png";
    write_png(p.figure.image, dir / file);
    pairs << json{{"pair_id", p.pair_id}, {"image_file", file}, {"caption", p.caption},
                  {"source", p.source},   {"page", p.page},       {"ocr_flag", p.ocr_flag}}
                 .dump()
          << '\n';
  }
  std::vector<Reject> rejects = result.rejects;
  std::sort(rejects.begin(), rejects.end(),
            [](const Reject& a, const Reject& b) { return a.figure_ref < b.figure_ref; });
  std::ofstream rej(dir / "rejects.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& r : rejects) rej << json{{"figure_ref", r.figure_ref}, {"reason", r.reason}}.dump() << '\n';
}

std::vector<PairRecord> read_pairs(const fs::path& pairs_jsonl) {
  std::ifstream in(pairs_jsonl, std::ios::binary);
  if (!in) throw DataValidationError("cannot read " + pairs_jsonl.string());
  std::vector<PairRecord> out;
  std::set<std::string> ids;
  std::vector<std::string> problems;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (normalize_whitespace(line).empty()) continue;
    try {
      const json j = json::parse(line);
      PairRecord r{j.at("pair_id").get<std::string>(), j.at("image_file").get<std::string>(),
                   j.at("caption").get<std::string>(), j.value("source", std::string()), j.value("page", 0),
                   j.value("ocr_flag", false)};
      if (normalize_whitespace(r.caption).empty()) problems.push_back("row " + std::to_string(row) + ": empty caption");
      else if (!ids.insert(r.pair_id).second) problems.push_back("row " + std::to_string(row) + ": duplicate pair_id");
      else out.push_back(std::move(r));
    } catch (const json::exception& e) {
      problems.push_back("row " + std::to_string(row) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = pairs_jsonl.string() + ": " + std::to_string(problems.size()) + " invalid row(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataValidationError(msg);
  }
  return out;
}

}  // namespace mammovl::data
