#include "mammovl/data/manifest.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mammovl::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<const char*, 6> kColumns{"image_path", "patient_id", "view",
                                              "birads", "density", "dataset"};

constexpr std::array<const char*, 4> kStandardViews{"LCC", "LMLO", "RCC", "RMLO"};
constexpr std::array<const char*, 15> kOtherProjections{"ML", "LM", "XCCL", "XCCM", "LMO", "FB", "SIO",
                                                        "ISO", "AT", "CV", "RL", "RM", "TAN", "SPOT", "MAG"};

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) return std::nullopt;
  return v;
}

// RFC 4180 records. Quoted fields may contain commas, quotes and newlines.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field.push_back(c);
      any = true;
    }
  }
  if (quoted) throw DataValidationError("manifest: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

struct RowValidator {
  std::vector<std::string> problems;
  std::unordered_set<std::string> seen_paths;

  std::optional<LabeledSample> check(std::size_t row, const std::string& image_path,
                                     const std::string& patient_id, const std::string& view,
                                     std::optional<int> birads, const std::string& birads_text,
                                     std::optional<int> density, bool density_bad,
                                     const std::string& dataset) {
    const std::size_t before = problems.size();
    auto fail = [&](const std::string& why) {
      problems.push_back("row " + std::to_string(row) + ": " + why);
    };
    if (image_path.empty()) fail("empty image_path");
    if (patient_id.empty()) fail("empty patient_id");
    if (!is_known_view(view)) fail("unknown view '" + view + "'");
    if (!birads || !BiradsLabel::valid(*birads)) fail("invalid BI-RADS value '" + birads_text + "'");
    if (density_bad) fail("invalid density");
    if (!image_path.empty() && !seen_paths.insert(image_path).second)
      fail("duplicate image_path '" + image_path + "'");
    if (problems.size() != before) return std::nullopt;
    return LabeledSample{image_path, patient_id, view, BiradsLabel::from_int(*birads), density, dataset};
  }

  void raise_if_any(const std::string& source) const {
    if (problems.empty()) return;
    std::string msg = source + ": " + std::to_string(problems.size()) + " invalid row(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataValidationError(msg);
  }
};

std::optional<int> parse_density(const std::string& s, bool& bad) {
  bad = false;
  if (s.empty()) return std::nullopt;
  const auto v = parse_int(s);
  if (!v || *v < 1 || *v > 4) {
    bad = true;
    return std::nullopt;
  }
  return v;
}

Manifest parse_manifest_jsonl(const std::string& text, const std::string& name) {
  Manifest m;
  m.name = name;
  RowValidator validator;
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      validator.problems.push_back("row " + std::to_string(row) + ": not valid JSON");
      continue;
    }
    auto str = [&](const char* key) {
      return j.contains(key) && j[key].is_string() ? j[key].get<std::string>() : std::string();
    };
    std::optional<int> birads;
    std::string birads_text = j.contains("birads") ? j["birads"].dump() : "missing";
    if (j.contains("birads") && j["birads"].is_number_integer()) birads = j["birads"].get<int>();
    bool density_bad = false;
    std::optional<int> density;
    if (j.contains("density") && !j["density"].is_null()) {
      if (j["density"].is_number_integer()) density = parse_density(std::to_string(j["density"].get<int>()), density_bad);
      else density_bad = true;
    }
    if (auto s = validator.check(row, str("image_path"), str("patient_id"), str("view"), birads, birads_text,
                                 density, density_bad, str("dataset")))
      m.samples.push_back(std::move(*s));
  }
  validator.raise_if_any(name.empty() ? "manifest" : name);
  return m;
}

fs::path meta_path(const fs::path& path) { return fs::path(path.string() + ".meta.json"); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataValidationError("cannot read manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

bool is_standard_view(const std::string& view) {
  return std::find(kStandardViews.begin(), kStandardViews.end(), view) != kStandardViews.end();
}

bool is_known_view(const std::string& view) {
  if (is_standard_view(view)) return true;
  if (view.size() < 2 || (view[0] != 'L' && view[0] != 'R')) return false;
  const std::string rest = view.substr(1);
  return std::find(kOtherProjections.begin(), kOtherProjections.end(), rest) != kOtherProjections.end();
}

std::map<int, std::size_t> Manifest::counts() const {
  std::map<int, std::size_t> c;
  for (const auto& s : samples) ++c[s.birads.value()];
  return c;
}

Manifest parse_manifest_csv(const std::string& text, const std::string& name) {
  const auto rows = parse_csv(text);
  if (rows.empty()) throw DataValidationError("manifest: missing header");
  const auto& header = rows.front();
  if (header.size() != kColumns.size() || !std::equal(header.begin(), header.end(), kColumns.begin()))
    throw DataValidationError("manifest: header must be image_path,patient_id,view,birads,density,dataset");
  Manifest m;
  m.name = name;
  RowValidator validator;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (f.size() != kColumns.size()) {
      validator.problems.push_back("row " + std::to_string(r) + ": expected 6 fields, found " +
                                   std::to_string(f.size()));
      continue;
    }
    bool density_bad = false;
    const auto density = parse_density(f[4], density_bad);
    if (auto s = validator.check(r, f[0], f[1], f[2], parse_int(f[3]), f[3], density, density_bad, f[5]))
      m.samples.push_back(std::move(*s));
  }
  validator.raise_if_any(name.empty() ? "manifest" : name);
  return m;
}

Manifest load_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  const std::string name = path.stem().string();
  Manifest m = path.extension() == ".jsonl" ? parse_manifest_jsonl(text, name) : parse_manifest_csv(text, name);
  const fs::path meta = meta_path(path);
  if (fs::exists(meta)) {
    json j;
    try {
      j = json::parse(read_file(meta));
    } catch (const json::exception&) {
      throw DataValidationError("manifest sidecar " + meta.string() + " is not valid JSON");
    }
    if (j.contains("name") && j["name"].is_string()) m.name = j["name"].get<std::string>();
    std::map<int, std::size_t> stored;
    const json counts = j.value("counts", json::object());
    try {
      for (const auto& [k, v] : counts.items()) stored[std::stoi(k)] = v.get<std::size_t>();
    } catch (const std::exception&) {
      throw DataValidationError("manifest sidecar " + meta.string() + " has malformed counts");
    }
    if (stored != m.counts())
      throw DataValidationError("manifest " + path.string() + ": stored class counts do not match rows");
  }
  return m;
}

std::string format_manifest_csv(const Manifest& manifest) {
  std::string out = "image_path,patient_id,view,birads,density,dataset\n";
  for (const auto& s : manifest.samples) {
    out += csv_field(s.image_path) + ',' + csv_field(s.patient_id) + ',' + csv_field(s.view) + ',' +
           std::to_string(s.birads.value()) + ',' + (s.density ? std::to_string(*s.density) : std::string()) +
           ',' + csv_field(s.dataset) + '\n';
  }
  return out;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataValidationError("cannot write manifest " + path.string());
    out << format_manifest_csv(manifest);
  }
  json counts = json::object();
  for (const auto& [k, v] : manifest.counts()) counts[std::to_string(k)] = v;
  std::ofstream meta(meta_path(path), std::ios::binary | std::ios::trunc);
  meta << json{{"name", manifest.name}, {"counts", counts}}.dump(2) << '\n';
}

std::size_t mark_missing_paths(Manifest& manifest, const fs::path& base) {
  std::size_t n = 0;
  for (auto& s : manifest.samples) {
    const fs::path p = fs::path(s.image_path).is_absolute() ? fs::path(s.image_path) : base / s.image_path;
    s.missing = !fs::exists(p);
    n += s.missing;
  }
  return n;
}

ViewFilterResult filter_views(const Manifest& manifest) {
  ViewFilterResult r;
  r.manifest.name = manifest.name;
  for (const auto& s : manifest.samples) {
    if (is_standard_view(s.view)) {
      r.manifest.samples.push_back(s);
    } else {
      ++r.removed_by_view[s.view];
      ++r.removed;
    }
  }
  return r;
}

Manifest cap_class_counts(const Manifest& manifest, std::size_t cap, const std::vector<int>& capped_labels,
                          std::uint64_t seed, CapMode mode) {
  std::vector<bool> keep(manifest.samples.size(), true);
  for (int label : capped_labels) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i)
      if (manifest.samples[i].birads.value() == label) idx.push_back(i);
    if (idx.size() <= cap) continue;
    Rng rng(derive_seed(seed, "cap/" + std::to_string(label)));
    std::vector<bool> chosen(manifest.samples.size(), false);
    std::size_t taken = 0;
    if (mode == CapMode::patient_coherent) {
      std::vector<std::string> patients;
      std::unordered_map<std::string, std::vector<std::size_t>> by_patient;
      for (std::size_t i : idx) {
        auto& v = by_patient[manifest.samples[i].patient_id];
        if (v.empty()) patients.push_back(manifest.samples[i].patient_id);
        v.push_back(i);
      }
      rng.shuffle(patients);
      for (const auto& p : patients) {
        const auto& v = by_patient[p];
        if (taken + v.size() > cap) continue;
        for (std::size_t i : v) chosen[i] = true;
        taken += v.size();
        if (taken == cap) break;
      }
    }
    // Image-level draw, also used to top up when whole patients no longer fit.
    std::vector<std::size_t> rest;
    for (std::size_t i : idx)
      if (!chosen[i]) rest.push_back(i);
    rng.shuffle(rest);
    for (std::size_t k = 0; taken < cap && k < rest.size(); ++k, ++taken) chosen[rest[k]] = true;
    for (std::size_t i : idx) keep[i] = chosen[i];
  }
  Manifest out;
  out.name = manifest.name;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i)
    if (keep[i]) out.samples.push_back(manifest.samples[i]);
  return out;
}

}  // namespace mammovl::data
