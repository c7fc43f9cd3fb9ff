#pragma once

#include "mammovl/birads.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mammovl::data {

/// One labeled mammogram. `view` is a laterality+view code; the four
/// standard codes are LCC, LMLO, RCC, RMLO. Other recognised projections
/// (LML, RXCCL, ...) load fine and are removed by filter_views.
struct LabeledSample {
  std::string image_path;
  std::string patient_id;
  std::string view;
  BiradsLabel birads;
  std::optional<int> density;
  std::string dataset;
  bool missing = false;  // set by mark_missing_paths, not serialized

  bool operator==(const LabeledSample& o) const {
    return image_path == o.image_path && patient_id == o.patient_id && view == o.view &&
           birads == o.birads && density == o.density && dataset == o.dataset;
  }
};

bool is_standard_view(const std::string& view);
bool is_known_view(const std::string& view);

struct Manifest {
  std::string name;
  std::vector<LabeledSample> samples;

  /// Raw BI-RADS value -> image count.
  std::map<int, std::size_t> counts() const;
  bool operator==(const Manifest& o) const { return samples == o.samples; }
};

/// Reads CSV (header image_path,patient_id,view,birads,density,dataset) or,
/// for a .jsonl extension, JSON lines with the same keys. Row problems are
/// collected and thrown together as one DataValidationError. If a
/// `<path>.meta.json` sidecar exists its stored counts must match.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest_csv(const std::string& text, const std::string& name = {});

/// Writes CSV with LF line endings plus the counts sidecar.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
std::string format_manifest_csv(const Manifest& manifest);

/// Flags samples whose image cannot be found relative to `base`. Returns the
/// number flagged.
std::size_t mark_missing_paths(Manifest& manifest, const std::filesystem::path& base);

struct ViewFilterResult {
  Manifest manifest;
  std::map<std::string, std::size_t> removed_by_view;
  std::size_t removed = 0;
};

ViewFilterResult filter_views(const Manifest& manifest);

enum class CapMode { patient_coherent, image_level };

/// Down-samples each capped label whose count exceeds `cap` to exactly
/// `cap`, keeping input order. In patient-coherent mode whole patients are
/// kept while they fit; the remainder is topped up image by image.
Manifest cap_class_counts(const Manifest& manifest, std::size_t cap = 25000,
                          const std::vector<int>& capped_labels = {1, 2}, std::uint64_t seed = 0,
                          CapMode mode = CapMode::patient_coherent);

}  // namespace mammovl::data
