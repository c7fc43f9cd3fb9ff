#pragma once

#include "mammovl/birads.hpp"
#include "mammovl/data/manifest.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mammovl {

struct F1Result {
  std::vector<double> f1;
  std::vector<std::size_t> support;  // true count per class
  std::vector<bool> undefined;       // TP + FP + FN == 0, scored as 0
};

/// Per-class F1 = 2TP / (2TP + FP + FN). Throws ContractError on length
/// mismatch or out-of-range class indices.
F1Result f1_scores(std::span<const int> predictions, std::span<const int> truths, int k);

/// Unweighted mean. Throws ContractError when empty.
double macro_f1(std::span<const double> per_class);

/// Population standard deviation (divides by the number of values).
double population_std(std::span<const double> values);

enum class SplitGranularity { patient, image };

struct FoldAssignment {
  int k = 4;
  SplitGranularity granularity = SplitGranularity::patient;
  std::vector<int> sample_fold;               // fold of each input sample
  std::map<std::string, int> patient_fold;    // patient mode only

  std::vector<std::size_t> test_indices(int fold) const;
  std::vector<std::size_t> train_indices(int fold) const;
};

/// Patient-level k-fold partition, stratified by each patient's most common
/// BI-RADS label and dealt round-robin so fold sizes differ by at most one
/// patient. Throws SplitError when there are fewer than k patients (or
/// samples, in image mode).
FoldAssignment kfold_split(std::span<const data::LabeledSample> samples, int k = 4, std::uint64_t seed = 0,
                           SplitGranularity granularity = SplitGranularity::patient);

/// Integer class targets under a scheme. Throws ContractError naming the
/// first sample whose label is excluded.
std::vector<int> map_labels(std::span<const data::LabeledSample> samples, const ClassScheme& scheme);

/// Drops samples whose label the scheme excludes.
data::Manifest drop_excluded(const data::Manifest& manifest, const ClassScheme& scheme);

enum class Arm { vlm, baseline };
std::string arm_name(Arm arm);

struct FoldMetrics {
  int fold = 0;
  std::vector<double> per_class_f1;
  std::vector<std::size_t> support;
  std::vector<bool> undefined;
  double macro_f1 = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

FoldMetrics fold_metrics(int fold, std::span<const int> predictions, std::span<const int> truths, int k);

struct MetricReport {
  std::string scheme;
  Arm arm = Arm::vlm;
  std::optional<std::size_t> budget;  // nullopt = ALL
  std::size_t train_images = 0;       // exact images used (max over folds)
  std::vector<FoldMetrics> folds;
  double mean = 0.0;
  double std = 0.0;

  /// "ALL (n)" or the requested budget.
  std::string budget_label() const;
};

/// Fills mean and population std from the fold macro-F1 values.
void summarize(MetricReport& report);

nlohmann::json to_json(const MetricReport& report);
/// Aligned text table with columns arm, n, mean, std.
std::string render_table(std::span<const MetricReport> reports);
/// CSV "arm,n,mean,std".
std::string render_csv(std::span<const MetricReport> reports);
/// CSV "budget,arm,mean,std,fold_1..fold_k" for plotting learning curves.
std::string learning_curve_csv(std::span<const MetricReport> reports);

}  // namespace mammovl
