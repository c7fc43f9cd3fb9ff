#include "mammovl/evaluation.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace mammovl {

using nlohmann::json;

F1Result f1_scores(std::span<const int> predictions, std::span<const int> truths, int k) {
  if (predictions.size() != truths.size())
    throw ContractError("f1_scores: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(truths.size()) + " truths");
  if (k < 1) throw ContractError("f1_scores: k must be positive");
  std::vector<std::size_t> tp(k), fp(k), fn(k);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int p = predictions[i], t = truths[i];
    if (p < 0 || p >= k || t < 0 || t >= k) throw ContractError("f1_scores: class index outside [0, k)");
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  F1Result r;
  for (int c = 0; c < k; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    r.undefined.push_back(denom == 0);
    r.f1.push_back(denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom));
    r.support.push_back(tp[c] + fn[c]);
  }
  return r;
}

double macro_f1(std::span<const double> per_class) {
  if (per_class.empty()) throw ContractError("macro_f1: empty score vector");
  double sum = 0.0;
  for (double v : per_class) sum += v;
  return sum / static_cast<double>(per_class.size());
}

double population_std(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

std::vector<std::size_t> FoldAssignment::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sample_fold.size(); ++i)
    if (sample_fold[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldAssignment::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sample_fold.size(); ++i)
    if (sample_fold[i] != fold) out.push_back(i);
  return out;
}

FoldAssignment kfold_split(std::span<const data::LabeledSample> samples, int k, std::uint64_t seed,
                           SplitGranularity granularity) {
  if (k < 2) throw SplitError("kfold_split: k must be at least 2");
  FoldAssignment fa;
  fa.k = k;
  fa.granularity = granularity;
  fa.sample_fold.assign(samples.size(), -1);

  // Units are patients (or single images); each unit gets a stratum label.
  std::vector<std::string> units;
  std::unordered_map<std::string, std::size_t> unit_of;
  std::vector<std::array<int, 7>> label_counts;
  std::vector<std::size_t> sample_unit(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string key = granularity == SplitGranularity::patient ? samples[i].patient_id : std::to_string(i);
    auto [it, inserted] = unit_of.try_emplace(key, units.size());
    if (inserted) {
      units.push_back(key);
      label_counts.push_back({});
    }
    sample_unit[i] = it->second;
    ++label_counts[it->second][static_cast<std::size_t>(samples[i].birads.value())];
  }
  if (units.size() < static_cast<std::size_t>(k))
    throw SplitError("kfold_split: " + std::to_string(units.size()) + " " +
                     (granularity == SplitGranularity::patient ? "patients" : "images") + " for k=" +
                     std::to_string(k));

  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t u = 0; u < units.size(); ++u) {
    const auto& c = label_counts[u];
    int mode = 0;
    for (int l = 1; l < 7; ++l)
      if (c[static_cast<std::size_t>(l)] >= c[static_cast<std::size_t>(mode)]) mode = l;
    strata[mode].push_back(u);
  }
  Rng rng(derive_seed(seed, "kfold"));
  std::vector<int> unit_fold(units.size());
  std::size_t dealt = 0;
  for (auto& [label, members] : strata) {
    rng.shuffle(members);
    for (std::size_t u : members) unit_fold[u] = static_cast<int>(dealt++ % static_cast<std::size_t>(k));
  }
  for (std::size_t i = 0; i < samples.size(); ++i) fa.sample_fold[i] = unit_fold[sample_unit[i]];
  if (granularity == SplitGranularity::patient)
    for (std::size_t u = 0; u < units.size(); ++u) fa.patient_fold[units[u]] = unit_fold[u];
  return fa;
}

std::vector<int> map_labels(std::span<const data::LabeledSample> samples, const ClassScheme& scheme) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto c = map_label(s.birads, scheme);
    if (!c)
      throw ContractError("label BI-RADS " + std::to_string(s.birads.value()) + " of " + s.image_path +
                          " is excluded under scheme " + scheme.label() + "; filter it before training");
    out.push_back(*c);
  }
  return out;
}

data::Manifest drop_excluded(const data::Manifest& manifest, const ClassScheme& scheme) {
  data::Manifest out;
  out.name = manifest.name;
  for (const auto& s : manifest.samples)
    if (map_label(s.birads, scheme)) out.samples.push_back(s);
  return out;
}

std::string arm_name(Arm arm) { return arm == Arm::vlm ? "VLM" : "baseline"; }

FoldMetrics fold_metrics(int fold, std::span<const int> predictions, std::span<const int> truths, int k) {
  const F1Result r = f1_scores(predictions, truths, k);
  FoldMetrics m;
  m.fold = fold;
  m.per_class_f1 = r.f1;
  m.support = r.support;
  m.undefined = r.undefined;
  m.macro_f1 = macro_f1(r.f1);
  m.test_size = truths.size();
  return m;
}

std::string MetricReport::budget_label() const {
  return budget ? std::to_string(*budget) : "ALL (" + std::to_string(train_images) + ")";
}

void summarize(MetricReport& report) {
  std::vector<double> v;
  for (const auto& f : report.folds) v.push_back(f.macro_f1);
  report.mean = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  report.std = population_std(v);
}

json to_json(const MetricReport& report) {
  json folds = json::array();
  for (const auto& f : report.folds) {
    folds.push_back({{"fold", f.fold},
                     {"per_class_f1", f.per_class_f1},
                     {"support", f.support},
                     {"zero_support", f.undefined},
                     {"macro_f1", f.macro_f1},
                     {"train_size", f.train_size},
                     {"test_size", f.test_size}});
  }
  return {{"scheme", report.scheme},
          {"arm", arm_name(report.arm)},
          {"budget", report.budget ? json(*report.budget) : json("ALL")},
          {"train_images", report.train_images},
          {"folds", folds},
          {"macro_f1_mean", report.mean},
          {"macro_f1_std", report.std},
          {"std_kind", "population"}};
}

namespace {

std::string fixed3(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

}  // namespace

std::string render_table(std::span<const MetricReport> reports) {
  std::vector<std::array<std::string, 4>> rows{{"arm", "n", "mean", "std"}};
  for (const auto& r : reports) rows.push_back({arm_name(r.arm), r.budget_label(), fixed3(r.mean), fixed3(r.std)});
  std::array<std::size_t, 4> width{};
  for (const auto& row : rows)
    for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      out << (c ? "  " : "");
      if (c < 2) out << std::left << std::setw(static_cast<int>(width[c])) << rows[i][c];
      else out << std::right << std::setw(static_cast<int>(width[c])) << rows[i][c];
    }
    out << '\n';
    if (i == 0) out << std::string(width[0] + width[1] + width[2] + width[3] + 6, '-') << '\n';
  }
  return out.str();
}

std::string render_csv(std::span<const MetricReport> reports) {
  std::ostringstream out;
  out << "arm,n,mean,std\n";
  out << std::setprecision(17);
  for (const auto& r : reports)
    out << arm_name(r.arm) << ',' << (r.budget ? std::to_string(*r.budget) : "ALL") << ',' << r.mean << ',' << r.std
        << '\n';
  return out.str();
}

std::string learning_curve_csv(std::span<const MetricReport> reports) {
  std::size_t k = 0;
  for (const auto& r : reports) k = std::max(k, r.folds.size());
  std::ostringstream out;
  out << "budget,train_images,arm,mean,std";
  for (std::size_t f = 0; f < k; ++f) out << ",fold_" << f + 1;
  out << '\n' << std::setprecision(17);
  for (const auto& r : reports) {
    out << (r.budget ? std::to_string(*r.budget) : "ALL") << ',' << r.train_images << ',' << arm_name(r.arm) << ','
        << r.mean << ',' << r.std;
    for (std::size_t f = 0; f < k; ++f) {
      out << ',';
      if (f < r.folds.size()) out << r.folds[f].macro_f1;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace mammovl
