#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/predictive.hpp"

namespace introspect {

enum class Measure { confidence, entropy, mutual_information };

std::string to_string(Measure m);
Measure parse_measure(const std::string& s);

/// Separability score oriented so that larger means "more likely correct /
/// in-distribution": conf, -entropy or -mi.
double score(const Prediction& p, Measure m);

struct MetricsConfig {
  std::size_t bins = 15;
  Measure measure = Measure::confidence;
  bool require_ood = false;
};

void validate(const MetricsConfig& cfg);

/// Equal-width bin of v over [lo, hi]: bin b covers (lo + b·w, lo + (b+1)·w],
/// bin 0 also takes lo. Edges are compared exactly. Values outside the range
/// are clamped.
std::size_t bin_index(double v, std::size_t bins, double lo = 0.0, double hi = 1.0);

struct Calibration {
  double ece = 0.0;
  double mce = 0.0;
};

/// Empty bins are skipped for both ECE and MCE. Throws ConfigError on empty input.
Calibration ece_mce(std::span<const double> confidence, std::span<const bool> correct, std::size_t bins);
/// Uses max(mean) as confidence and argmax(mean) == y as correctness.
Calibration ece_mce(std::span<const Prediction> preds, std::size_t bins);

struct ProperScores {
  double nll = 0.0;
  double brier = 0.0;
  std::vector<std::size_t> flagged;  // items with p(true) = 0; nll is +inf if non-empty
};

ProperScores nll_brier(std::span<const Prediction> preds);

struct Separability {
  double auroc = 0.0;
  double aupr = 0.0;
};

/// AUROC by average ranks; AUPR as average precision with tied scores grouped.
/// Positives are the class to detect. Throws ConfigError if either side is empty.
Separability auroc_aupr(std::span<const double> positives, std::span<const double> negatives);

enum class PredictionType { correct, misclassified, ood };

struct Histogram {
  Measure measure = Measure::confidence;
  double lo = 0.0;
  double hi = 1.0;
  // [type][bin], each type normalized by its own total (all zero when empty)
  std::vector<std::vector<double>> freq;
  std::vector<std::size_t> totals;
};

struct MetricsReport {
  std::size_t n_test = 0;
  std::size_t n_ood = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  std::vector<std::size_t> nll_flagged;
  std::optional<double> ece_with_ood;
  std::optional<double> mce_with_ood;
  std::optional<double> auroc_misclassification;
  std::optional<double> aupr_misclassification;
  std::optional<double> auroc_ood;
  std::optional<double> aupr_ood;
  std::map<std::string, std::string> absent;  // field -> reason
  Histogram histogram;
};

/// Test predictions must be labelled; ood predictions are treated as always
/// incorrect for the "with OOD" calibration figures.
MetricsReport evaluate(std::span<const Prediction> test, std::span<const Prediction> ood,
                       const MetricsConfig& cfg);

enum class SeparabilityTarget { misclassification, ood };

struct MeasureChoice {
  Measure measure = Measure::confidence;
  double auroc = 0.0;
};

/// Measure with the highest AUROC for the target; ties keep the earlier of
/// confidence, entropy, mutual information.
MeasureChoice best_measure(std::span<const Prediction> test, std::span<const Prediction> ood,
                           SeparabilityTarget target);

void save_report(const MetricsReport& report, const std::filesystem::path& path);
/// bin_low,bin_high,correct,misclassified,ood
void save_histogram_csv(const Histogram& h, const std::filesystem::path& path);

}  // namespace introspect
