#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/bnn.hpp"
#include "introspect/crf.hpp"
#include "introspect/dataio.hpp"
#include "introspect/metrics.hpp"
#include "introspect/predictive.hpp"

namespace introspect {

enum class BalancePolicy { none, jitter_duplicate };

std::string to_string(BalancePolicy p);
BalancePolicy parse_balance_policy(const std::string& s);

struct AdaptConfig {
  double target_accuracy = 0.95;
  double calib_fraction = 0.01;  // of the pool, when the target has no calibration split
  double manual_fraction = 0.03;  // of the pool left after calibration, drawn from items not auto-labelled
  bool auto_label = true;
  std::optional<double> auto_fraction_cap;     // of the pool left after calibration
  std::optional<std::size_t> top_k_per_class;  // per pseudo-label class
  Measure gating = Measure::confidence;
  BalancePolicy balance = BalancePolicy::jitter_duplicate;
  double jitter_scale = 0.1;
  std::size_t mc_samples = 50;
  std::size_t rounds = 1;
  Variant variant = Variant::cdp;
  TrainConfig base;       // its stream is replaced by stream.derive(0)
  TrainConfig fine_tune;  // its stream is replaced per condition and round
  RngStream stream{0, 0};
};

void validate(const AdaptConfig& cfg);

struct CalibrationPoint {
  double score = 0.0;
  bool correct = false;
};

struct Threshold {
  double value = 0.0;
  bool qualified = false;  // false: no candidate reached the target, auto set must be empty
};

/// Smallest observed score δ with accuracy over {score ≥ δ} at least `target`.
/// Otherwise the next double above the maximum score, unqualified.
Threshold calibrate_threshold(std::span<const CalibrationPoint> points, double target);

struct AutoLabelOptions {
  Measure gating = Measure::confidence;
  std::optional<std::size_t> top_k_per_class;
  std::optional<std::size_t> max_items;  // keeps the highest scores
};

struct PseudoLabel {
  std::size_t index = 0;  // into the prediction list
  int label = 0;
  double score = 0.0;

  friend bool operator==(const PseudoLabel&, const PseudoLabel&) = default;
};

/// Items with score ≥ δ, labelled argmax(mean), in index order.
std::vector<PseudoLabel> auto_label(std::span<const Prediction> preds, double delta,
                                    const AutoLabelOptions& opts = {});

/// Ground truth of the unlabeled pool. Training-path code reads labels only
/// through query(), which records every index it answers.
class LabelOracle {
 public:
  LabelOracle() = default;
  explicit LabelOracle(std::vector<std::optional<int>> labels) : labels_(std::move(labels)) {}

  int query(std::size_t index);
  const std::vector<std::size_t>& queried() const { return queried_; }
  std::size_t size() const { return labels_.size(); }

  /// Evaluation-only accuracy of pseudo labels whose index is an oracle index.
  double audit(std::span<const PseudoLabel> labels) const;

 private:
  std::vector<std::optional<int>> labels_;
  std::vector<std::size_t> queried_;
};

struct ManualLabel {
  std::size_t index = 0;
  int y = 0;

  friend bool operator==(const ManualLabel&, const ManualLabel&) = default;
};

struct ManualSelection {
  std::vector<ManualLabel> items;  // index order
  bool too_small = false;          // fraction·pool_size < 1 with fraction > 0
};

/// Uniform sample without replacement of floor(fraction·pool_size) of the
/// candidates (all of them if fewer), labelled by the oracle. pool_size
/// defaults to |candidates|.
ManualSelection manual_label(std::span<const std::size_t> candidates, double fraction, LabelOracle& oracle,
                             RngStream stream, std::optional<std::size_t> pool_size = std::nullopt);

struct TrainingItem {
  std::vector<double> x;
  int y = 0;
  std::size_t source = 0;  // pool index of the original item
  bool duplicate = false;

  friend bool operator==(const TrainingItem&, const TrainingItem&) = default;
};

/// jitter_duplicate appends noisy copies (σ = jitter_scale) of randomly chosen
/// members of every represented class until it reaches the majority count.
std::vector<TrainingItem> balance(std::vector<TrainingItem> items, std::size_t c, BalancePolicy policy,
                                  double jitter_scale, RngStream stream);

std::vector<std::size_t> class_counts(std::span<const TrainingItem> items, std::size_t c);

/// Scenes built from test predictions of the adapted model.
struct ContextSpec {
  std::vector<std::vector<int>> groups;
  std::size_t min_instances = 3;
  std::size_t max_instances = 6;
  bool self_cooccurrence = true;
  CrfParams crf;
  LbpConfig lbp;
};

struct RoundReport {
  double threshold = 0.0;
  bool threshold_qualified = false;
  std::size_t auto_set_size = 0;
  std::optional<double> auto_set_accuracy;  // audited
  std::size_t manual_set_size = 0;
  std::vector<std::size_t> counts_before;
  std::vector<std::size_t> counts_after;
  double test_accuracy = 0.0;
};

struct ConditionAccuracy {
  double no_finetune = 0.0;
  double auto_only = 0.0;
  double manual_only = 0.0;
  double auto_manual = 0.0;
};

struct AdaptReport {
  std::size_t pool_size = 0;  // excluding calibration
  std::size_t calibration_size = 0;
  double threshold = 0.0;
  bool threshold_qualified = false;
  std::size_t auto_set_size = 0;
  std::optional<double> auto_set_accuracy;
  std::size_t manual_set_size = 0;
  std::vector<std::size_t> counts_before;
  std::vector<std::size_t> counts_after;
  ConditionAccuracy accuracy;
  std::optional<double> context_argmax_accuracy;
  std::optional<double> crf_smoothed_accuracy;
  std::vector<RoundReport> rounds;
  std::vector<std::string> warnings;
};

/// Indices are positions in the target dataset's item list.
struct AdaptAudit {
  std::vector<std::size_t> calibration;
  std::vector<Threshold> thresholds;  // per round
  std::vector<std::vector<PseudoLabel>> auto_sets;
  std::vector<std::vector<ManualLabel>> manual_sets;
};

struct AdaptOutcome {
  AdaptReport report;
  AdaptAudit audit;
  CdpParams base;
  CdpParams adapted;  // auto+manual model after the last round
  std::vector<Prediction> test_predictions;  // of `adapted`
};

/// Runs the full pipeline. `source` supplies train/validation splits; `target`
/// supplies pool, test and optionally calibration splits. Stage failures are
/// rethrown with the stage name prepended.
AdaptOutcome run_adaptation(const AdaptConfig& cfg, const Dataset& source, const Dataset& target,
                            std::optional<CdpParams> base = std::nullopt,
                            const std::optional<ContextSpec>& context = std::nullopt);

void save_adapt_report(const AdaptReport& report, const std::filesystem::path& path);
/// calibration.csv, auto_set.csv, manual_set.csv and thresholds.csv under `dir`.
void save_audit(const AdaptAudit& audit, const std::filesystem::path& dir);

}  // namespace introspect
