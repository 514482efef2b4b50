#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "introspect/bnn.hpp"
#include "introspect/exec.hpp"
#include "introspect/laplace.hpp"

namespace introspect {

/// T softmax draws (rows) and their row mean.
struct PredictiveResult {
  Matrix sample_probs;
  std::vector<double> mean;
  std::size_t t() const { return sample_probs.rows(); }
};

struct UncertaintyMeasures {
  double confidence = 0.0;
  double entropy = 0.0;             // H[mean], nats
  double mutual_information = 0.0;  // H[mean] - mean_t H[row t]
};

struct Deterministic {
  CdpParams params;
};

struct CdpMasks {
  CdpParams params;
  double temperature = 0.1;
};

struct LaplaceWeights {
  LaplacePosterior post;
  bool redraw_per_item = false;  // default: one weight draw per MC pass shared by all items
};

using PosteriorSource = std::variant<Deterministic, CdpMasks, LaplaceWeights>;

/// Pass t draws from stream.derive(t). Throws ConfigError if t == 0.
PredictiveResult predict_mc(const PosteriorSource& source, std::span<const double> x, std::size_t t,
                            const RngStream& stream);

UncertaintyMeasures measures(const PredictiveResult& r);

/// Item i of a CDP or per-item Laplace batch uses stream.derive(i); shared
/// Laplace draw t uses stream.derive(t). Both Exec paths give identical bits.
std::vector<PredictiveResult> predict_batch(const PosteriorSource& source,
                                            std::span<const std::vector<double>> xs, std::size_t t,
                                            const RngStream& stream, Exec exec = Exec::parallel);

/// One line of the predictions interchange file.
struct Prediction {
  std::vector<double> mean;
  double conf = 0.0;
  double entropy = 0.0;
  double mi = 0.0;
  std::optional<int> y;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

Prediction make_prediction(const PredictiveResult& r, std::optional<int> y);

void save_predictions(const std::vector<Prediction>& preds, const std::filesystem::path& path);
/// Validates simplex means (1e-9), label range and measure ranges.
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace introspect
