#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/dataio.hpp"
#include "introspect/numerics.hpp"

namespace introspect {

/// Training flavour of a network.
///  - cdp: concrete dropout, dropout rates learned through the relaxation.
///  - deterministic_dropout: dropout during training at a fixed rate.
///  - plain: no dropout layers at all.
enum class Variant { cdp, deterministic_dropout, plain };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct DenseLayer {
  Matrix w;                   // fan_in x fan_out
  std::vector<double> b;      // fan_out
  std::optional<double> rho;  // dropout logit on this layer's inputs, p = sigmoid(rho)

  std::size_t fan_in() const { return w.rows(); }
  std::size_t fan_out() const { return w.cols(); }
  bool has_dropout() const { return rho.has_value(); }
  double rate() const;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Weights, biases and per-layer dropout logits of a ReLU MLP. The last layer
/// emits logits.
struct CdpParams {
  std::size_t d = 0;
  std::size_t c = 0;
  Variant variant = Variant::cdp;
  std::vector<DenseLayer> layers;

  friend bool operator==(const CdpParams&, const CdpParams&) = default;
};

/// Throws SchemaError if layer shapes do not chain from d to c.
void validate(const CdpParams& params, const std::string& path = {});

struct Architecture {
  std::vector<std::size_t> hidden{64, 64};
  double init_std = 0.1;
  double init_rate = 0.1;
};

/// Gaussian(0, init_std²) weights, zero biases; dropout on the inputs of every
/// layer after the first unless the variant is `plain`.
CdpParams init_params(std::size_t d, std::size_t c, Variant variant, const Architecture& arch,
                      RngStream stream);

double sigmoid(double x);

/// Relaxed Bernoulli draw, z̃ = sigmoid((logit p + logit u) / t). Values near
/// 1 mean "drop": a dropout layer scales its inputs by (1 - z̃)/(1 - p).
/// Throws if p or u lie outside (0,1) or t ≤ 0.
double concrete_mask(double p, double t, double u);

enum class ForwardMode { stochastic, deterministic };

struct LayerTrace {
  std::vector<double> input;  // activation entering the layer, before dropout
  std::vector<double> mask;   // z̃ per input unit; empty when no mask was applied
  std::vector<double> pre;    // pre-activation s = x̃ W + b
  std::vector<double> out;    // relu(pre), or pre for the last layer
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

struct ForwardResult {
  std::vector<double> logits;
  ForwardTrace trace;
};

/// Per layer z̃ vectors; an empty entry means no mask on that layer.
using MaskSet = std::vector<std::vector<double>>;

MaskSet sample_masks(const CdpParams& params, double temperature, RngStream& stream);

/// Deterministic mode applies no masks (every dropout factor is 1).
ForwardResult forward(const CdpParams& params, std::span<const double> x, ForwardMode mode,
                      RngStream& stream, double temperature = 0.1);
ForwardResult forward_with_masks(const CdpParams& params, std::span<const double> x,
                                 const MaskSet& masks);
std::vector<double> logits_deterministic(const CdpParams& params, std::span<const double> x);

struct Sample {
  std::span<const double> x;
  int y = 0;
};

/// Views into `data` for every item tagged `split`.
std::vector<Sample> samples(const Dataset& data, Split split);
std::vector<Sample> samples(const std::vector<Item>& items);

struct TrainConfig {
  std::size_t dataset_size = 0;  // N of the mini-batch estimator; 0 = training set size
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double rms_decay = 0.9;
  double l2 = 3.5e-6;
  double dropout_reg = 1e-5;
  double temperature = 0.1;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  Architecture arch;
  RngStream stream{0, 0};
};

/// Checks all invariants of TrainConfig; throws ConfigError.
void validate(const TrainConfig& cfg);

/// Per-layer back-propagated gradients of the loss w.r.t. each pre-activation.
using PreactivationGrads = std::vector<std::vector<double>>;

/// Back-propagates `dlogits` through a recorded forward pass. Parameter
/// gradients are added into `grads` when non-null (its rho fields receive
/// dLoss/drho through the concrete relaxation).
PreactivationGrads backprop(const CdpParams& params, const ForwardTrace& trace,
                            std::span<const double> dlogits, double temperature,
                            CdpParams* grads);

/// Gradient-shaped zero copy of `params` (rho fields zero where present).
CdpParams zeros_like(const CdpParams& params);

struct ElboTerms {
  double loss = 0.0;
  double data = 0.0;         // (N/K) Σ NLL
  double regularizer = 0.0;
  CdpParams grads;
};

/// Σ over dropout layers of l2‖W‖²/(1-p) + dropout_reg·fan_in·(p log p + (1-p) log(1-p)),
/// plus l2‖W‖² for layers without dropout and l2‖b‖² for every layer.
double regularizer(const CdpParams& params, const TrainConfig& cfg);

/// Mini-batch ELBO estimate with one mask sample per dropout layer shared by
/// the whole batch. Throws NumericalError naming the layer if the loss is not
/// finite.
ElboTerms elbo_loss_and_grads(const CdpParams& params, std::span<const Sample> batch,
                              const TrainConfig& cfg, RngStream stream);

double mean_nll(const CdpParams& params, std::span<const Sample> data);
double accuracy(const CdpParams& params, std::span<const Sample> data);

struct TrainResult {
  CdpParams params;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_validation_nll = 0.0;
  std::vector<double> validation_nll;  // one entry per epoch, index 0 = initial
};

/// RMSprop from `init` with early stopping on validation NLL (deterministic
/// forward); returns the best-validation snapshot, which may be `init` itself.
TrainResult fit(CdpParams init, std::span<const Sample> train, std::span<const Sample> validation,
                const TrainConfig& cfg);

/// Fresh initialization from cfg.stream, then fit on the train/validation splits.
TrainResult train(const TrainConfig& cfg, const Dataset& data, Variant variant);

void save_model(const CdpParams& params, const std::filesystem::path& path);
CdpParams load_model(const std::filesystem::path& path);

}  // namespace introspect
