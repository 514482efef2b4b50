#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "introspect/bnn.hpp"
#include "introspect/numerics.hpp"

namespace introspect {

/// Per-layer Kronecker factors of the empirical Fisher.
///   a[l]: E[ā āᵀ], (fan_in+1)², ā = [input; 1]
///   g[l]: E[g gᵀ], fan_out², g = dNLL/d(pre-activation) at the true label
struct KfacFactors {
  std::vector<Matrix> a;
  std::vector<Matrix> g;
  std::size_t samples = 0;
};

/// Running means over `data` in item order, deterministic forward.
/// Throws ConfigError on empty data.
KfacFactors accumulate_kfac(const CdpParams& params, std::span<const Sample> data);

struct LaplaceLayer {
  Matrix mean;      // (fan_in+1) x fan_out, last row is the bias
  Matrix row_chol;  // chol(√n·E[A] + √τ·I)
  Matrix col_chol;  // chol(√n·E[G] + √τ·I)
};

/// Matrix-normal posterior per layer: vec(W - W*) ~ N(0, R⁻¹ ⊗ C⁻¹).
/// `point` keeps shapes, variant and dropout logits of the fitted network.
struct LaplacePosterior {
  CdpParams point;
  std::vector<LaplaceLayer> layers;
  double n_scale = 1.0;
  double tau = 15.0;
};

/// Throws ConfigError for n_scale ≤ 0 or tau < 0, NumericalError when a
/// regularized factor is not positive definite.
LaplacePosterior posterior(const KfacFactors& factors, const CdpParams& params, double n_scale,
                           double tau);

/// W* with the bias appended as the last row.
Matrix homogeneous_weights(const DenseLayer& layer);

/// One draw per layer: W* + L_R⁻ᵀ Z L_C⁻¹. Layer l consumes stream.derive(l).
std::vector<Matrix> sample_weights(const LaplacePosterior& post, const RngStream& stream);

/// Point parameters with weights and biases replaced by `weights`.
CdpParams with_weights(const LaplacePosterior& post, const std::vector<Matrix>& weights);

CdpParams sample_params(const LaplacePosterior& post, const RngStream& stream);

void save_posterior(const LaplacePosterior& post, const std::filesystem::path& path);
LaplacePosterior load_posterior(const std::filesystem::path& path);

}  // namespace introspect
