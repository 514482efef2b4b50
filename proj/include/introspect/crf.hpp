#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "introspect/dataio.hpp"
#include "introspect/errors.hpp"
#include "introspect/exec.hpp"

namespace introspect {

/// log p(y|x) = θ_u Σ_i unary_i(y_i) + θ_p Σ_{(i,j)∈E} M(y_i, y_j) - log Z.
struct CrfParams {
  double theta_u = 1.0;
  double theta_p = 1.0;
  friend bool operator==(const CrfParams&, const CrfParams&) = default;
};

struct LbpConfig {
  std::size_t max_iters = 100;
  double tol = 1e-6;
  double damping = 0.5;
};

void validate(const LbpConfig& cfg);

using Edge = std::pair<std::size_t, std::size_t>;
using EdgeList = std::vector<Edge>;

/// All unordered pairs i < j.
EdgeList full_edges(std::size_t n);

struct Beliefs {
  std::vector<std::vector<double>> node;
  std::vector<Matrix> pair;  // pair[e](a, b) = b(y_i = a, y_j = b) for edges[e] = (i, j)
  EdgeList edges;
  bool converged = false;
  std::size_t iters = 0;
};

/// Sum-product LBP: flooding schedule, log-space messages, damping in
/// probability space. `edges` defaults to the fully connected graph.
Beliefs lbp(const Scene& scene, const CrfParams& params, const LbpConfig& cfg,
            const EdgeList* edges = nullptr);

struct ExactMarginals {
  std::vector<std::vector<double>> node;
  std::vector<Matrix> pair;
  EdgeList edges;
  double log_z = 0.0;
};

/// Enumerates all Cⁿ labelings. Throws ConfigError beyond 10⁶ states.
ExactMarginals brute_force(const Scene& scene, const CrfParams& params, const EdgeList* edges = nullptr);

/// Bethe estimate of log Z from (approximate) beliefs.
double bethe_log_z(const Scene& scene, const CrfParams& params, const Beliefs& beliefs);

struct SceneFeatures {
  double unary = 0.0;  // Σ_i unary_i(y_i)
  double pair = 0.0;   // Σ_{(i,j)∈E} M(y_i, y_j)
};

SceneFeatures features(const Scene& scene, std::span<const int> labels, const EdgeList& edges);
std::vector<int> labels_of(const Scene& scene);

enum class Inference { lbp, exact };

struct CrfObjective {
  double nll = 0.0;  // batch mean; Bethe estimate under lbp
  double grad_u = 0.0;
  double grad_p = 0.0;
  bool approximate = false;
  std::size_t not_converged = 0;
};

/// Mean over the batch of -log p(y|x) and its gradient E[F] - F(observed).
CrfObjective nll_and_grad(std::span<const Scene> scenes, const CrfParams& params, Inference inference,
                          const LbpConfig& lbp_cfg = {}, Exec exec = Exec::parallel);

struct CrfTracePoint {
  std::size_t iter = 0;
  double nll = 0.0;
  double theta_u = 0.0;
  double theta_p = 0.0;
};

struct CrfTrainConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::size_t max_iters = 30000;
  CrfParams init{1.0, 1.0};
  LbpConfig lbp;
  std::size_t trace_every = 100;
  double divergence_bound = 1e3;
  RngStream stream{0, 0};
};

void validate(const CrfTrainConfig& cfg);

struct CrfTrainResult {
  CrfParams params;
  std::vector<CrfTracePoint> trace;
  std::size_t not_converged = 0;  // LBP runs that hit max_iters
};

/// Raised when |θ| exceeds the divergence bound; carries the trace so far.
class CrfDivergence : public NumericalError {
 public:
  CrfDivergence(const std::string& what, std::vector<CrfTracePoint> trace)
      : NumericalError(what), trace_(std::move(trace)) {}
  const std::vector<CrfTracePoint>& trace() const { return trace_; }

 private:
  std::vector<CrfTracePoint> trace_;
};

/// Momentum SGD over mini-batches of scenes with LBP gradients. Epoch e
/// shuffles with cfg.stream.derive(e).
CrfTrainResult train_crf(const SceneSet& set, const CrfTrainConfig& cfg, Exec exec = Exec::parallel);

struct Smoothed {
  std::vector<int> labels;
  std::vector<std::vector<double>> probs;
  bool converged = false;
};

/// Max-marginal labels (lowest index on ties) and node beliefs.
Smoothed smooth(const Scene& scene, const CrfParams& params, const LbpConfig& cfg = {});
std::vector<Smoothed> smooth_all(const SceneSet& set, const CrfParams& params, const LbpConfig& cfg = {},
                                 Exec exec = Exec::parallel);
double smoothed_accuracy(const SceneSet& set, const CrfParams& params, const LbpConfig& cfg = {},
                         Exec exec = Exec::parallel);

void save_crf(const CrfParams& params, const std::filesystem::path& path);
CrfParams load_crf(const std::filesystem::path& path);
/// iter,nll_estimate,theta_u,theta_p
void save_trace_csv(const std::vector<CrfTracePoint>& trace, const std::filesystem::path& path);

}  // namespace introspect
