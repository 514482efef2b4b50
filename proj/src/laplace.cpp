#include "introspect/laplace.hpp"

#include <cmath>
#include <string>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

namespace {

void add_outer(Matrix& acc, std::span<const double> v, double weight) {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (v[i] == 0.0) continue;
    auto row = acc.row(i);
    const double s = weight * v[i];
    for (std::size_t j = 0; j < n; ++j) row[j] += s * v[j];
  }
}

Matrix regularized(const Matrix& m, double n_scale, double tau) {
  Matrix r = std::sqrt(n_scale) * m;
  const double shift = std::sqrt(tau);
  for (std::size_t i = 0; i < r.rows(); ++i) r(i, i) += shift;
  return r;
}

}  // namespace

KfacFactors accumulate_kfac(const CdpParams& params, std::span<const Sample> data) {
  if (data.empty()) throw ConfigError("accumulate_kfac: no data");
  KfacFactors f;
  for (const auto& layer : params.layers) {
    f.a.emplace_back(layer.fan_in() + 1, layer.fan_in() + 1);
    f.g.emplace_back(layer.fan_out(), layer.fan_out());
  }
  const double w = 1.0 / double(data.size());
  std::vector<double> abar;
  for (const auto& s : data) {
    const auto fr = forward_with_masks(params, s.x, {});
    auto dlogits = softmax(fr.logits);
    dlogits[static_cast<std::size_t>(s.y)] -= 1.0;
    const auto delta = backprop(params, fr.trace, dlogits, 1.0, nullptr);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      abar = fr.trace.layers[l].input;
      abar.push_back(1.0);
      add_outer(f.a[l], abar, w);
      add_outer(f.g[l], delta[l], w);
    }
  }
  f.samples = data.size();
  return f;
}

LaplacePosterior posterior(const KfacFactors& factors, const CdpParams& params, double n_scale,
                           double tau) {
  if (!(n_scale > 0.0) || !std::isfinite(n_scale)) throw ConfigError("n_scale must be positive");
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be non-negative");
  if (factors.a.size() != params.layers.size() || factors.g.size() != params.layers.size())
    throw ConfigError("Kronecker factors do not match the network");
  LaplacePosterior post;
  post.point = params;
  post.n_scale = n_scale;
  post.tau = tau;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (factors.a[l].rows() != layer.fan_in() + 1 || factors.g[l].rows() != layer.fan_out())
      throw ConfigError("Kronecker factor shape mismatch at layer " + std::to_string(l));
    LaplaceLayer pl;
    pl.mean = homogeneous_weights(layer);
    for (int which = 0; which < 2; ++which) {
      const Matrix& m = which == 0 ? factors.a[l] : factors.g[l];
      try {
        (which == 0 ? pl.row_chol : pl.col_chol) = cholesky(regularized(m, n_scale, tau));
      } catch (const DecompositionError& e) {
        throw NumericalError("laplace: " + std::string(which == 0 ? "row" : "column") +
                             " factor of layer " + std::to_string(l) +
                             " is not positive definite; increase tau (" + e.what() + ")");
      }
    }
    post.layers.push_back(std::move(pl));
  }
  return post;
}

Matrix homogeneous_weights(const DenseLayer& layer) {
  Matrix m(layer.fan_in() + 1, layer.fan_out());
  for (std::size_t i = 0; i < layer.fan_in(); ++i)
    for (std::size_t j = 0; j < layer.fan_out(); ++j) m(i, j) = layer.w(i, j);
  for (std::size_t j = 0; j < layer.fan_out(); ++j) m(layer.fan_in(), j) = layer.b[j];
  return m;
}

std::vector<Matrix> sample_weights(const LaplacePosterior& post, const RngStream& stream) {
  std::vector<Matrix> out;
  out.reserve(post.layers.size());
  for (std::size_t l = 0; l < post.layers.size(); ++l) {
    const auto& pl = post.layers[l];
    Matrix z(pl.mean.rows(), pl.mean.cols());
    RngStream s = stream.derive(l);
    for (double& v : z.values()) v = s.normal();
    // Y = L_R⁻ᵀ Z, then X = Y L_C⁻¹ via L_Cᵀ Xᵀ = Yᵀ.
    const Matrix y = solve_lower_transposed(pl.row_chol, z);
    const Matrix x = transpose(solve_lower_transposed(pl.col_chol, transpose(y)));
    out.push_back(pl.mean + x);
  }
  return out;
}

CdpParams with_weights(const LaplacePosterior& post, const std::vector<Matrix>& weights) {
  if (weights.size() != post.point.layers.size()) throw Error("with_weights: layer count mismatch");
  CdpParams p = post.point;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto& layer = p.layers[l];
    const Matrix& w = weights[l];
    if (w.rows() != layer.fan_in() + 1 || w.cols() != layer.fan_out())
      throw Error("with_weights: shape mismatch at layer " + std::to_string(l));
    for (std::size_t i = 0; i < layer.fan_in(); ++i)
      for (std::size_t j = 0; j < layer.fan_out(); ++j) layer.w(i, j) = w(i, j);
    for (std::size_t j = 0; j < layer.fan_out(); ++j) layer.b[j] = w(layer.fan_in(), j);
  }
  return p;
}

CdpParams sample_params(const LaplacePosterior& post, const RngStream& stream) {
  return with_weights(post, sample_weights(post, stream));
}

void save_posterior(const LaplacePosterior& post, const fs::path& path) {
  json layers = json::array();
  for (std::size_t l = 0; l < post.layers.size(); ++l) {
    const auto& pl = post.layers[l];
    const auto& rho = post.point.layers[l].rho;
    layers.push_back({{"mean", io::to_json(pl.mean)},
                      {"row_chol", io::to_json(pl.row_chol)},
                      {"col_chol", io::to_json(pl.col_chol)},
                      {"rho", rho ? json(*rho) : json(nullptr)}});
  }
  io::write_json({{"n_scale", post.n_scale},
                  {"tau", post.tau},
                  {"c", post.point.c},
                  {"d", post.point.d},
                  {"variant", to_string(post.point.variant)},
                  {"layers", std::move(layers)}},
                 path);
}

LaplacePosterior load_posterior(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  LaplacePosterior post;
  post.n_scale = r.at("n_scale").number();
  post.tau = r.at("tau").number();
  if (!(post.n_scale > 0.0)) r.at("n_scale").fail("must be positive");
  if (!(post.tau >= 0.0)) r.at("tau").fail("must be non-negative");
  post.point.c = r.at("c").count();
  post.point.d = r.at("d").count();
  try {
    post.point.variant = parse_variant(r.at("variant").string());
  } catch (const ConfigError& e) {
    r.at("variant").fail(e.what());
  }
  const auto layers = r.at("layers");
  std::vector<Matrix> means;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto lr = layers.at(l);
    LaplaceLayer pl;
    pl.mean = lr.at("mean").matrix();
    pl.row_chol = lr.at("row_chol").matrix();
    pl.col_chol = lr.at("col_chol").matrix();
    if (pl.mean.rows() < 2) lr.at("mean").fail("needs at least one weight row and the bias row");
    if (pl.row_chol.rows() != pl.mean.rows() || pl.row_chol.cols() != pl.mean.rows())
      lr.at("row_chol").fail("shape does not match mean");
    if (pl.col_chol.rows() != pl.mean.cols() || pl.col_chol.cols() != pl.mean.cols())
      lr.at("col_chol").fail("shape does not match mean");
    for (const Matrix* m : {&pl.row_chol, &pl.col_chol})
      for (std::size_t i = 0; i < m->rows(); ++i) {
        if (!((*m)(i, i) > 0.0))
          lr.at(m == &pl.row_chol ? "row_chol" : "col_chol").fail("diagonal must be positive");
        for (std::size_t k = i + 1; k < m->cols(); ++k)
          if ((*m)(i, k) != 0.0)
            lr.at(m == &pl.row_chol ? "row_chol" : "col_chol").fail("must be lower triangular");
      }
    DenseLayer layer;
    layer.w = Matrix(pl.mean.rows() - 1, pl.mean.cols());
    layer.b.assign(pl.mean.cols(), 0.0);
    if (lr.has("rho")) layer.rho = lr.at("rho").number();
    post.point.layers.push_back(std::move(layer));
    means.push_back(pl.mean);
    post.layers.push_back(std::move(pl));
  }
  post.point = with_weights(post, means);
  validate(post.point, path.string());
  return post;
}

}  // namespace introspect
