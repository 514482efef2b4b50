#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "introspect/errors.hpp"
#include "introspect/laplace.hpp"

using namespace introspect;
namespace fs = std::filesystem;

namespace {

CdpParams linear_model(std::size_t d, std::size_t c, double std, RngStream rng) {
  return init_params(d, c, Variant::plain, {.hidden = {}, .init_std = std}, rng);
}

KfacFactors explicit_factors(const Matrix& a, const Matrix& g) {
  return KfacFactors{{a}, {g}, 1};
}

// Per-entry sample moments of `draws` independent weight draws of layer 0.
struct Moments {
  Matrix mean;
  Matrix cov;  // vec-covariance, row-major vec
};

Moments draw_moments(const LaplacePosterior& post, std::size_t draws, RngStream rng) {
  const std::size_t r = post.layers[0].mean.rows(), c = post.layers[0].mean.cols(), n = r * c;
  std::vector<double> sum(n, 0.0);
  Matrix sq(n, n);
  for (std::size_t t = 0; t < draws; ++t) {
    const Matrix w = sample_weights(post, rng.derive(t))[0];
    const auto v = w.values();
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += v[i];
      for (std::size_t j = 0; j < n; ++j) sq(i, j) += v[i] * v[j];
    }
  }
  Moments m{Matrix(r, c), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) m.mean.values()[i] = sum[i] / double(draws);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m.cov(i, j) = sq(i, j) / double(draws) - m.mean.values()[i] * m.mean.values()[j];
  return m;
}

Matrix inverse_2x2(const Matrix& m) {
  const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return Matrix::from_rows({{m(1, 1) / det, -m(0, 1) / det}, {-m(1, 0) / det, m(0, 0) / det}});
}

}  // namespace

TEST_CASE("single item single layer: E[A] is that item's outer product") {
  const CdpParams p = linear_model(3, 2, 0.5, RngStream(1, 0));
  const std::vector<double> x{0.5, -1.0, 2.0};
  const std::vector<Sample> data{{x, 1}};
  const auto f = accumulate_kfac(p, data);
  const std::vector<double> abar{0.5, -1.0, 2.0, 1.0};
  CHECK(f.samples == 1);
  CHECK(f.a[0] == outer(abar, abar));
  CHECK_THROWS_AS(accumulate_kfac(p, std::span<const Sample>{}), ConfigError);
}

TEST_CASE("duplicating the data leaves the factors unchanged") {
  const CdpParams p = init_params(3, 3, Variant::cdp, {.hidden = {5, 4}, .init_std = 0.6}, RngStream(2, 0));
  std::vector<std::vector<double>> xs;
  std::vector<Sample> data;
  for (int i = 0; i < 7; ++i) xs.push_back(std_normal(RngStream(2, 1).derive(i), 3));
  for (int i = 0; i < 7; ++i) data.push_back({xs[i], i % 3});
  auto twice = data;
  twice.insert(twice.end(), data.begin(), data.end());
  const auto f1 = accumulate_kfac(p, data);
  const auto f2 = accumulate_kfac(p, twice);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(max_abs_diff(f1.a[l], f2.a[l]) < 1e-13);
    CHECK(max_abs_diff(f1.g[l], f2.g[l]) < 1e-13);
    CHECK(max_abs_diff(f1.a[l], transpose(f1.a[l])) < 1e-10);
    CHECK(max_abs_diff(f1.g[l], transpose(f1.g[l])) < 1e-10);
  }
}

TEST_CASE("per-sample Kronecker identity on softmax regression") {
  const std::size_t d = 3, c = 4;
  const CdpParams p = linear_model(d, c, 0.7, RngStream(3, 0));
  RngStream rng(3, 1);
  for (int i = 0; i < 20; ++i) {
    const auto x = std_normal(rng.derive(i), d);
    const int y = static_cast<int>(rng.below(c));
    const std::vector<Sample> one{{x, y}};
    const auto f = accumulate_kfac(p, one);

    // Closed-form gradient of -log softmax(xW + b)[y] w.r.t. the homogeneous
    // weight matrix: ā (softmax - onehot)ᵀ, vectorized row-major.
    std::vector<double> logits(p.layers[0].b);
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t j = 0; j < c; ++j) logits[j] += x[k] * p.layers[0].w(k, j);
    auto resid = softmax(logits);
    resid[y] -= 1.0;
    std::vector<double> abar(x);
    abar.push_back(1.0);
    std::vector<double> vec;
    for (double a : abar)
      for (double r : resid) vec.push_back(a * r);
    CHECK(max_abs_diff(kronecker(f.a[0], f.g[0]), outer(vec, vec)) < 1e-10);
  }
}

TEST_CASE("posterior factor construction") {
  const CdpParams p = linear_model(1, 3, 0.0, RngStream(4, 0));
  const auto id = posterior(explicit_factors(Matrix::identity(2), Matrix::identity(3)), p, 1.0, 0.0);
  CHECK(max_abs_diff(id.layers[0].row_chol, Matrix::identity(2)) < 1e-15);
  CHECK(max_abs_diff(id.layers[0].col_chol, Matrix::identity(3)) < 1e-15);

  const auto zero = posterior(explicit_factors(Matrix(2, 2), Matrix::identity(3)), p, 1.0, 15.0);
  const Matrix& l = zero.layers[0].row_chol;
  CHECK(max_abs_diff(matmul(l, transpose(l)), std::sqrt(15.0) * Matrix::identity(2)) < 1e-14);

  const Matrix rank1 = Matrix::from_rows({{1, 1}, {1, 1}});
  CHECK_THROWS_AS(posterior(explicit_factors(rank1, Matrix::identity(3)), p, 1.0, 0.0), NumericalError);
  try {
    posterior(explicit_factors(rank1, Matrix::identity(3)), p, 1.0, 0.0);
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("increase tau") != std::string::npos);
  }
  CHECK_THROWS_AS(posterior(explicit_factors(rank1, Matrix::identity(3)), p, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(posterior(explicit_factors(rank1, Matrix::identity(3)), p, 1.0, -1.0), ConfigError);
}

TEST_CASE("identity factors give iid standard normal entries") {
  const CdpParams p = linear_model(1, 3, 0.0, RngStream(5, 0));
  const auto post = posterior(explicit_factors(Matrix::identity(2), Matrix::identity(3)), p, 1.0, 0.0);
  const auto m = draw_moments(post, 100000, RngStream(5, 1));
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(m.cov(i, i) - 1.0) < 0.1);
}

TEST_CASE("row factor 4I quarters the per-entry variance") {
  const CdpParams p = linear_model(1, 3, 0.0, RngStream(6, 0));
  const auto post =
      posterior(explicit_factors(4.0 * Matrix::identity(2), Matrix::identity(3)), p, 1.0, 0.0);
  const auto m = draw_moments(post, 100000, RngStream(6, 1));
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(m.cov(i, i) - 0.25) < 0.025);
}

TEST_CASE("vec-covariance matches the Kronecker product on a 2x2 layer") {
  const CdpParams p = linear_model(1, 2, 0.0, RngStream(7, 0));
  const Matrix a = Matrix::from_rows({{1.5, 0.6}, {0.6, 0.8}});
  const Matrix g = Matrix::from_rows({{0.9, -0.4}, {-0.4, 1.2}});
  const double n = 1.0, tau = 0.25;
  const auto post = posterior(explicit_factors(a, g), p, n, tau);
  const Matrix r = std::sqrt(n) * a + std::sqrt(tau) * Matrix::identity(2);
  const Matrix c = std::sqrt(n) * g + std::sqrt(tau) * Matrix::identity(2);
  const Matrix exact = kronecker(inverse_2x2(r), inverse_2x2(c));
  const auto m = draw_moments(post, 200000, RngStream(7, 1));
  CHECK(max_abs_diff(m.cov, exact) < 0.05);
}

TEST_CASE("sampling is unbiased") {
  const CdpParams p = linear_model(2, 3, 1.0, RngStream(8, 0));
  const Matrix a = Matrix::from_rows({{1.0, 0.2, 0.1}, {0.2, 0.5, 0.0}, {0.1, 0.0, 1.0}});
  const auto post = posterior(explicit_factors(a, Matrix::identity(3)), p, 1.0, 1.0);
  const std::size_t draws = 50000;
  const auto m = draw_moments(post, draws, RngStream(8, 1));
  const Matrix mean = homogeneous_weights(p.layers[0]);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double se = std::sqrt(m.cov(i, i) / double(draws));
    CHECK(std::abs(m.mean.values()[i] - mean.values()[i]) < 3.0 * se);
  }
}

TEST_CASE("larger tau shrinks the sampled deviations") {
  const CdpParams p = linear_model(2, 2, 1.0, RngStream(9, 0));
  const Matrix a = Matrix::from_rows({{0.7, 0.1, 0.0}, {0.1, 0.3, 0.2}, {0.0, 0.2, 1.0}});
  const Matrix g = Matrix::from_rows({{0.4, 0.1}, {0.1, 0.2}});
  auto mean_sq_dev = [&](double tau) {
    const auto post = posterior(explicit_factors(a, g), p, 1.0, tau);
    const Matrix mean = homogeneous_weights(p.layers[0]);
    double s = 0.0;
    for (std::size_t t = 0; t < 100000; ++t) {
      const Matrix w = sample_weights(post, RngStream(9, 1).derive(t))[0];
      for (std::size_t i = 0; i < w.size(); ++i) s += std::pow(w.values()[i] - mean.values()[i], 2);
    }
    return s / 100000.0;
  };
  CHECK(mean_sq_dev(15.0) < mean_sq_dev(1.0));
}

TEST_CASE("large n-scale concentrates the posterior") {
  const CdpParams p = linear_model(1, 2, 1.0, RngStream(10, 0));
  const auto f = explicit_factors(Matrix::identity(2), Matrix::identity(2));
  const auto loose = draw_moments(posterior(f, p, 1.0, 15.0), 20000, RngStream(10, 1));
  const auto tight = draw_moments(posterior(f, p, 1e6, 15.0), 20000, RngStream(10, 1));
  for (std::size_t i = 0; i < 4; ++i) CHECK(tight.cov(i, i) < 1e-4 * loose.cov(i, i));
}

TEST_CASE("sampling is deterministic per stream") {
  const CdpParams p = init_params(2, 3, Variant::cdp, {.hidden = {4}}, RngStream(11, 0));
  const auto f = explicit_factors(Matrix::identity(3), Matrix::identity(4));
  KfacFactors full{{Matrix::identity(3), Matrix::identity(5)}, {Matrix::identity(4), Matrix::identity(3)}, 1};
  const auto post = posterior(full, p, 1.0, 15.0);
  CHECK(sample_weights(post, RngStream(11, 1)) == sample_weights(post, RngStream(11, 1)));
  CHECK_FALSE(sample_weights(post, RngStream(11, 1)) == sample_weights(post, RngStream(11, 2)));
  CHECK_THROWS_AS(posterior(f, p, 1.0, 15.0), ConfigError);
  std::vector<Matrix> means;
  for (const auto& l : p.layers) means.push_back(homogeneous_weights(l));
  CHECK(with_weights(post, means) == p);
}

TEST_CASE("posterior fitted on a trained network") {
  Dataset data = gen_clusters(3, 2, 60, 6.0, RngStream(12, 0));
  data = assign_splits(std::move(data), {.train = 0.7, .validation = 0.3}, RngStream(12, 1));
  TrainConfig cfg;
  cfg.arch.hidden = {8, 8};
  cfg.max_epochs = 5;
  cfg.stream = RngStream(12, 2);
  const auto model = train(cfg, data, Variant::cdp).params;
  const auto f = accumulate_kfac(model, samples(data, Split::train));
  CHECK(f.samples == data.count(Split::train));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    CHECK(f.a[l](model.layers[l].fan_in(), model.layers[l].fan_in()) == doctest::Approx(1.0));
    for (std::size_t i = 0; i < f.g[l].rows(); ++i) CHECK(f.g[l](i, i) >= 0.0);
  }
  const auto post = posterior(f, model, 1.0, 15.0);
  for (const auto& pl : post.layers)
    for (const Matrix* m : {&pl.row_chol, &pl.col_chol})
      for (std::size_t i = 0; i < m->rows(); ++i) {
        CHECK((*m)(i, i) > 0.0);
        for (std::size_t j = i + 1; j < m->cols(); ++j) CHECK((*m)(i, j) == 0.0);
      }

  const fs::path path = fs::temp_directory_path() / "introspect_test_laplace" / "posterior.json";
  save_posterior(post, path);
  const auto back = load_posterior(path);
  CHECK(back.point == post.point);
  CHECK(back.n_scale == 1.0);
  CHECK(back.tau == 15.0);
  for (std::size_t l = 0; l < post.layers.size(); ++l) {
    CHECK(back.layers[l].row_chol == post.layers[l].row_chol);
    CHECK(back.layers[l].col_chol == post.layers[l].col_chol);
  }
}
