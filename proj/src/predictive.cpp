#include "introspect/predictive.hpp"

#include <cmath>
#include <string>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

namespace {

PredictiveResult from_rows(Matrix probs) {
  PredictiveResult r;
  r.mean.assign(probs.cols(), 0.0);
  for (std::size_t t = 0; t < probs.rows(); ++t)
    for (std::size_t k = 0; k < probs.cols(); ++k) r.mean[k] += probs(t, k);
  for (double& v : r.mean) v /= double(probs.rows());
  r.sample_probs = std::move(probs);
  return r;
}

void set_row(Matrix& m, std::size_t t, const std::vector<double>& v) {
  auto row = m.row(t);
  std::copy(v.begin(), v.end(), row.begin());
}

std::size_t classes(const PosteriorSource& source) {
  return std::visit(
      [](const auto& s) {
        if constexpr (requires { s.post; })
          return s.post.point.c;
        else
          return s.params.c;
      },
      source);
}

}  // namespace

PredictiveResult predict_mc(const PosteriorSource& source, std::span<const double> x, std::size_t t,
                            const RngStream& stream) {
  if (t == 0) throw ConfigError("number of MC samples must be positive");
  Matrix probs(t, classes(source));
  if (const auto* s = std::get_if<Deterministic>(&source)) {
    const auto p = softmax(logits_deterministic(s->params, x));
    for (std::size_t i = 0; i < t; ++i) set_row(probs, i, p);
  } else if (const auto* s = std::get_if<CdpMasks>(&source)) {
    for (std::size_t i = 0; i < t; ++i) {
      RngStream pass = stream.derive(i);
      set_row(probs, i, softmax(forward(s->params, x, ForwardMode::stochastic, pass, s->temperature).logits));
    }
  } else {
    const auto& lap = std::get<LaplaceWeights>(source);
    for (std::size_t i = 0; i < t; ++i)
      set_row(probs, i, softmax(logits_deterministic(sample_params(lap.post, stream.derive(i)), x)));
  }
  return from_rows(std::move(probs));
}

UncertaintyMeasures measures(const PredictiveResult& r) {
  UncertaintyMeasures m;
  m.confidence = r.mean[argmax(r.mean)];
  m.entropy = entropy(r.mean);
  double expected = 0.0;
  for (std::size_t t = 0; t < r.t(); ++t) expected += entropy(r.sample_probs.row(t));
  expected /= double(r.t());
  m.mutual_information = std::max(0.0, m.entropy - expected);
  return m;
}

std::vector<PredictiveResult> predict_batch(const PosteriorSource& source,
                                            std::span<const std::vector<double>> xs, std::size_t t,
                                            const RngStream& stream, Exec exec) {
  if (t == 0) throw ConfigError("number of MC samples must be positive");
  std::vector<PredictiveResult> out(xs.size());
  const auto* lap = std::get_if<LaplaceWeights>(&source);
  if (lap && !lap->redraw_per_item) {
    std::vector<CdpParams> draws(t);
    for_each_index(t, exec, [&](std::size_t i) { draws[i] = sample_params(lap->post, stream.derive(i)); });
    const std::size_t c = lap->post.point.c;
    for_each_index(xs.size(), exec, [&](std::size_t i) {
      Matrix probs(t, c);
      for (std::size_t k = 0; k < t; ++k) set_row(probs, k, softmax(logits_deterministic(draws[k], xs[i])));
      out[i] = from_rows(std::move(probs));
    });
    return out;
  }
  for_each_index(xs.size(), exec, [&](std::size_t i) { out[i] = predict_mc(source, xs[i], t, stream.derive(i)); });
  return out;
}

Prediction make_prediction(const PredictiveResult& r, std::optional<int> y) {
  const auto m = measures(r);
  return {r.mean, m.confidence, m.entropy, m.mutual_information, y};
}

void save_predictions(const std::vector<Prediction>& preds, const fs::path& path) {
  json arr = json::array();
  for (const auto& p : preds)
    arr.push_back({{"mean", p.mean},
                   {"conf", p.conf},
                   {"entropy", p.entropy},
                   {"mi", p.mi},
                   {"y", p.y ? json(*p.y) : json(nullptr)}});
  io::write_json(arr, path);
}

std::vector<Prediction> load_predictions(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  if (!j.is_array()) r.fail("expected a list of predictions");
  std::vector<Prediction> out;
  std::size_t c = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto e = r.at(i);
    Prediction p;
    p.mean = e.at("mean").numbers();
    if (p.mean.empty()) e.at("mean").fail("empty distribution");
    if (i == 0) c = p.mean.size();
    if (p.mean.size() != c) e.at("mean").fail("class count differs from the first prediction");
    double s = 0.0;
    for (double v : p.mean) {
      if (!(v >= 0.0 && v <= 1.0)) e.at("mean").fail("probabilities must lie in [0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) e.at("mean").fail("probabilities must sum to 1");
    p.conf = e.at("conf").number();
    p.entropy = e.at("entropy").number();
    p.mi = e.at("mi").number();
    if (!(p.conf > 0.0 && p.conf <= 1.0)) e.at("conf").fail("must lie in (0,1]");
    if (!(p.entropy >= 0.0)) e.at("entropy").fail("must be non-negative");
    if (!(p.mi >= 0.0)) e.at("mi").fail("must be non-negative");
    if (e.has("y")) {
      const long long y = e.at("y").integer();
      if (y < 0 || y >= static_cast<long long>(c)) e.at("y").fail("label out of range");
      p.y = static_cast<int>(y);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace introspect
