#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"
#include "introspect/metrics.hpp"

using namespace introspect;
namespace fs = std::filesystem;

namespace {

Prediction pred(std::vector<double> mean, std::optional<int> y, double mi = 0.0) {
  Prediction p;
  p.conf = mean[argmax(mean)];
  p.entropy = entropy(mean);
  p.mi = mi;
  p.mean = std::move(mean);
  p.y = y;
  return p;
}

// A two-class prediction with the given confidence, correct or not.
Prediction binary(double conf, bool correct) { return pred({conf, 1.0 - conf}, correct ? 0 : 1); }

std::vector<Prediction> random_preds(std::size_t n, std::size_t c, RngStream rng) {
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto logits = std_normal(rng.derive(i), c);
    for (double& v : logits) v *= 2.5;
    const auto m = softmax(logits);
    out.push_back(pred(m, static_cast<int>(rng.below(c)), 0.5 * entropy(m) * rng.uniform()));
  }
  return out;
}

const std::string fixture(const std::string& name) { return std::string(INTROSPECT_FIXTURES) + "/" + name; }

}  // namespace

TEST_CASE("bin edges go to the lower bin, 1.0 to the last") {
  CHECK(bin_index(0.0, 10) == 0);
  CHECK(bin_index(1.0, 10) == 9);
  CHECK(bin_index(0.5, 10) == 4);
  CHECK(bin_index(std::nextafter(0.5, 1.0), 10) == 5);
  CHECK(bin_index(0.25, 4) == 0);
  CHECK(bin_index(0.75, 4) == 2);
  CHECK(bin_index(0.95, 10) == 9);
  CHECK(bin_index(0.65, 10) == 6);
  CHECK(bin_index(1.5, 10, 0.0, 3.0) == 4);
  CHECK(bin_index(3.0 + 1e-12, 10, 0.0, 3.0) == 9);
}

TEST_CASE("ECE and MCE worked values") {
  const std::vector<Prediction> perfect{pred({1.0, 0.0}, 0), pred({0.0, 1.0}, 1)};
  const auto p = ece_mce(perfect, 15);
  CHECK(p.ece == 0.0);
  CHECK(p.mce == 0.0);

  const std::vector<Prediction> worked{binary(0.95, true), binary(0.95, false), binary(0.65, true),
                                       binary(0.65, true)};
  const auto w = ece_mce(worked, 10);
  CHECK(std::abs(w.ece - 0.4) < 1e-12);
  CHECK(std::abs(w.mce - 0.45) < 1e-12);

  auto doubled = worked;
  doubled.insert(doubled.end(), worked.begin(), worked.end());
  const auto d = ece_mce(doubled, 10);
  CHECK(std::abs(d.ece - w.ece) < 1e-15);
  CHECK(d.mce == w.mce);
  CHECK_THROWS_AS(ece_mce(std::vector<Prediction>{}, 10), ConfigError);
}

TEST_CASE("NLL and Brier worked values") {
  const std::vector<Prediction> onehot{pred({0.0, 1.0, 0.0}, 1)};
  const auto a = nll_brier(onehot);
  CHECK(a.nll == 0.0);
  CHECK(a.brier == 0.0);

  const std::vector<Prediction> uniform{pred({1.0 / 3, 1.0 / 3, 1.0 / 3}, 0), pred({1.0 / 3, 1.0 / 3, 1.0 / 3}, 2)};
  const auto b = nll_brier(uniform);
  CHECK(b.nll == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(b.brier == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

  const double e1 = std::exp(-1.0);
  const std::vector<Prediction> inv_e{pred({e1, 1.0 - e1}, 0), pred({1.0 - e1, e1}, 1)};
  CHECK(nll_brier(inv_e).nll == doctest::Approx(1.0).epsilon(1e-14));

  const std::vector<Prediction> zero{pred({0.5, 0.5}, 0), pred({1.0, 0.0}, 1)};
  const auto z = nll_brier(zero);
  CHECK(std::isinf(z.nll));
  CHECK(z.flagged == std::vector<std::size_t>{1});
}

TEST_CASE("AUROC and AUPR worked values") {
  const std::vector<double> p1{0.9, 0.8}, n1{0.2, 0.1};
  const auto s1 = auroc_aupr(p1, n1);
  CHECK(s1.auroc == 1.0);
  CHECK(s1.aupr == 1.0);
  const std::vector<double> p2{0.9, 0.4}, n2{0.6, 0.1};
  CHECK(auroc_aupr(p2, n2).auroc == 0.75);
  const std::vector<double> p3{0.3, 0.3, 0.3}, n3{0.3, 0.3};
  const auto s3 = auroc_aupr(p3, n3);
  CHECK(s3.auroc == 0.5);
  CHECK(s3.aupr == doctest::Approx(0.6));
  CHECK_THROWS_AS(auroc_aupr(p1, std::vector<double>{}), ConfigError);
}

TEST_CASE("AUROC is invariant under increasing transforms") {
  RngStream rng(1, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> pos = std_normal(rng.derive(2 * trial), 1 + rng.below(30));
    std::vector<double> neg = std_normal(rng.derive(2 * trial + 1), 1 + rng.below(30));
    for (double& v : pos) v = std::round(v * 4.0) / 4.0;  // force ties
    for (double& v : neg) v = std::round(v * 4.0) / 4.0;
    const auto base = auroc_aupr(pos, neg);
    auto f = [](double v) { return std::exp(v) + 3.0 * v; };
    for (double& v : pos) v = f(v);
    for (double& v : neg) v = f(v);
    const auto moved = auroc_aupr(pos, neg);
    CHECK(moved.auroc == base.auroc);
    CHECK(moved.aupr == base.aupr);
    CHECK(base.auroc >= 0.0);
    CHECK(base.auroc <= 1.0);
    CHECK(base.aupr >= 0.0);
    CHECK(base.aupr <= 1.0);
  }
}

TEST_CASE("metric ranges on fuzzed predictions") {
  RngStream rng(2, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto preds = random_preds(1 + rng.below(60), 2 + rng.below(5), rng.derive(trial));
    const auto cal = ece_mce(preds, 2 + rng.below(20));
    CHECK(cal.ece <= cal.mce + 1e-15);
    CHECK(cal.mce <= 1.0);
    CHECK(cal.ece >= 0.0);
    const auto s = nll_brier(preds);
    CHECK(s.nll >= 0.0);
    CHECK(s.brier >= 0.0);
    CHECK(s.brier <= 2.0);
  }
}

TEST_CASE("evaluate: optional OOD fields and degenerate sides") {
  const std::vector<Prediction> test{pred({0.9, 0.1}, 0), pred({0.2, 0.8}, 1), pred({0.6, 0.4}, 0)};
  const auto r = evaluate(test, {}, {});
  CHECK(r.accuracy == 1.0);
  CHECK_FALSE(r.auroc_ood.has_value());
  CHECK_FALSE(r.ece_with_ood.has_value());
  CHECK_FALSE(r.auroc_misclassification.has_value());
  CHECK(r.absent.at("auroc_misclassification") == "no misclassified predictions");
  CHECK(r.absent.at("auroc_ood") == "no ood predictions");
  const auto cal = ece_mce(test, 15);
  CHECK(r.ece == cal.ece);

  MetricsConfig need;
  need.require_ood = true;
  CHECK_THROWS_AS(evaluate(test, {}, need), ConfigError);
  need.bins = 1;
  CHECK_THROWS_AS(evaluate(test, {}, need), ConfigError);
  const std::vector<Prediction> unlabeled{pred({0.5, 0.5}, std::nullopt)};
  CHECK_THROWS_AS(evaluate(unlabeled, {}, {}), ConfigError);
}

TEST_CASE("histogram bars of each type sum to one") {
  RngStream rng(3, 0);
  const auto test = random_preds(80, 4, rng.derive(1));
  auto ood = random_preds(30, 4, rng.derive(2));
  for (auto& p : ood) p.y.reset();
  for (Measure m : {Measure::confidence, Measure::entropy, Measure::mutual_information}) {
    MetricsConfig cfg;
    cfg.measure = m;
    const auto r = evaluate(test, ood, cfg);
    for (std::size_t k = 0; k < 3; ++k) {
      if (r.histogram.totals[k] == 0) continue;
      double s = 0.0;
      for (double v : r.histogram.freq[k]) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    CHECK(r.histogram.totals[2] == 30);
  }
}

TEST_CASE("committed 20-prediction fixture matches the independent oracle") {
  const auto test = load_predictions(fixture("metrics_test_preds.json"));
  const auto ood = load_predictions(fixture("metrics_ood_preds.json"));
  const auto expected = io::read_json(fixture("metrics_expected.json"));
  REQUIRE(test.size() == 20);
  const double tol = 1e-9;
  for (Measure m : {Measure::confidence, Measure::entropy, Measure::mutual_information}) {
    MetricsConfig cfg;
    cfg.bins = expected["bins"];
    cfg.measure = m;
    const auto r = evaluate(test, ood, cfg);
    CHECK(std::abs(r.accuracy - expected["accuracy"].get<double>()) < tol);
    CHECK(std::abs(r.ece - expected["ece"].get<double>()) < tol);
    CHECK(std::abs(r.mce - expected["mce"].get<double>()) < tol);
    CHECK(std::abs(*r.ece_with_ood - expected["ece_with_ood"].get<double>()) < tol);
    CHECK(std::abs(*r.mce_with_ood - expected["mce_with_ood"].get<double>()) < tol);
    CHECK(std::abs(r.nll - expected["nll"].get<double>()) < tol);
    CHECK(std::abs(r.brier - expected["brier"].get<double>()) < tol);
    const auto& e = expected[to_string(m)];
    CHECK(std::abs(*r.auroc_misclassification - e["auroc_misclassification"].get<double>()) < tol);
    CHECK(std::abs(*r.aupr_misclassification - e["aupr_misclassification"].get<double>()) < tol);
    CHECK(std::abs(*r.auroc_ood - e["auroc_ood"].get<double>()) < tol);
    CHECK(std::abs(*r.aupr_ood - e["aupr_ood"].get<double>()) < tol);
    if (m == Measure::confidence) {
      const auto& h = expected["confidence_histogram"];
      const char* names[] = {"correct", "misclassified", "ood"};
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t b = 0; b < cfg.bins; ++b)
          CHECK(std::abs(r.histogram.freq[k][b] - h[names[k]][b].get<double>()) < tol);
    }
  }
}

TEST_CASE("best_measure picks the highest AUROC") {
  const auto test = load_predictions(fixture("metrics_test_preds.json"));
  const auto ood = load_predictions(fixture("metrics_ood_preds.json"));
  const auto expected = io::read_json(fixture("metrics_expected.json"));
  for (auto target : {SeparabilityTarget::misclassification, SeparabilityTarget::ood}) {
    const char* key = target == SeparabilityTarget::ood ? "auroc_ood" : "auroc_misclassification";
    std::string best;
    double top = -1.0;
    for (const char* m : {"confidence", "entropy", "mutual-information"})
      if (expected[m][key].get<double>() > top) {
        top = expected[m][key].get<double>();
        best = m;
      }
    const auto choice = best_measure(test, ood, target);
    CHECK(to_string(choice.measure) == best);
    CHECK(std::abs(choice.auroc - top) < 1e-9);
  }
}

TEST_CASE("report and histogram files") {
  const auto test = load_predictions(fixture("metrics_test_preds.json"));
  const auto r = evaluate(test, {}, {});
  const fs::path dir = fs::temp_directory_path() / "introspect_test_metrics";
  save_report(r, dir / "report.json");
  save_histogram_csv(r.histogram, dir / "hist.csv");
  const auto j = io::read_json(dir / "report.json");
  CHECK(j["auroc_ood"].is_null());
  CHECK(j["absent"]["auroc_ood"] == "no ood predictions");
  CHECK(j["ece"].get<double>() == r.ece);
  const auto csv = io::read_text(dir / "hist.csv");
  CHECK(csv.rfind("bin_low,bin_high,correct,misclassified,ood\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 16);
}
