#include "introspect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

std::string to_string(Measure m) {
  switch (m) {
    case Measure::confidence: return "confidence";
    case Measure::entropy: return "entropy";
    case Measure::mutual_information: return "mutual-information";
  }
  return "?";
}

Measure parse_measure(const std::string& s) {
  if (s == "confidence") return Measure::confidence;
  if (s == "entropy") return Measure::entropy;
  if (s == "mutual-information" || s == "mi") return Measure::mutual_information;
  throw ConfigError("unknown uncertainty measure '" + s + "'");
}

double score(const Prediction& p, Measure m) {
  switch (m) {
    case Measure::confidence: return p.conf;
    case Measure::entropy: return -p.entropy;
    case Measure::mutual_information: return -p.mi;
  }
  return 0.0;
}

void validate(const MetricsConfig& cfg) {
  if (cfg.bins < 2) throw ConfigError("metrics need at least 2 bins");
}

std::size_t bin_index(double v, std::size_t bins, double lo, double hi) {
  const double t = (lo == 0.0 && hi == 1.0) ? v : (v - lo) / (hi - lo);
  if (!(t > 0.0)) return 0;
  if (t >= 1.0) return bins - 1;
  // t·B = r + e exactly; bin is ceil(t·B) - 1.
  const double b = double(bins);
  const double r = t * b;
  const double e = std::fma(t, b, -r);
  double up = std::ceil(r);
  if (up == r && e > 0.0) up += 1.0;
  const auto idx = static_cast<std::size_t>(std::max(up, 1.0)) - 1;
  return std::min(idx, bins - 1);
}

Calibration ece_mce(std::span<const double> confidence, std::span<const bool> correct, std::size_t bins) {
  if (confidence.empty()) throw ConfigError("calibration needs at least one prediction");
  if (confidence.size() != correct.size()) throw ConfigError("calibration inputs differ in length");
  if (bins < 2) throw ConfigError("calibration needs at least 2 bins");
  std::vector<double> conf_sum(bins, 0.0), hits(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const std::size_t b = bin_index(confidence[i], bins);
    conf_sum[b] += confidence[i];
    hits[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  Calibration c;
  const double n = double(confidence.size());
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double k = double(count[b]);
    const double gap = std::abs(hits[b] / k - conf_sum[b] / k);
    c.ece += k / n * gap;
    c.mce = std::max(c.mce, gap);
  }
  return c;
}

namespace {

int predicted(const Prediction& p) { return static_cast<int>(argmax(p.mean)); }

double top(const Prediction& p) { return p.mean[argmax(p.mean)]; }

void require_labels(std::span<const Prediction> preds) {
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (!preds[i].y) throw ConfigError("prediction " + std::to_string(i) + " has no label");
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

Calibration ece_mce(std::span<const Prediction> preds, std::size_t bins) {
  require_labels(preds);
  std::vector<double> conf;
  const auto ok = std::make_unique<bool[]>(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    conf.push_back(top(preds[i]));
    ok[i] = predicted(preds[i]) == *preds[i].y;
  }
  return ece_mce(conf, std::span<const bool>(ok.get(), preds.size()), bins);
}

ProperScores nll_brier(std::span<const Prediction> preds) {
  if (preds.empty()) throw ConfigError("scoring needs at least one prediction");
  require_labels(preds);
  ProperScores s;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const auto y = static_cast<std::size_t>(*p.y);
    if (y >= p.mean.size()) throw ConfigError("label out of range at prediction " + std::to_string(i));
    if (p.mean[y] <= 0.0)
      s.flagged.push_back(i);
    else
      s.nll -= std::log(p.mean[y]);
    for (std::size_t k = 0; k < p.mean.size(); ++k) {
      const double d = p.mean[k] - (k == y ? 1.0 : 0.0);
      s.brier += d * d;
    }
  }
  const double n = double(preds.size());
  s.nll = s.flagged.empty() ? s.nll / n : std::numeric_limits<double>::infinity();
  s.brier /= n;
  return s;
}

Separability auroc_aupr(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty())
    throw ConfigError("separability needs both positive and negative scores");
  std::vector<double> all(positives.begin(), positives.end());
  all.insert(all.end(), negatives.begin(), negatives.end());
  const auto ranks = average_ranks(all);
  const double np = double(positives.size()), nn = double(negatives.size());
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < positives.size(); ++i) rank_sum += ranks[i];
  Separability s;
  s.auroc = (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return all[a] > all[b]; });
  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    for (; j < order.size() && all[order[j]] == all[order[i]]; ++j) {
      if (order[j] < positives.size())
        tp += 1.0;
      else
        fp += 1.0;
    }
    const double recall = tp / np;
    s.aupr += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
    i = j;
  }
  return s;
}

MetricsReport evaluate(std::span<const Prediction> test, std::span<const Prediction> ood,
                       const MetricsConfig& cfg) {
  validate(cfg);
  if (test.empty()) throw ConfigError("evaluation needs test predictions");
  require_labels(test);
  if (cfg.require_ood && ood.empty()) throw ConfigError("OOD metrics requested but no OOD predictions given");
  const std::size_t c = test.front().mean.size();
  for (const auto& p : ood)
    if (p.mean.size() != c) throw ConfigError("OOD predictions have a different class count");

  MetricsReport r;
  r.n_test = test.size();
  r.n_ood = ood.size();
  std::vector<double> conf;
  const auto ok = std::make_unique<bool[]>(test.size() + ood.size());
  std::vector<double> pos, neg;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& p = test[i];
    conf.push_back(top(p));
    ok[i] = predicted(p) == *p.y;
    hits += ok[i];
    (ok[i] ? pos : neg).push_back(score(p, cfg.measure));
  }
  r.accuracy = double(hits) / double(test.size());
  const auto cal = ece_mce(conf, std::span<const bool>(ok.get(), test.size()), cfg.bins);
  r.ece = cal.ece;
  r.mce = cal.mce;
  const auto ps = nll_brier(test);
  r.nll = ps.nll;
  r.brier = ps.brier;
  r.nll_flagged = ps.flagged;

  if (pos.empty() || neg.empty()) {
    const std::string why = pos.empty() ? "no correct predictions" : "no misclassified predictions";
    r.absent["auroc_misclassification"] = why;
    r.absent["aupr_misclassification"] = why;
  } else {
    const auto s = auroc_aupr(pos, neg);
    r.auroc_misclassification = s.auroc;
    r.aupr_misclassification = s.aupr;
  }

  if (ood.empty()) {
    for (const char* f : {"ece_with_ood", "mce_with_ood", "auroc_ood", "aupr_ood"})
      r.absent[f] = "no ood predictions";
  } else {
    std::vector<double> in_scores, out_scores;
    for (const auto& p : test) in_scores.push_back(score(p, cfg.measure));
    for (std::size_t i = 0; i < ood.size(); ++i) {
      conf.push_back(top(ood[i]));
      ok[test.size() + i] = false;
      out_scores.push_back(score(ood[i], cfg.measure));
    }
    const auto all = ece_mce(conf, std::span<const bool>(ok.get(), conf.size()), cfg.bins);
    r.ece_with_ood = all.ece;
    r.mce_with_ood = all.mce;
    const auto s = auroc_aupr(in_scores, out_scores);
    r.auroc_ood = s.auroc;
    r.aupr_ood = s.aupr;
  }

  Histogram& h = r.histogram;
  h.measure = cfg.measure;
  h.hi = cfg.measure == Measure::confidence ? 1.0 : std::log(double(c));
  h.freq.assign(3, std::vector<double>(cfg.bins, 0.0));
  h.totals.assign(3, 0);
  auto raw = [&](const Prediction& p) {
    return cfg.measure == Measure::confidence ? p.conf : cfg.measure == Measure::entropy ? p.entropy : p.mi;
  };
  auto add = [&](PredictionType t, const Prediction& p) {
    const auto k = static_cast<std::size_t>(t);
    h.freq[k][bin_index(raw(p), cfg.bins, h.lo, h.hi)] += 1.0;
    ++h.totals[k];
  };
  for (std::size_t i = 0; i < test.size(); ++i)
    add(ok[i] ? PredictionType::correct : PredictionType::misclassified, test[i]);
  for (const auto& p : ood) add(PredictionType::ood, p);
  for (std::size_t k = 0; k < 3; ++k)
    if (h.totals[k] > 0)
      for (double& v : h.freq[k]) v /= double(h.totals[k]);
  return r;
}

MeasureChoice best_measure(std::span<const Prediction> test, std::span<const Prediction> ood,
                           SeparabilityTarget target) {
  MeasureChoice best;
  bool any = false;
  for (Measure m : {Measure::confidence, Measure::entropy, Measure::mutual_information}) {
    MetricsConfig cfg;
    cfg.measure = m;
    cfg.require_ood = target == SeparabilityTarget::ood;
    const auto r = evaluate(test, ood, cfg);
    const auto& v = target == SeparabilityTarget::ood ? r.auroc_ood : r.auroc_misclassification;
    if (!v) throw ConfigError("separability undefined for the requested target");
    if (!any || *v > best.auroc) best = {m, *v};
    any = true;
  }
  return best;
}

void save_report(const MetricsReport& r, const fs::path& path) {
  const auto& h = r.histogram;
  json bins = json::array();
  const double w = (h.hi - h.lo) / double(h.freq.empty() ? 1 : h.freq[0].size());
  for (std::size_t b = 0; !h.freq.empty() && b < h.freq[0].size(); ++b)
    bins.push_back({h.lo + double(b) * w, h.lo + double(b + 1) * w});
  json absent = json::object();
  for (const auto& [k, v] : r.absent) absent[k] = v;
  io::write_json({{"n_test", r.n_test},
                  {"n_ood", r.n_ood},
                  {"accuracy", r.accuracy},
                  {"ece", r.ece},
                  {"mce", r.mce},
                  {"nll", std::isfinite(r.nll) ? json(r.nll) : json(nullptr)},
                  {"nll_flagged", r.nll_flagged},
                  {"brier", r.brier},
                  {"ece_with_ood", optional_json(r.ece_with_ood)},
                  {"mce_with_ood", optional_json(r.mce_with_ood)},
                  {"auroc_misclassification", optional_json(r.auroc_misclassification)},
                  {"aupr_misclassification", optional_json(r.aupr_misclassification)},
                  {"auroc_ood", optional_json(r.auroc_ood)},
                  {"aupr_ood", optional_json(r.aupr_ood)},
                  {"absent", absent},
                  {"histogram",
                   {{"measure", to_string(h.measure)},
                    {"bins", bins},
                    {"correct", h.freq.empty() ? json::array() : json(h.freq[0])},
                    {"misclassified", h.freq.empty() ? json::array() : json(h.freq[1])},
                    {"ood", h.freq.empty() ? json::array() : json(h.freq[2])},
                    {"totals", h.totals}}}},
                 path);
}

void save_histogram_csv(const Histogram& h, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "bin_low,bin_high,correct,misclassified,ood\n";
  const std::size_t bins = h.freq.empty() ? 0 : h.freq[0].size();
  const double w = bins ? (h.hi - h.lo) / double(bins) : 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    out << h.lo + double(b) * w << ',' << h.lo + double(b + 1) * w << ',' << h.freq[0][b] << ','
        << h.freq[1][b] << ',' << h.freq[2][b] << '\n';
  io::write_text(out.str(), path);
}

}  // namespace introspect
