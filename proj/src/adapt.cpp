#include "introspect/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

std::string to_string(BalancePolicy p) { return p == BalancePolicy::none ? "none" : "jitter-duplicate"; }

BalancePolicy parse_balance_policy(const std::string& s) {
  if (s == "none") return BalancePolicy::none;
  if (s == "jitter-duplicate") return BalancePolicy::jitter_duplicate;
  throw ConfigError("unknown balance policy '" + s + "' (expected none or jitter-duplicate)");
}

void validate(const AdaptConfig& cfg) {
  if (!(cfg.target_accuracy > 0.0 && cfg.target_accuracy <= 1.0))
    throw ConfigError("target accuracy must lie in (0,1]");
  auto fraction = [](double f, const char* name) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
  };
  fraction(cfg.calib_fraction, "calibration fraction");
  fraction(cfg.manual_fraction, "manual fraction");
  if (cfg.auto_fraction_cap) fraction(*cfg.auto_fraction_cap, "auto fraction cap");
  if (cfg.top_k_per_class && *cfg.top_k_per_class == 0) throw ConfigError("top-k per class must be positive");
  if (!(cfg.jitter_scale >= 0.0) || !std::isfinite(cfg.jitter_scale))
    throw ConfigError("jitter scale must be finite and non-negative");
  if (cfg.mc_samples == 0) throw ConfigError("MC sample count must be positive");
  if (cfg.rounds == 0) throw ConfigError("adaptation needs at least one round");
  validate(cfg.base);
  validate(cfg.fine_tune);
}

Threshold calibrate_threshold(std::span<const CalibrationPoint> points, double target) {
  if (points.empty()) throw ConfigError("calibration set is empty");
  std::vector<CalibrationPoint> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  Threshold best{std::nextafter(sorted.front().score, std::numeric_limits<double>::infinity()), false};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    correct += sorted[i].correct ? 1 : 0;
    const bool group_end = i + 1 == sorted.size() || sorted[i + 1].score != sorted[i].score;
    if (group_end && double(correct) / double(i + 1) >= target) best = {sorted[i].score, true};
  }
  return best;
}

std::vector<PseudoLabel> auto_label(std::span<const Prediction> preds, double delta, const AutoLabelOptions& opts) {
  std::vector<PseudoLabel> out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double s = score(preds[i], opts.gating);
    if (s >= delta) out.push_back({i, static_cast<int>(argmax(preds[i].mean)), s});
  }
  auto by_score = [](const PseudoLabel& a, const PseudoLabel& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  };
  if (opts.top_k_per_class) {
    std::map<int, std::vector<PseudoLabel>> per_class;
    for (const auto& p : out) per_class[p.label].push_back(p);
    out.clear();
    for (auto& [label, items] : per_class) {
      std::sort(items.begin(), items.end(), by_score);
      items.resize(std::min(items.size(), *opts.top_k_per_class));
      out.insert(out.end(), items.begin(), items.end());
    }
  }
  if (opts.max_items && out.size() > *opts.max_items) {
    std::sort(out.begin(), out.end(), by_score);
    out.resize(*opts.max_items);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  return out;
}

int LabelOracle::query(std::size_t index) {
  if (index >= labels_.size() || !labels_[index]) throw ConfigError("oracle has no label for item " + std::to_string(index));
  queried_.push_back(index);
  return *labels_[index];
}

double LabelOracle::audit(std::span<const PseudoLabel> labels) const {
  if (labels.empty()) throw ConfigError("nothing to audit");
  std::size_t hits = 0;
  for (const auto& p : labels) {
    if (p.index >= labels_.size() || !labels_[p.index])
      throw ConfigError("oracle has no label for item " + std::to_string(p.index));
    hits += *labels_[p.index] == p.label ? 1 : 0;
  }
  return double(hits) / double(labels.size());
}

ManualSelection manual_label(std::span<const std::size_t> candidates, double fraction, LabelOracle& oracle,
                             RngStream stream, std::optional<std::size_t> pool_size) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("manual fraction must lie in [0,1]");
  ManualSelection out;
  const double want = fraction * double(pool_size.value_or(candidates.size()));
  const auto k = std::min(candidates.size(), static_cast<std::size_t>(std::floor(want)));
  out.too_small = fraction > 0.0 && k == 0;
  const auto order = permutation(candidates.size(), stream);
  std::vector<std::size_t> chosen;
  for (std::size_t j = 0; j < k; ++j) chosen.push_back(candidates[order[j]]);
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t idx : chosen) out.items.push_back({idx, oracle.query(idx)});
  return out;
}

std::vector<std::size_t> class_counts(std::span<const TrainingItem> items, std::size_t c) {
  std::vector<std::size_t> counts(c, 0);
  for (const auto& it : items) ++counts.at(static_cast<std::size_t>(it.y));
  return counts;
}

std::vector<TrainingItem> balance(std::vector<TrainingItem> items, std::size_t c, BalancePolicy policy,
                                  double jitter_scale, RngStream stream) {
  if (policy == BalancePolicy::none || items.empty()) return items;
  const auto counts = class_counts(items, c);
  const std::size_t target = *std::max_element(counts.begin(), counts.end());
  std::vector<std::vector<std::size_t>> members(c);
  for (std::size_t i = 0; i < items.size(); ++i) members[items[i].y].push_back(i);
  for (std::size_t k = 0; k < c; ++k) {
    if (members[k].empty()) continue;
    RngStream rng = stream.derive(k);
    for (std::size_t n = counts[k]; n < target; ++n) {
      const TrainingItem& from = items[members[k][rng.below(members[k].size())]];
      TrainingItem copy = from;
      copy.duplicate = true;
      for (double& v : copy.x) v += jitter_scale * rng.normal();
      items.push_back(std::move(copy));
    }
  }
  return items;
}

namespace {

enum Condition : std::uint64_t { auto_only = 1, manual_only = 2, auto_manual = 3 };

// Rethrows with the stage name, keeping the error category.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const SchemaError& e) {
    throw SchemaError(e.path(), e.field(), name + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(name + ": " + e.what());
  }
}

std::vector<Sample> as_samples(const std::vector<TrainingItem>& items) {
  std::vector<Sample> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back({it.x, it.y});
  return out;
}

double accuracy_of(const std::vector<Prediction>& preds, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += static_cast<int>(argmax(preds[i].mean)) == labels[i] ? 1 : 0;
  return preds.empty() ? 0.0 : double(hits) / double(preds.size());
}

struct Pipeline {
  const AdaptConfig& cfg;
  const Dataset& target;
  std::vector<std::vector<double>> test_x;
  std::vector<int> test_y;

  std::vector<Prediction> predict(const CdpParams& params, std::span<const std::vector<double>> xs,
                                  const RngStream& stream) const {
    const PosteriorSource source = CdpMasks{params, cfg.fine_tune.temperature};
    const auto results = predict_batch(source, xs, cfg.mc_samples, stream);
    std::vector<Prediction> out;
    out.reserve(results.size());
    for (const auto& r : results) out.push_back(make_prediction(r, std::nullopt));
    return out;
  }

  double test_accuracy(const CdpParams& params) const {
    return accuracy_of(predict(params, test_x, cfg.stream.derive(6)), test_y);
  }

  // Warm start from `init`; an empty adaptation set leaves it unchanged.
  CdpParams fine_tune(const CdpParams& init, const std::vector<TrainingItem>& items,
                      std::span<const Sample> validation, RngStream stream) const {
    if (items.empty()) return init;
    TrainConfig tc = cfg.fine_tune;
    tc.stream = stream;
    const auto train = as_samples(items);
    return fit(init, train, validation, tc).params;
  }
};

std::vector<TrainingItem> training_items(const Dataset& target, std::span<const PseudoLabel> auto_set,
                                         std::span<const ManualLabel> manual) {
  std::vector<TrainingItem> out;
  for (const auto& p : auto_set) out.push_back({target.items[p.index].x, p.label, p.index, false});
  for (const auto& m : manual) out.push_back({target.items[m.index].x, m.y, m.index, false});
  return out;
}

}  // namespace

AdaptOutcome run_adaptation(const AdaptConfig& cfg, const Dataset& source, const Dataset& target_in,
                            std::optional<CdpParams> base, const std::optional<ContextSpec>& context) {
  validate(cfg);
  if (source.c != target_in.c || source.d != target_in.d)
    throw ConfigError("source and target datasets disagree on C or d");

  AdaptOutcome out;
  AdaptReport& rep = out.report;

  const Dataset target = stage("calibration split", [&] {
    if (target_in.count(Split::calibration) > 0) return target_in;
    return carve_split(target_in, Split::pool, Split::calibration, cfg.calib_fraction, cfg.stream.derive(1));
  });
  const auto pool_idx = target.indices(Split::pool);
  const auto calib_idx = target.indices(Split::calibration);
  if (pool_idx.empty()) throw ConfigError("target dataset has no pool split");
  if (calib_idx.empty()) throw ConfigError("calibration split is empty; raise the calibration fraction");
  if (target.count(Split::test) == 0) throw ConfigError("target dataset has no test split");
  rep.pool_size = pool_idx.size();
  rep.calibration_size = calib_idx.size();
  out.audit.calibration = calib_idx;

  // Pool and calibration labels are reachable only through the oracle.
  std::vector<std::optional<int>> truth(target.items.size());
  for (std::size_t i : pool_idx) truth[i] = target.items[i].y;
  for (std::size_t i : calib_idx) truth[i] = target.items[i].y;
  LabelOracle oracle(std::move(truth));

  Pipeline pipe{cfg, target, {}, {}};
  for (std::size_t i : target.indices(Split::test)) {
    pipe.test_x.push_back(target.items[i].x);
    pipe.test_y.push_back(target.items[i].y);
  }

  out.base = stage("base training", [&] {
    if (base) {
      if (base->d != source.d || base->c != source.c) throw ConfigError("base model does not match the data");
      return *base;
    }
    TrainConfig tc = cfg.base;
    tc.stream = cfg.stream.derive(0);
    return train(tc, source, cfg.variant).params;
  });

  std::vector<TrainingItem> calib_items;
  for (std::size_t i : calib_idx) calib_items.push_back({target.items[i].x, oracle.query(i), i, false});
  const auto validation = as_samples(calib_items);

  rep.accuracy.no_finetune = stage("evaluation", [&] { return pipe.test_accuracy(out.base); });

  CdpParams current = out.base;
  std::set<std::size_t> labelled;
  std::vector<PseudoLabel> auto_total;
  std::vector<ManualLabel> manual_total;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundReport round;
    std::vector<std::size_t> unlabeled;
    for (std::size_t i : pool_idx)
      if (!labelled.count(i)) unlabeled.push_back(i);

    // One batch over calibration then unlabeled pool items.
    std::vector<std::vector<double>> xs;
    for (std::size_t i : calib_idx) xs.push_back(target.items[i].x);
    for (std::size_t i : unlabeled) xs.push_back(target.items[i].x);
    const auto preds = stage("pool prediction", [&] { return pipe.predict(current, xs, cfg.stream.derive(2).derive(r)); });

    const Threshold thr = stage("threshold calibration", [&] {
      std::vector<CalibrationPoint> pts;
      for (std::size_t j = 0; j < calib_items.size(); ++j)
        pts.push_back({score(preds[j], cfg.gating), static_cast<int>(argmax(preds[j].mean)) == calib_items[j].y});
      return calibrate_threshold(pts, cfg.target_accuracy);
    });
    round.threshold = thr.value;
    round.threshold_qualified = thr.qualified;
    if (!thr.qualified)
      rep.warnings.push_back("round " + std::to_string(r) + ": no calibration threshold reaches the target accuracy");

    std::vector<PseudoLabel> auto_set;
    if (cfg.auto_label && thr.qualified) {
      AutoLabelOptions opts{cfg.gating, cfg.top_k_per_class, std::nullopt};
      if (cfg.auto_fraction_cap)
        opts.max_items = static_cast<std::size_t>(std::floor(*cfg.auto_fraction_cap * double(pool_idx.size())));
      const std::span<const Prediction> pool_preds(preds.data() + calib_idx.size(), unlabeled.size());
      auto_set = auto_label(pool_preds, thr.value, opts);
      for (auto& p : auto_set) p.index = unlabeled[p.index];
    }

    std::vector<std::size_t> manual_candidates;
    std::set<std::size_t> auto_members;
    for (const auto& p : auto_set) auto_members.insert(p.index);
    for (std::size_t i : unlabeled)
      if (!auto_members.count(i)) manual_candidates.push_back(i);
    const auto manual = stage("manual labeling", [&] {
      return manual_label(manual_candidates, cfg.manual_fraction, oracle, cfg.stream.derive(3).derive(r), pool_idx.size());
    });
    if (manual.too_small)
      rep.warnings.push_back("round " + std::to_string(r) + ": manual fraction selects fewer than one item");

    round.auto_set_size = auto_set.size();
    round.manual_set_size = manual.items.size();
    if (!auto_set.empty()) round.auto_set_accuracy = oracle.audit(auto_set);
    out.audit.thresholds.push_back(thr);
    out.audit.auto_sets.push_back(auto_set);
    out.audit.manual_sets.push_back(manual.items);

    if (r == 0) {
      stage("fine-tuning", [&] {
        auto only = balance(training_items(target, auto_set, {}), target.c, cfg.balance, cfg.jitter_scale,
                            cfg.stream.derive(4).derive(auto_only).derive(r));
        rep.accuracy.auto_only = pipe.test_accuracy(
            pipe.fine_tune(out.base, only, validation, cfg.stream.derive(5).derive(auto_only).derive(r)));
        auto man = balance(training_items(target, {}, manual.items), target.c, cfg.balance, cfg.jitter_scale,
                           cfg.stream.derive(4).derive(manual_only).derive(r));
        rep.accuracy.manual_only = pipe.test_accuracy(
            pipe.fine_tune(out.base, man, validation, cfg.stream.derive(5).derive(manual_only).derive(r)));
        return 0;
      });
    }

    auto_total.insert(auto_total.end(), auto_set.begin(), auto_set.end());
    manual_total.insert(manual_total.end(), manual.items.begin(), manual.items.end());
    for (const auto& p : auto_set) labelled.insert(p.index);
    for (const auto& m : manual.items) labelled.insert(m.index);

    stage("fine-tuning", [&] {
      const auto raw = training_items(target, auto_total, manual_total);
      round.counts_before = class_counts(raw, target.c);
      const auto balanced = balance(raw, target.c, cfg.balance, cfg.jitter_scale,
                                    cfg.stream.derive(4).derive(auto_manual).derive(r));
      round.counts_after = class_counts(balanced, target.c);
      current = pipe.fine_tune(current, balanced, validation, cfg.stream.derive(5).derive(auto_manual).derive(r));
      round.test_accuracy = pipe.test_accuracy(current);
      return 0;
    });
    rep.rounds.push_back(std::move(round));
  }

  const RoundReport& last = rep.rounds.back();
  rep.threshold = last.threshold;
  rep.threshold_qualified = last.threshold_qualified;
  rep.auto_set_size = auto_total.size();
  if (!auto_total.empty()) rep.auto_set_accuracy = oracle.audit(auto_total);
  rep.manual_set_size = manual_total.size();
  rep.counts_before = last.counts_before;
  rep.counts_after = last.counts_after;
  rep.accuracy.auto_manual = last.test_accuracy;
  out.adapted = current;
  out.test_predictions = pipe.predict(current, pipe.test_x, cfg.stream.derive(6));
  for (std::size_t j = 0; j < out.test_predictions.size(); ++j) out.test_predictions[j].y = pipe.test_y[j];

  if (context) {
    stage("context smoothing", [&] {
      std::vector<std::vector<double>> unaries;
      for (const auto& p : out.test_predictions) unaries.push_back(p.mean);
      const SceneSet scenes = scenes_from_predictions(target.c, pipe.test_y, unaries, context->groups,
                                                      context->min_instances, context->max_instances,
                                                      context->self_cooccurrence, cfg.stream.derive(7));
      if (scenes.scenes.empty()) throw ConfigError("no test item falls in a context group");
      rep.context_argmax_accuracy = argmax_accuracy(scenes);
      rep.crf_smoothed_accuracy = smoothed_accuracy(scenes, context->crf, context->lbp);
      return 0;
    });
  }
  return out;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json round_json(const RoundReport& r) {
  return {{"threshold", r.threshold},
          {"threshold_qualified", r.threshold_qualified},
          {"auto_set_size", r.auto_set_size},
          {"auto_set_accuracy", optional_json(r.auto_set_accuracy)},
          {"manual_set_size", r.manual_set_size},
          {"counts_before_balancing", r.counts_before},
          {"counts_after_balancing", r.counts_after},
          {"test_accuracy", r.test_accuracy}};
}

}  // namespace

void save_adapt_report(const AdaptReport& r, const fs::path& path) {
  json rounds = json::array();
  for (const auto& rr : r.rounds) rounds.push_back(round_json(rr));
  io::write_json({{"pool_size", r.pool_size},
                  {"calibration_size", r.calibration_size},
                  {"threshold", r.threshold},
                  {"threshold_qualified", r.threshold_qualified},
                  {"auto_set_size", r.auto_set_size},
                  {"auto_set_accuracy", optional_json(r.auto_set_accuracy)},
                  {"manual_set_size", r.manual_set_size},
                  {"counts_before_balancing", r.counts_before},
                  {"counts_after_balancing", r.counts_after},
                  {"accuracy",
                   {{"no_finetune", r.accuracy.no_finetune},
                    {"auto_only", r.accuracy.auto_only},
                    {"manual_only", r.accuracy.manual_only},
                    {"auto_manual", r.accuracy.auto_manual}}},
                  {"context_argmax_accuracy", optional_json(r.context_argmax_accuracy)},
                  {"crf_smoothed_accuracy", optional_json(r.crf_smoothed_accuracy)},
                  {"rounds", rounds},
                  {"warnings", r.warnings}},
                 path);
}

void save_audit(const AdaptAudit& a, const fs::path& dir) {
  std::ostringstream calib, autos, manual, thr;
  calib << "index\n";
  for (std::size_t i : a.calibration) calib << i << '\n';
  autos.precision(17);
  autos << "round,index,pseudo_label,score\n";
  for (std::size_t r = 0; r < a.auto_sets.size(); ++r)
    for (const auto& p : a.auto_sets[r]) autos << r << ',' << p.index << ',' << p.label << ',' << p.score << '\n';
  manual << "round,index,label\n";
  for (std::size_t r = 0; r < a.manual_sets.size(); ++r)
    for (const auto& m : a.manual_sets[r]) manual << r << ',' << m.index << ',' << m.y << '\n';
  thr.precision(17);
  thr << "round,threshold,qualified\n";
  for (std::size_t r = 0; r < a.thresholds.size(); ++r)
    thr << r << ',' << a.thresholds[r].value << ',' << (a.thresholds[r].qualified ? 1 : 0) << '\n';
  io::write_text(calib.str(), dir / "calibration.csv");
  io::write_text(autos.str(), dir / "auto_set.csv");
  io::write_text(manual.str(), dir / "manual_set.csv");
  io::write_text(thr.str(), dir / "thresholds.csv");
}

}  // namespace introspect
