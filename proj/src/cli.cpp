#include "introspect/cli.hpp"

#include <chrono>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "introspect/adapt.hpp"
#include "introspect/bnn.hpp"
#include "introspect/crf.hpp"
#include "introspect/dataio.hpp"
#include "introspect/exec.hpp"
#include "introspect/json_io.hpp"
#include "introspect/laplace.hpp"
#include "introspect/metrics.hpp"
#include "introspect/predictive.hpp"

namespace introspect::cli {

namespace fs = std::filesystem;
using io::Reader;

namespace {

json train_defaults() {
  return {{"dataset_size", 0}, {"batch_size", 32},   {"learning_rate", 1e-3}, {"rms_decay", 0.9},
          {"l2", 3.5e-6},      {"dropout_reg", 1e-5}, {"temperature", 0.1},   {"max_epochs", 50},
          {"patience", 5},     {"hidden", {64, 64}},  {"init_std", 0.1},      {"init_rate", 0.1}};
}

json lbp_defaults() { return {{"max_iters", 100}, {"tol", 1e-6}, {"damping", 0.5}}; }

const std::map<std::string, json>& defaults_table() {
  static const std::map<std::string, json> table = [] {
    std::map<std::string, json> t;
    t["gen-data"] = {
        {"kind", "shifted-clusters"},
        {"clusters",
         {{"c", 4},
          {"d", 8},
          {"per_class", 1000},
          {"separation", 4.0},
          {"fractions", {{"train", 0.3}, {"validation", 0.1}, {"calibration", 0.0}, {"pool", 0.4}, {"test", 0.2}}}}},
        {"shift", {{"offset", 0.9}, {"noise_scale", 1.0}}},
        {"ood_classes", 0},
        {"scenes",
         {{"c", 4},
          {"groups", {{0, 1}, {2, 3}}},
          {"train", 200},
          {"test", 200},
          {"min_instances", 3},
          {"max_instances", 6},
          {"unary_noise", 0.9},
          {"self_cooccurrence", true}}}};
    t["train"] = {{"data", nullptr}, {"variant", "cdp"}, {"train", train_defaults()}};
    t["laplace-fit"] = {{"model", nullptr}, {"data", nullptr}, {"split", "train"}, {"n_scale", 1.0}, {"tau", 15.0}};
    t["predict"] = {{"source", "cdp"},        {"model", nullptr},   {"posterior", nullptr},
                    {"data", nullptr},        {"split", "test"},    {"samples", 50},
                    {"temperature", 0.1},     {"redraw_per_item", false}, {"labels", true}};
    t["eval"] = {{"predictions", nullptr}, {"ood", nullptr}, {"bins", 15}, {"measure", "confidence"},
                 {"require_ood", false}};
    t["train-crf"] = {{"scenes", nullptr},
                      {"learning_rate", 1e-4},
                      {"momentum", 0.9},
                      {"batch_size", 16},
                      {"max_iters", 30000},
                      {"init", {{"theta_u", 1.0}, {"theta_p", 1.0}}},
                      {"lbp", lbp_defaults()},
                      {"trace_every", 100},
                      {"divergence_bound", 1e3}};
    t["smooth"] = {{"scenes", nullptr}, {"crf", nullptr}, {"lbp", lbp_defaults()}};
    t["adapt"] = {{"source", nullptr},
                  {"target", nullptr},
                  {"base_model", nullptr},
                  {"variant", "cdp"},
                  {"target_accuracy", 0.95},
                  {"calib_fraction", 0.01},
                  {"manual_fraction", 0.03},
                  {"auto_label", true},
                  {"auto_fraction_cap", nullptr},
                  {"top_k_per_class", nullptr},
                  {"gating", "confidence"},
                  {"balance", "jitter-duplicate"},
                  {"jitter_scale", 0.1},
                  {"mc_samples", 50},
                  {"rounds", 1},
                  {"base", train_defaults()},
                  {"fine_tune", train_defaults()},
                  {"context",
                   {{"groups", nullptr},
                    {"min_instances", 3},
                    {"max_instances", 6},
                    {"self_cooccurrence", true},
                    {"crf", nullptr},
                    {"lbp", lbp_defaults()}}}};
    t["recipe"] = {{"name", ""}, {"description", ""}, {"comparisons", json::array()}, {"steps", json::array()}};
    return t;
  }();
  return table;
}

const std::map<std::string, std::vector<json::json_pointer>>& path_keys() {
  using P = json::json_pointer;
  static const std::map<std::string, std::vector<P>> keys = {
      {"gen-data", {}},
      {"train", {P("/data")}},
      {"laplace-fit", {P("/model"), P("/data")}},
      {"predict", {P("/model"), P("/posterior"), P("/data")}},
      {"eval", {P("/predictions"), P("/ood")}},
      {"train-crf", {P("/scenes")}},
      {"smooth", {P("/scenes"), P("/crf")}},
      {"adapt", {P("/source"), P("/target"), P("/base_model"), P("/context/crf")}},
      {"recipe", {}}};
  return keys;
}

void merge_into(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError("config" + where + " must be an object");
  for (const auto& [key, value] : user.items()) {
    auto it = base.find(key);
    if (it == base.end()) throw ConfigError("unknown config key " + where + "/" + key);
    if (it->is_object() && value.is_object())
      merge_into(*it, value, where + "/" + key);
    else
      *it = value;
  }
}

bool is_placeholder(const std::string& s) { return s.rfind("${", 0) == 0; }

void resolve_paths(const std::string& command, json& cfg, const fs::path& base_dir) {
  for (const auto& key : path_keys().at(command)) {
    if (!cfg.contains(key)) continue;
    json& v = cfg[key];
    if (!v.is_string() || is_placeholder(v.get<std::string>())) continue;
    fs::path p = v.get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    v = fs::absolute(p).lexically_normal().string();
  }
}

const json& require_command(const std::string& command) {
  auto it = defaults_table().find(command);
  if (it == defaults_table().end()) throw ConfigError("unknown command '" + command + "'");
  return it->second;
}

TrainConfig parse_train(const Reader& r) {
  TrainConfig t;
  t.dataset_size = r.at("dataset_size").count();
  t.batch_size = r.at("batch_size").count();
  t.learning_rate = r.at("learning_rate").number();
  t.rms_decay = r.at("rms_decay").number();
  t.l2 = r.at("l2").number();
  t.dropout_reg = r.at("dropout_reg").number();
  t.temperature = r.at("temperature").number();
  t.max_epochs = r.at("max_epochs").count();
  t.patience = r.at("patience").count();
  t.arch.hidden.clear();
  const Reader hidden = r.at("hidden");
  for (std::size_t i = 0; i < hidden.size(); ++i) t.arch.hidden.push_back(hidden.at(i).count());
  t.arch.init_std = r.at("init_std").number();
  t.arch.init_rate = r.at("init_rate").number();
  return t;
}

LbpConfig parse_lbp(const Reader& r) {
  LbpConfig l;
  l.max_iters = r.at("max_iters").count();
  l.tol = r.at("tol").number();
  l.damping = r.at("damping").number();
  validate(l);
  return l;
}

CrfParams parse_crf(const Reader& r) {
  if (r.raw().is_string()) return load_crf(r.string());
  return {r.at("theta_u").number(), r.at("theta_p").number()};
}

std::vector<std::vector<int>> parse_groups(const Reader& r) {
  std::vector<std::vector<int>> groups(r.size());
  for (std::size_t g = 0; g < r.size(); ++g) {
    const Reader members = r.at(g);
    for (std::size_t i = 0; i < members.size(); ++i) groups[g].push_back(int(members.at(i).integer()));
  }
  return groups;
}

SplitFractions parse_fractions(const Reader& r) {
  return {r.at("train").number(), r.at("validation").number(), r.at("calibration").number(),
          r.at("pool").number(), r.at("test").number()};
}

struct Run {
  json cfg;
  Reader r;
  std::uint64_t seed;
  fs::path out;
  std::vector<std::string> artifacts;

  Run(json c, std::uint64_t s, fs::path o) : cfg(std::move(c)), r(cfg, "config"), seed(s), out(std::move(o)) {}

  fs::path file(const std::string& name) {
    artifacts.push_back(name);
    return out / name;
  }
  RngStream stream() const { return RngStream(seed, 0); }
};

void gen_data(Run& run) {
  const Reader& r = run.r;
  const std::string kind = r.at("kind").string();
  if (kind == "scenes") {
    const Reader s = r.at("scenes");
    SceneGenConfig g;
    g.c = s.at("c").count();
    g.groups = parse_groups(s.at("groups"));
    g.min_instances = s.at("min_instances").count();
    g.max_instances = s.at("max_instances").count();
    g.unary_noise = s.at("unary_noise").number();
    g.self_cooccurrence = s.at("self_cooccurrence").boolean();
    g.scenes = s.at("train").count();
    save_scenes(gen_scenes(g, run.stream().derive(0)), run.file("scenes_train.json"));
    g.scenes = s.at("test").count();
    save_scenes(gen_scenes(g, run.stream().derive(1)), run.file("scenes_test.json"));
    return;
  }
  const Reader cl = r.at("clusters");
  const std::size_t c = cl.at("c").count();
  const std::size_t d = cl.at("d").count();
  const std::size_t per_class = cl.at("per_class").count();
  const double separation = cl.at("separation").number();
  const SplitFractions fractions = parse_fractions(cl.at("fractions"));
  if (kind == "clusters") {
    Dataset data = gen_clusters(c, d, per_class, separation, run.stream().derive(0));
    data = assign_splits(std::move(data), fractions, run.stream().derive(1));
    save_dataset(data, run.file("dataset.json"));
    return;
  }
  if (kind != "shifted-clusters") r.at("kind").fail("expected clusters, shifted-clusters or scenes");

  const std::size_t ood_classes = r.at("ood_classes").count();
  ShiftedClustersConfig sc;
  sc.c = c + ood_classes;
  sc.d = d;
  sc.per_class = per_class;
  sc.separation = separation;
  sc.fractions = fractions;
  const Reader shift = r.at("shift");
  const Reader offset = shift.at("offset");
  sc.shift.mean_offset = offset.raw().is_array() ? offset.numbers() : std::vector<double>(d, offset.number());
  sc.shift.noise_scale = shift.at("noise_scale").number();
  ShiftedClusters gen = gen_shifted_clusters(sc, run.stream());

  // Extra classes become an out-of-distribution test set drawn from the shifted domain.
  auto known = [&](Dataset all) {
    Dataset kept{c, d, {}};
    for (auto& item : all.items)
      if (item.y < int(c)) kept.items.push_back(std::move(item));
    return kept;
  };
  Dataset ood{sc.c, d, {}};
  for (const auto& item : gen.target.items)
    if (item.y >= int(c)) ood.items.push_back({item.x, item.y, Split::test});
  save_dataset(ood_classes ? known(gen.source) : gen.source, run.file("source.json"));
  save_dataset(ood_classes ? known(gen.target) : gen.target, run.file("target.json"));
  if (ood_classes) save_dataset(ood, run.file("ood.json"));
}

void train_cmd(Run& run) {
  const Reader& r = run.r;
  TrainConfig t = parse_train(r.at("train"));
  t.stream = run.stream();
  const Dataset data = load_dataset(r.at("data").string());
  const TrainResult res = train(t, data, parse_variant(r.at("variant").string()));
  save_model(res.params, run.file("model.json"));
  io::write_json({{"epochs_run", res.epochs_run},
                  {"best_epoch", res.best_epoch},
                  {"best_validation_nll", res.best_validation_nll},
                  {"validation_nll", res.validation_nll}},
                 run.file("train_log.json"));
}

void laplace_cmd(Run& run) {
  const Reader& r = run.r;
  const CdpParams params = load_model(r.at("model").string());
  const Dataset data = load_dataset(r.at("data").string());
  const auto train_set = samples(data, parse_split(r.at("split").string()));
  if (train_set.empty()) r.at("split").fail("split is empty");
  const KfacFactors factors = accumulate_kfac(params, train_set);
  save_posterior(posterior(factors, params, r.at("n_scale").number(), r.at("tau").number()),
                 run.file("posterior.json"));
}

void predict_cmd(Run& run) {
  const Reader& r = run.r;
  const std::string kind = r.at("source").string();
  std::size_t t = r.at("samples").count();
  PosteriorSource source;
  if (kind == "deterministic") {
    source = Deterministic{load_model(r.at("model").string())};
    t = 1;
  } else if (kind == "cdp") {
    source = CdpMasks{load_model(r.at("model").string()), r.at("temperature").number()};
  } else if (kind == "laplace") {
    source = LaplaceWeights{load_posterior(r.at("posterior").string()), r.at("redraw_per_item").boolean()};
  } else {
    r.at("source").fail("expected deterministic, cdp or laplace");
  }
  if (t == 0) r.at("samples").fail("must be positive");
  const Dataset data = load_dataset(r.at("data").string());
  const Split split = parse_split(r.at("split").string());
  const bool labels = r.at("labels").boolean();
  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (const auto& item : data.items)
    if (item.split == split) {
      xs.push_back(item.x);
      ys.push_back(item.y);
    }
  const auto results = predict_batch(source, xs, t, run.stream());
  std::vector<Prediction> preds;
  preds.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i)
    preds.push_back(make_prediction(results[i], labels ? std::optional<int>(ys[i]) : std::nullopt));
  save_predictions(preds, run.file("predictions.json"));
}

void eval_cmd(Run& run) {
  const Reader& r = run.r;
  MetricsConfig m;
  m.bins = r.at("bins").count();
  m.measure = parse_measure(r.at("measure").string());
  m.require_ood = r.at("require_ood").boolean();
  validate(m);
  const auto test = load_predictions(r.at("predictions").string());
  std::vector<Prediction> ood;
  if (r.has("ood")) ood = load_predictions(r.at("ood").string());
  const MetricsReport report = evaluate(test, ood, m);
  save_report(report, run.file("report.json"));
  save_histogram_csv(report.histogram, run.file("histogram.csv"));
}

void train_crf_cmd(Run& run) {
  const Reader& r = run.r;
  CrfTrainConfig t;
  t.learning_rate = r.at("learning_rate").number();
  t.momentum = r.at("momentum").number();
  t.batch_size = r.at("batch_size").count();
  t.max_iters = r.at("max_iters").count();
  t.init = parse_crf(r.at("init"));
  t.lbp = parse_lbp(r.at("lbp"));
  t.trace_every = r.at("trace_every").count();
  t.divergence_bound = r.at("divergence_bound").number();
  t.stream = run.stream();
  const SceneSet set = load_scenes(r.at("scenes").string());
  CrfTrainResult res;
  try {
    res = train_crf(set, t);
  } catch (const CrfDivergence& e) {
    save_trace_csv(e.trace(), run.out / "trace.csv");
    throw;
  }
  save_crf(res.params, run.file("crf.json"));
  save_trace_csv(res.trace, run.file("trace.csv"));
  io::write_json({{"not_converged", res.not_converged}}, run.file("train_report.json"));
}

void smooth_cmd(Run& run) {
  const Reader& r = run.r;
  const SceneSet set = load_scenes(r.at("scenes").string());
  const CrfParams params = load_crf(r.at("crf").string());
  const auto smoothed = smooth_all(set, params, parse_lbp(r.at("lbp")));
  json scenes = json::array();
  std::size_t total = 0, correct = 0, not_converged = 0;
  for (std::size_t s = 0; s < smoothed.size(); ++s) {
    const auto truth = labels_of(set.scenes[s]);
    for (std::size_t i = 0; i < truth.size(); ++i) correct += smoothed[s].labels[i] == truth[i];
    total += truth.size();
    not_converged += !smoothed[s].converged;
    scenes.push_back(
        {{"labels", smoothed[s].labels}, {"probs", smoothed[s].probs}, {"converged", smoothed[s].converged}});
  }
  io::write_json({{"scenes", scenes}}, run.file("smoothed.json"));
  io::write_json({{"instances", total},
                  {"argmax_accuracy", argmax_accuracy(set)},
                  {"smoothed_accuracy", total ? double(correct) / double(total) : 0.0},
                  {"not_converged", not_converged},
                  {"theta_u", params.theta_u},
                  {"theta_p", params.theta_p}},
                 run.file("smooth_report.json"));
}

void adapt_cmd(Run& run) {
  const Reader& r = run.r;
  AdaptConfig a;
  a.target_accuracy = r.at("target_accuracy").number();
  a.calib_fraction = r.at("calib_fraction").number();
  a.manual_fraction = r.at("manual_fraction").number();
  a.auto_label = r.at("auto_label").boolean();
  if (r.has("auto_fraction_cap")) a.auto_fraction_cap = r.at("auto_fraction_cap").number();
  if (r.has("top_k_per_class")) a.top_k_per_class = r.at("top_k_per_class").count();
  a.gating = parse_measure(r.at("gating").string());
  a.balance = parse_balance_policy(r.at("balance").string());
  a.jitter_scale = r.at("jitter_scale").number();
  a.mc_samples = r.at("mc_samples").count();
  a.rounds = r.at("rounds").count();
  a.variant = parse_variant(r.at("variant").string());
  a.base = parse_train(r.at("base"));
  a.fine_tune = parse_train(r.at("fine_tune"));
  a.stream = run.stream();

  std::optional<ContextSpec> context;
  const Reader ctx = r.at("context");
  if (ctx.has("groups")) {
    ContextSpec spec;
    spec.groups = parse_groups(ctx.at("groups"));
    spec.min_instances = ctx.at("min_instances").count();
    spec.max_instances = ctx.at("max_instances").count();
    spec.self_cooccurrence = ctx.at("self_cooccurrence").boolean();
    if (!ctx.has("crf")) ctx.at("crf").fail("required when groups are given");
    spec.crf = parse_crf(ctx.at("crf"));
    spec.lbp = parse_lbp(ctx.at("lbp"));
    context = std::move(spec);
  }
  std::optional<CdpParams> base;
  if (r.has("base_model")) base = load_model(r.at("base_model").string());
  const Dataset source = load_dataset(r.at("source").string());
  const Dataset target = load_dataset(r.at("target").string());

  const AdaptOutcome res = run_adaptation(a, source, target, std::move(base), context);
  save_adapt_report(res.report, run.file("adapt_report.json"));
  save_audit(res.audit, run.out / "audit");
  for (const char* name : {"calibration.csv", "auto_set.csv", "manual_set.csv", "thresholds.csv"})
    run.artifacts.push_back(std::string("audit/") + name);
  save_model(res.base, run.file("base_model.json"));
  save_model(res.adapted, run.file("adapted_model.json"));
  save_predictions(res.test_predictions, run.file("test_predictions.json"));
  save_report(evaluate(res.test_predictions, {}, MetricsConfig{}), run.file("eval_report.json"));
}

std::string substitute(std::string s, const std::map<std::string, std::string>& vars) {
  for (const auto& [name, value] : vars) {
    const std::string key = "${" + name + "}";
    for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
      s.replace(pos, key.size(), value);
  }
  return s;
}

json substitute(const json& j, const std::map<std::string, std::string>& vars, std::uint64_t seed) {
  if (j.is_string()) {
    if (j.get<std::string>() == "${seed}") return seed;
    return substitute(j.get<std::string>(), vars);
  }
  if (j.is_array() || j.is_object()) {
    json out = j;
    for (auto it = out.begin(); it != out.end(); ++it) *it = substitute(*it, vars, seed);
    return out;
  }
  return j;
}

void recipe_cmd(Run& run) {
  const json& steps = run.cfg.at("steps");
  std::map<std::string, std::string> vars{{"seed", std::to_string(run.seed)}};
  for (const auto& step : steps) vars[step.at("name").get<std::string>()] = (run.out / step.at("name")).string();
  for (const auto& step : steps) {
    const std::string name = step.at("name").get<std::string>();
    const std::string command = step.at("command").get<std::string>();
    const json cfg = effective_config(command, substitute(step.at("config"), vars, run.seed), fs::current_path());
    const RunResult res = run_command(command, cfg, run.seed, run.out / name);
    for (const auto& a : res.artifacts) run.artifacts.push_back(name + "/" + a);
    run.artifacts.push_back(name + "/manifest.json");
  }
}

json recipe_config(const json& user, const fs::path& base_dir) {
  json cfg = defaults_table().at("recipe");
  merge_into(cfg, user, "");
  if (!cfg.at("steps").is_array() || cfg.at("steps").empty()) throw ConfigError("recipe needs a non-empty steps array");
  std::map<std::string, bool> seen;
  for (auto& step : cfg.at("steps")) {
    if (!step.is_object() || !step.contains("name") || !step.contains("command"))
      throw ConfigError("every recipe step needs a name and a command");
    for (const auto& [key, _] : step.items())
      if (key != "name" && key != "command" && key != "config") throw ConfigError("unknown recipe step key " + key);
    const std::string name = step.at("name").get<std::string>();
    const std::string command = step.at("command").get<std::string>();
    if (name.empty() || name.find('/') != std::string::npos || name == "seed")
      throw ConfigError("invalid recipe step name '" + name + "'");
    if (seen[name]) throw ConfigError("duplicate recipe step '" + name + "'");
    seen[name] = true;
    if (command == "recipe") throw ConfigError("recipes cannot nest");
    step["config"] = effective_config(command, step.value("config", json::object()), base_dir);
  }
  return cfg;
}

std::string version() {
#ifdef INTROSPECT_VERSION
  return INTROSPECT_VERSION;
#else
  return "unknown";
#endif
}

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> list = {"gen-data", "train",     "laplace-fit", "predict", "eval",
                                                "train-crf", "smooth", "adapt",       "recipe"};
  return list;
}

json default_config(const std::string& command) { return require_command(command); }

json effective_config(const std::string& command, const json& user, const fs::path& base_dir) {
  if (command == "recipe") {
    require_command(command);
    return recipe_config(user, base_dir);
  }
  json cfg = require_command(command);
  json resolved = user.is_null() ? json::object() : user;
  if (!resolved.is_object()) throw ConfigError("config must be a JSON object");
  resolve_paths(command, resolved, base_dir);
  merge_into(cfg, resolved, "");
  return cfg;
}

RunResult run_command(const std::string& command, const json& cfg, std::uint64_t seed, const fs::path& out_dir) {
  require_command(command);
  const auto start = std::chrono::steady_clock::now();
  const fs::path out = fs::absolute(out_dir).lexically_normal();
  fs::create_directories(out);
  Run run(cfg, seed, out);
  static const std::map<std::string, void (*)(Run&)> dispatch = {
      {"gen-data", gen_data},   {"train", train_cmd},         {"laplace-fit", laplace_cmd},
      {"predict", predict_cmd}, {"eval", eval_cmd},           {"train-crf", train_crf_cmd},
      {"smooth", smooth_cmd},   {"adapt", adapt_cmd},         {"recipe", recipe_cmd}};
  dispatch.at(command)(run);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_json({{"command", command},
                  {"version", version()},
                  {"seed", seed},
                  {"workers", worker_count()},
                  {"out", out.string()},
                  {"config", cfg},
                  {"artifacts", run.artifacts},
                  {"wall_time_seconds", wall}},
                 out / "manifest.json");
  return {run.artifacts};
}

namespace {

struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t workers = 0;
  std::vector<std::string> sets;
};

json parse_set_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

json build_user_config(const std::string& command, const CommonFlags& flags) {
  json user = json::object();
  if (!flags.config.empty()) {
    user = io::read_json(flags.config);
    if (!user.is_object()) throw SchemaError(flags.config, "", "config must be a JSON object");
  }
  const fs::path config_dir = flags.config.empty() ? fs::current_path() : fs::absolute(flags.config).parent_path();
  json overrides = json::object();
  for (const auto& s : flags.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
    overrides[json::json_pointer("/" + s.substr(0, eq))] = parse_set_value(s.substr(eq + 1));
  }
  if (command == "recipe") {
    if (!overrides.empty()) throw ConfigError("--set is not supported for recipes");
    return effective_config(command, user, config_dir);
  }
  // Paths in the file are relative to the file; paths given on the command line to the working directory.
  json merged = require_command(command);
  resolve_paths(command, user, config_dir);
  merge_into(merged, user, "");
  resolve_paths(command, overrides, fs::current_path());
  merge_into(merged, overrides, "");
  return merged;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Uncertainty-aware classification, contextual smoothing and self-adaptation experiments."};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());

  std::map<std::string, CommonFlags> flags;
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> about = {
      {"gen-data", "generate clusters, shifted clusters or contextual scenes"},
      {"train", "train an MLP (cdp, deterministic-dropout or plain)"},
      {"laplace-fit", "fit a K-FAC Laplace posterior around a trained model"},
      {"predict", "Monte Carlo predictions from a model or posterior"},
      {"eval", "calibration and separability metrics of predictions"},
      {"train-crf", "fit CRF weights on training scenes"},
      {"smooth", "smooth scene labels with a trained CRF"},
      {"adapt", "run the self-adaptation loop on a shifted target"},
      {"recipe", "run every step of a recipe file"}};
  for (const auto& name : commands()) {
    auto* sub = app.add_subcommand(name, about.at(name));
    auto& f = flags[name];
    sub->add_option("--config", f.config, "JSON config file");
    sub->add_option("--seed", f.seed, "random seed")->capture_default_str();
    sub->add_option("--out", f.out, "output directory")->required();
    sub->add_option("--workers", f.workers, "OpenMP threads (0 = runtime default)");
    if (name != "recipe") sub->add_option("--set", f.sets, "config override KEY=VALUE, KEY a /-separated path");
    subs[name] = sub;
  }
  std::string manifest_path, replay_out;
  std::size_t replay_workers = 0;
  auto* replay = app.add_subcommand("replay", "re-run a manifest into a new output directory");
  replay->add_option("--manifest", manifest_path, "manifest.json of an earlier run")->required();
  replay->add_option("--out", replay_out, "output directory")->required();
  replay->add_option("--workers", replay_workers, "OpenMP threads (0 = runtime default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* scope = &app;
    for (const auto* sub : app.get_subcommands()) scope = sub;
    std::cerr << scope->help();
    return exit_config;
  }

  try {
    if (replay->parsed()) {
      const json manifest = io::read_json(manifest_path);
      const Reader m(manifest, manifest_path);
      const std::string command = m.at("command").string();
      set_worker_count(replay_workers);
      const json cfg = effective_config(command, m.at("config").raw(), fs::absolute(manifest_path).parent_path());
      run_command(command, cfg, std::uint64_t(m.at("seed").integer()), replay_out);
      return exit_ok;
    }
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      const auto& f = flags[name];
      set_worker_count(f.workers);
      const json cfg = build_user_config(name, f);
      run_command(name, cfg, f.seed, f.out);
    }
    return exit_ok;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_config;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_config;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return exit_numerical;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_config;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_failure;
  }
}

}  // namespace introspect::cli
