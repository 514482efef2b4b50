#include "introspect/bnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::cdp: return "cdp";
    case Variant::deterministic_dropout: return "deterministic-dropout";
    case Variant::plain: return "plain";
  }
  return "cdp";
}

Variant parse_variant(const std::string& s) {
  if (s == "cdp") return Variant::cdp;
  if (s == "deterministic-dropout") return Variant::deterministic_dropout;
  if (s == "plain") return Variant::plain;
  throw ConfigError("unknown variant '" + s + "' (expected cdp, deterministic-dropout or plain)");
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double DenseLayer::rate() const { return rho ? sigmoid(*rho) : 0.0; }

void validate(const CdpParams& params, const std::string& path) {
  if (params.layers.empty()) throw SchemaError(path, "/layers", "network has no layers");
  std::size_t width = params.d;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    const std::string where = "/layers/" + std::to_string(l);
    if (layer.fan_in() != width)
      throw SchemaError(path, where + "/w", "expected " + std::to_string(width) + " input rows");
    if (layer.b.size() != layer.fan_out())
      throw SchemaError(path, where + "/b", "bias length differs from weight columns");
    if (layer.rho && !std::isfinite(*layer.rho) && *layer.rho != -std::numeric_limits<double>::infinity())
      throw SchemaError(path, where + "/rho", "dropout logit must be finite");
    width = layer.fan_out();
  }
  if (width != params.c)
    throw SchemaError(path, "/layers", "last layer emits " + std::to_string(width) +
                                           " logits, expected " + std::to_string(params.c));
}

CdpParams init_params(std::size_t d, std::size_t c, Variant variant, const Architecture& arch,
                      RngStream stream) {
  if (!(arch.init_rate > 0.0 && arch.init_rate < 1.0))
    throw ConfigError("initial dropout rate must lie in (0,1)");
  CdpParams p{d, c, variant, {}};
  std::vector<std::size_t> widths{d};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(c);
  const double rho0 = std::log(arch.init_rate) - std::log1p(-arch.init_rate);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    layer.w = Matrix(widths[l], widths[l + 1]);
    for (double& v : layer.w.values()) v = arch.init_std * stream.normal();
    layer.b.assign(widths[l + 1], 0.0);
    if (l > 0 && variant != Variant::plain) layer.rho = rho0;
    p.layers.push_back(std::move(layer));
  }
  return p;
}

double concrete_mask(double p, double t, double u) {
  if (!(p > 0.0 && p < 1.0)) throw Error("concrete_mask: rate must lie in (0,1)");
  if (!(u > 0.0 && u < 1.0)) throw Error("concrete_mask: uniform draw must lie in (0,1)");
  if (!(t > 0.0)) throw Error("concrete_mask: temperature must be positive");
  return sigmoid((std::log(p) - std::log1p(-p) + std::log(u) - std::log1p(-u)) / t);
}

namespace {

// z̃ from the dropout logit directly, so that rho = -inf gives z̃ = 0.
double mask_from_logit(double rho, double t, double u) {
  return sigmoid((rho + std::log(u) - std::log1p(-u)) / t);
}

// Multiplicative factor (1 - z̃)/(1 - p).
double keep_factor(double z, double p) { return (1.0 - z) / (1.0 - p); }

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace

MaskSet sample_masks(const CdpParams& params, double temperature, RngStream& stream) {
  MaskSet masks(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (!layer.has_dropout()) continue;
    masks[l].resize(layer.fan_in());
    for (double& z : masks[l]) z = mask_from_logit(*layer.rho, temperature, stream.uniform());
  }
  return masks;
}

ForwardResult forward_with_masks(const CdpParams& params, std::span<const double> x,
                                 const MaskSet& masks) {
  if (x.size() != params.d)
    throw Error("forward: input has " + std::to_string(x.size()) + " features, model expects " +
                std::to_string(params.d));
  if (!masks.empty() && masks.size() != params.layers.size())
    throw Error("forward: mask set does not match layer count");
  ForwardResult res;
  res.trace.layers.resize(params.layers.size());
  std::vector<double> a(x.begin(), x.end());
  std::vector<double> scaled;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    auto& tr = res.trace.layers[l];
    tr.input = a;
    const std::vector<double>* in = &a;
    if (!masks.empty() && !masks[l].empty()) {
      if (!layer.has_dropout() || masks[l].size() != layer.fan_in())
        throw Error("forward: mask shape mismatch at layer " + std::to_string(l));
      tr.mask = masks[l];
      const double p = layer.rate();
      scaled.resize(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) scaled[j] = a[j] * keep_factor(masks[l][j], p);
      in = &scaled;
    }
    tr.pre = layer.b;
    for (std::size_t i = 0; i < layer.fan_in(); ++i) {
      const double v = (*in)[i];
      if (v == 0.0) continue;
      const auto wrow = layer.w.row(i);
      for (std::size_t j = 0; j < layer.fan_out(); ++j) tr.pre[j] += v * wrow[j];
    }
    const bool last = l + 1 == params.layers.size();
    tr.out = tr.pre;
    if (!last)
      for (double& v : tr.out) v = std::max(v, 0.0);
    a = tr.out;
  }
  res.logits = std::move(a);
  return res;
}

ForwardResult forward(const CdpParams& params, std::span<const double> x, ForwardMode mode,
                      RngStream& stream, double temperature) {
  if (mode == ForwardMode::deterministic) return forward_with_masks(params, x, {});
  return forward_with_masks(params, x, sample_masks(params, temperature, stream));
}

std::vector<double> logits_deterministic(const CdpParams& params, std::span<const double> x) {
  return forward_with_masks(params, x, {}).logits;
}

std::vector<Sample> samples(const Dataset& data, Split split) {
  std::vector<Sample> out;
  for (const auto& it : data.items)
    if (it.split == split) out.push_back({it.x, it.y});
  return out;
}

std::vector<Sample> samples(const std::vector<Item>& items) {
  std::vector<Sample> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back({it.x, it.y});
  return out;
}

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(cfg.rms_decay > 0.0 && cfg.rms_decay < 1.0)) throw ConfigError("rms decay must lie in (0,1)");
  if (cfg.l2 < 0.0 || cfg.dropout_reg < 0.0) throw ConfigError("regularization coefficients must be >= 0");
  if (!(cfg.temperature > 0.0 && cfg.temperature <= 1.0))
    throw ConfigError("temperature must lie in (0,1]");
  if (cfg.max_epochs == 0) throw ConfigError("max epochs must be positive");
  if (cfg.patience == 0) throw ConfigError("patience must be positive");
}

CdpParams zeros_like(const CdpParams& params) {
  CdpParams g = params;
  for (auto& layer : g.layers) {
    std::fill(layer.w.values().begin(), layer.w.values().end(), 0.0);
    std::fill(layer.b.begin(), layer.b.end(), 0.0);
    if (layer.rho) layer.rho = 0.0;
  }
  return g;
}

PreactivationGrads backprop(const CdpParams& params, const ForwardTrace& trace,
                            std::span<const double> dlogits, double temperature,
                            CdpParams* grads) {
  const std::size_t L = params.layers.size();
  PreactivationGrads delta(L);
  delta[L - 1].assign(dlogits.begin(), dlogits.end());
  for (std::size_t l = L; l-- > 0;) {
    const auto& layer = params.layers[l];
    const auto& tr = trace.layers[l];
    const auto& d = delta[l];
    const bool masked = !tr.mask.empty();
    const double p = layer.rate();

    if (grads) {
      auto& g = grads->layers[l];
      for (std::size_t i = 0; i < layer.fan_in(); ++i) {
        const double xin = masked ? tr.input[i] * keep_factor(tr.mask[i], p) : tr.input[i];
        if (xin == 0.0) continue;
        auto grow = g.w.row(i);
        for (std::size_t j = 0; j < layer.fan_out(); ++j) grow[j] += xin * d[j];
      }
      for (std::size_t j = 0; j < layer.fan_out(); ++j) g.b[j] += d[j];
    }
    if (l == 0 && !(masked && grads)) break;

    // dLoss/dx̃ = W δ
    std::vector<double> dx(layer.fan_in(), 0.0);
    for (std::size_t i = 0; i < layer.fan_in(); ++i) {
      const auto wrow = layer.w.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < layer.fan_out(); ++j) s += wrow[j] * d[j];
      dx[i] = s;
    }
    if (masked) {
      double drho = 0.0;
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const double z = tr.mask[i];
        // d/drho of (1 - z̃)/(1 - p) with z̃ = sigmoid((rho + logit u)/t).
        const double dfactor = -z * (1.0 - z) / (temperature * (1.0 - p)) + (1.0 - z) * p / (1.0 - p);
        drho += dx[i] * tr.input[i] * dfactor;
        dx[i] *= keep_factor(z, p);
      }
      if (grads && grads->layers[l].rho) *grads->layers[l].rho += drho;
    }
    if (l == 0) break;
    const auto& prev_pre = trace.layers[l - 1].pre;
    auto& dprev = delta[l - 1];
    dprev.resize(prev_pre.size());
    for (std::size_t i = 0; i < prev_pre.size(); ++i) dprev[i] = prev_pre[i] > 0.0 ? dx[i] : 0.0;
  }
  return delta;
}

double regularizer(const CdpParams& params, const TrainConfig& cfg) {
  double r = 0.0;
  for (const auto& layer : params.layers) {
    double wsq = 0.0;
    for (double v : layer.w.values()) wsq += v * v;
    double bsq = 0.0;
    for (double v : layer.b) bsq += v * v;
    if (layer.has_dropout()) {
      const double p = layer.rate();
      r += cfg.l2 * wsq / (1.0 - p) +
           cfg.dropout_reg * double(layer.fan_in()) * (xlogx(p) + xlogx(1.0 - p));
    } else {
      r += cfg.l2 * wsq;
    }
    r += cfg.l2 * bsq;
  }
  return r;
}

namespace {

void add_regularizer_grads(const CdpParams& params, const TrainConfig& cfg, CdpParams& grads) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    auto& g = grads.layers[l];
    const double p = layer.rate();
    const double wscale = layer.has_dropout() ? 2.0 * cfg.l2 / (1.0 - p) : 2.0 * cfg.l2;
    for (std::size_t i = 0; i < layer.w.size(); ++i) g.w.values()[i] += wscale * layer.w.values()[i];
    for (std::size_t j = 0; j < layer.b.size(); ++j) g.b[j] += 2.0 * cfg.l2 * layer.b[j];
    if (layer.has_dropout() && g.rho && p > 0.0) {
      double wsq = 0.0;
      for (double v : layer.w.values()) wsq += v * v;
      // dp/drho = p(1-p)
      *g.rho += cfg.l2 * wsq * p / (1.0 - p) +
                cfg.dropout_reg * double(layer.fan_in()) * (std::log(p) - std::log1p(-p)) * p * (1.0 - p);
    }
  }
}

void check_finite_trace(const ForwardTrace& trace) {
  for (std::size_t l = 0; l < trace.layers.size(); ++l)
    for (double v : trace.layers[l].pre)
      if (!std::isfinite(v))
        throw NumericalError("non-finite loss: pre-activation of layer " + std::to_string(l) +
                             " is not finite");
}

}  // namespace

ElboTerms elbo_loss_and_grads(const CdpParams& params, std::span<const Sample> batch,
                              const TrainConfig& cfg, RngStream stream) {
  if (batch.empty()) throw Error("elbo_loss_and_grads: empty batch");
  const double n = double(cfg.dataset_size == 0 ? batch.size() : cfg.dataset_size);
  const double scale = n / double(batch.size());

  ElboTerms out;
  out.grads = zeros_like(params);
  const MaskSet masks = sample_masks(params, cfg.temperature, stream);
  double nll = 0.0;
  std::vector<double> dlogits(params.c);
  for (const auto& s : batch) {
    const auto fr = forward_with_masks(params, s.x, masks);
    const auto logp = log_softmax(fr.logits);
    const double item = -logp[std::size_t(s.y)];
    if (!std::isfinite(item)) {
      check_finite_trace(fr.trace);
      throw NumericalError("non-finite loss at output layer " + std::to_string(params.layers.size() - 1));
    }
    nll += item;
    for (std::size_t k = 0; k < params.c; ++k)
      dlogits[k] = scale * (std::exp(logp[k]) - (k == std::size_t(s.y) ? 1.0 : 0.0));
    backprop(params, fr.trace, dlogits, cfg.temperature, &out.grads);
  }
  out.data = scale * nll;
  out.regularizer = regularizer(params, cfg);
  out.loss = out.data + out.regularizer;
  if (!std::isfinite(out.loss)) {
    for (std::size_t l = 0; l < params.layers.size(); ++l)
      if (!all_finite(params.layers[l].w))
        throw NumericalError("non-finite loss: weights of layer " + std::to_string(l));
    throw NumericalError("non-finite loss in regularizer");
  }
  add_regularizer_grads(params, cfg, out.grads);
  if (params.variant == Variant::deterministic_dropout)
    for (auto& g : out.grads.layers)
      if (g.rho) g.rho = 0.0;
  return out;
}

double mean_nll(const CdpParams& params, std::span<const Sample> data) {
  if (data.empty()) throw Error("mean_nll: empty data");
  double total = 0.0;
  for (const auto& s : data) total -= log_softmax(logits_deterministic(params, s.x))[std::size_t(s.y)];
  return total / double(data.size());
}

double accuracy(const CdpParams& params, std::span<const Sample> data) {
  if (data.empty()) throw Error("accuracy: empty data");
  std::size_t hit = 0;
  for (const auto& s : data) hit += static_cast<int>(argmax(logits_deterministic(params, s.x))) == s.y;
  return double(hit) / double(data.size());
}

namespace {

struct RmsProp {
  double lr;
  double decay;
  CdpParams cache;

  void step(CdpParams& params, const CdpParams& grads) {
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      auto& p = params.layers[l];
      const auto& g = grads.layers[l];
      auto& c = cache.layers[l];
      update(p.w.values(), g.w.values(), c.w.values());
      update(p.b, g.b, c.b);
      if (p.rho && params.variant == Variant::cdp) {
        double& v = *c.rho;
        v = decay * v + (1.0 - decay) * (*g.rho) * (*g.rho);
        *p.rho -= lr * (*g.rho) / (std::sqrt(v) + 1e-8);
      }
    }
  }

  void update(std::span<double> w, std::span<const double> g, std::span<double> v) const {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = decay * v[i] + (1.0 - decay) * g[i] * g[i];
      w[i] -= lr * g[i] / (std::sqrt(v[i]) + 1e-8);
    }
  }
};

}  // namespace

TrainResult fit(CdpParams init, std::span<const Sample> train_set, std::span<const Sample> validation,
                const TrainConfig& cfg) {
  validate(cfg);
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (validation.empty()) throw ConfigError("validation split is empty");
  TrainConfig batch_cfg = cfg;
  if (batch_cfg.dataset_size == 0) batch_cfg.dataset_size = train_set.size();

  TrainResult res;
  res.params = init;
  res.best_validation_nll = mean_nll(init, validation);
  res.validation_nll.push_back(res.best_validation_nll);

  CdpParams params = std::move(init);
  RmsProp opt{cfg.learning_rate, cfg.rms_decay, zeros_like(params)};
  std::size_t since_best = 0;
  std::vector<Sample> batch;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    RngStream epoch_stream = cfg.stream.derive(epoch);
    const auto order = permutation(train_set.size(), epoch_stream);
    for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch_size, ++b) {
      batch.clear();
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j)
        batch.push_back(train_set[order[j]]);
      const auto terms = elbo_loss_and_grads(params, batch, batch_cfg, epoch_stream.derive(b));
      opt.step(params, terms.grads);
    }
    res.epochs_run = epoch;
    const double v = mean_nll(params, validation);
    res.validation_nll.push_back(v);
    if (v < res.best_validation_nll) {
      res.best_validation_nll = v;
      res.best_epoch = epoch;
      res.params = params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return res;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, Variant variant) {
  const auto tr = samples(data, Split::train);
  const auto va = samples(data, Split::validation);
  if (tr.empty()) throw ConfigError("dataset has no train split");
  if (va.empty()) throw ConfigError("dataset has no validation split");
  CdpParams init = init_params(data.d, data.c, variant, cfg.arch, cfg.stream.derive(0));
  return fit(std::move(init), tr, va, cfg);
}

void save_model(const CdpParams& params, const fs::path& path) {
  json layers = json::array();
  for (const auto& layer : params.layers) {
    json l = {{"w", io::to_json(layer.w)}, {"b", layer.b}};
    l["rho"] = layer.rho ? json(*layer.rho) : json(nullptr);
    layers.push_back(std::move(l));
  }
  io::write_json({{"layers", std::move(layers)},
                  {"c", params.c},
                  {"d", params.d},
                  {"variant", to_string(params.variant)}},
                 path);
}

CdpParams load_model(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  CdpParams p;
  p.c = r.at("c").count();
  p.d = r.at("d").count();
  try {
    p.variant = parse_variant(r.at("variant").string());
  } catch (const ConfigError& e) {
    r.at("variant").fail(e.what());
  }
  const auto layers = r.at("layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto lr = layers.at(l);
    DenseLayer layer;
    layer.w = lr.at("w").matrix();
    layer.b = lr.at("b").numbers();
    if (lr.has("rho")) layer.rho = lr.at("rho").number();
    p.layers.push_back(std::move(layer));
  }
  validate(p, path.string());
  return p;
}

}  // namespace introspect
