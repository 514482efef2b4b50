#include "introspect/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

void validate(const LbpConfig& cfg) {
  if (cfg.max_iters == 0) throw ConfigError("LBP max iterations must be positive");
  if (!(cfg.tol > 0.0)) throw ConfigError("LBP tolerance must be positive");
  if (!(cfg.damping >= 0.0 && cfg.damping < 1.0)) throw ConfigError("LBP damping must lie in [0,1)");
}

EdgeList full_edges(std::size_t n) {
  EdgeList e;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) e.emplace_back(i, j);
  return e;
}

namespace {

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

std::size_t classes(const Scene& scene) { return scene.cooc.rows(); }

std::vector<double> node_log_potential(const Scene& scene, std::size_t i, const CrfParams& params) {
  std::vector<double> v(scene.instances[i].unary);
  for (double& x : v) x *= params.theta_u;
  return v;
}

void check_edges(const EdgeList& edges, std::size_t n) {
  for (const auto& [i, j] : edges)
    if (i >= n || j >= n || i == j) throw ConfigError("edge list refers to invalid instances");
}

void normalize_log(std::vector<double>& v) {
  const double z = log_sum_exp(v);
  for (double& x : v) x -= z;
}

}  // namespace

Beliefs lbp(const Scene& scene, const CrfParams& params, const LbpConfig& cfg, const EdgeList* edges) {
  validate(cfg);
  const std::size_t n = scene.size(), c = classes(scene);
  Beliefs out;
  out.edges = edges ? *edges : full_edges(n);
  check_edges(out.edges, n);
  const std::size_t m = out.edges.size();

  std::vector<std::vector<double>> psi(n);
  for (std::size_t i = 0; i < n; ++i) psi[i] = node_log_potential(scene, i, params);

  // Directed message 2e carries edges[e].first -> second, 2e+1 the reverse.
  std::vector<std::vector<std::size_t>> incoming(n);
  for (std::size_t e = 0; e < m; ++e) {
    incoming[out.edges[e].second].push_back(2 * e);
    incoming[out.edges[e].first].push_back(2 * e + 1);
  }
  auto source = [&](std::size_t d) { return d % 2 == 0 ? out.edges[d / 2].first : out.edges[d / 2].second; };

  // Edge factor scaled so its largest entry is 1; products fall back to
  // log-space sums if they underflow.
  double shift = -std::numeric_limits<double>::infinity();
  for (double v : scene.cooc.values()) shift = std::max(shift, params.theta_p * v);
  Matrix factor(c, c);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b) factor(a, b) = std::exp(params.theta_p * scene.cooc(a, b) - shift);

  std::vector<std::vector<double>> msg(2 * m, std::vector<double>(c, -std::log(double(c))));
  std::vector<std::vector<double>> prob(2 * m, std::vector<double>(c, 1.0 / double(c)));
  std::vector<std::vector<double>> next(msg), next_prob(prob);
  std::vector<double> h(c), eh(c), terms(c);
  out.converged = m == 0;
  for (std::size_t it = 1; it <= cfg.max_iters && m > 0; ++it) {
    double change = 0.0;
    for (std::size_t d = 0; d < 2 * m; ++d) {
      const std::size_t i = source(d);
      const std::size_t back = d ^ 1u;
      const bool forward = d % 2 == 0;
      h = psi[i];
      for (std::size_t in : incoming[i])
        if (in != back)
          for (std::size_t a = 0; a < c; ++a) h[a] += msg[in][a];
      const double hmax = *std::max_element(h.begin(), h.end());
      for (std::size_t a = 0; a < c; ++a) eh[a] = std::exp(h[a] - hmax);
      auto& np = next_prob[d];
      double total = 0.0;
      for (std::size_t b = 0; b < c; ++b) {
        double v = 0.0;
        for (std::size_t a = 0; a < c; ++a) v += eh[a] * (forward ? factor(a, b) : factor(b, a));
        np[b] = v;
        total += v;
      }
      if (total > 0.0 && std::isfinite(total)) {
        for (double& v : np) v /= total;
      } else {
        for (std::size_t b = 0; b < c; ++b) {
          for (std::size_t a = 0; a < c; ++a)
            terms[a] = h[a] + params.theta_p * (forward ? scene.cooc(a, b) : scene.cooc(b, a));
          np[b] = log_sum_exp(terms);
        }
        normalize_log(np);
        for (double& v : np) v = std::exp(v);
      }
      auto& nd = next[d];
      for (std::size_t b = 0; b < c; ++b) {
        const double old_p = prob[d][b];
        const double new_p = cfg.damping * old_p + (1.0 - cfg.damping) * np[b];
        change = std::max(change, std::abs(new_p - old_p));
        np[b] = new_p;
        nd[b] = std::log(new_p);
      }
    }
    std::swap(prob, next_prob);
    std::swap(msg, next);
    out.iters = it;
    if (change < cfg.tol) {
      out.converged = true;
      break;
    }
  }

  out.node.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    h = psi[i];
    for (std::size_t in : incoming[i])
      for (std::size_t a = 0; a < c; ++a) h[a] += msg[in][a];
    out.node[i] = softmax(h);
  }
  out.pair.assign(m, Matrix(c, c));
  std::vector<double> hi(c), hj(c), joint(c * c);
  for (std::size_t e = 0; e < m; ++e) {
    const auto [i, j] = out.edges[e];
    hi = psi[i];
    for (std::size_t in : incoming[i])
      if (in != 2 * e + 1)
        for (std::size_t a = 0; a < c; ++a) hi[a] += msg[in][a];
    hj = psi[j];
    for (std::size_t in : incoming[j])
      if (in != 2 * e)
        for (std::size_t b = 0; b < c; ++b) hj[b] += msg[in][b];
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) joint[a * c + b] = hi[a] + hj[b] + params.theta_p * scene.cooc(a, b);
    const auto p = softmax(joint);
    std::copy(p.begin(), p.end(), out.pair[e].values().begin());
  }
  return out;
}

SceneFeatures features(const Scene& scene, std::span<const int> labels, const EdgeList& edges) {
  SceneFeatures f;
  for (std::size_t i = 0; i < scene.size(); ++i) f.unary += scene.instances[i].unary[labels[i]];
  for (const auto& [i, j] : edges) f.pair += scene.cooc(labels[i], labels[j]);
  return f;
}

std::vector<int> labels_of(const Scene& scene) {
  std::vector<int> y;
  for (const auto& inst : scene.instances) y.push_back(inst.y);
  return y;
}

ExactMarginals brute_force(const Scene& scene, const CrfParams& params, const EdgeList* edges) {
  const std::size_t n = scene.size(), c = classes(scene);
  ExactMarginals out;
  out.edges = edges ? *edges : full_edges(n);
  check_edges(out.edges, n);
  double states = 1.0;
  for (std::size_t i = 0; i < n; ++i) states *= double(c);
  if (states > 1e6) throw ConfigError("brute force needs C^n <= 1e6");
  const auto total = static_cast<std::size_t>(states);

  std::vector<double> logw(total);
  std::vector<int> y(n, 0);
  for (std::size_t s = 0; s < total; ++s) {
    std::size_t r = s;
    for (std::size_t i = n; i-- > 0;) {
      y[i] = static_cast<int>(r % c);
      r /= c;
    }
    const auto f = features(scene, y, out.edges);
    logw[s] = params.theta_u * f.unary + params.theta_p * f.pair;
  }
  out.log_z = log_sum_exp(logw);
  out.node.assign(n, std::vector<double>(c, 0.0));
  out.pair.assign(out.edges.size(), Matrix(c, c));
  for (std::size_t s = 0; s < total; ++s) {
    const double p = std::exp(logw[s] - out.log_z);
    std::size_t r = s;
    for (std::size_t i = n; i-- > 0;) {
      y[i] = static_cast<int>(r % c);
      r /= c;
    }
    for (std::size_t i = 0; i < n; ++i) out.node[i][y[i]] += p;
    for (std::size_t e = 0; e < out.edges.size(); ++e) out.pair[e](y[out.edges[e].first], y[out.edges[e].second]) += p;
  }
  return out;
}

double bethe_log_z(const Scene& scene, const CrfParams& params, const Beliefs& beliefs) {
  const std::size_t n = scene.size(), c = classes(scene);
  std::vector<std::size_t> degree(n, 0);
  for (const auto& [i, j] : beliefs.edges) {
    ++degree[i];
    ++degree[j];
  }
  std::vector<std::vector<double>> psi(n);
  for (std::size_t i = 0; i < n; ++i) psi[i] = node_log_potential(scene, i, params);
  double neg_f = 0.0;
  for (std::size_t e = 0; e < beliefs.edges.size(); ++e) {
    const auto [i, j] = beliefs.edges[e];
    const Matrix& b = beliefs.pair[e];
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t k = 0; k < c; ++k)
        if (b(a, k) > 0.0)
          neg_f += b(a, k) * (params.theta_p * scene.cooc(a, k) + psi[i][a] + psi[j][k]) - xlogx(b(a, k));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double node = 0.0;
    for (std::size_t a = 0; a < c; ++a) node += beliefs.node[i][a] * psi[i][a] - xlogx(beliefs.node[i][a]);
    neg_f -= (double(degree[i]) - 1.0) * node;
  }
  return neg_f;
}

namespace {

struct SceneTerm {
  double nll = 0.0;
  double grad_u = 0.0;
  double grad_p = 0.0;
  bool converged = true;
};

SceneTerm scene_term(const Scene& scene, const CrfParams& params, Inference inference, const LbpConfig& cfg) {
  const std::size_t c = classes(scene);
  const auto y = labels_of(scene);
  const EdgeList edges = full_edges(scene.size());
  const auto obs = features(scene, y, edges);
  std::vector<std::vector<double>> node;
  std::vector<Matrix> pair;
  SceneTerm t;
  double log_z = 0.0;
  if (inference == Inference::exact) {
    auto ex = brute_force(scene, params, &edges);
    node = std::move(ex.node);
    pair = std::move(ex.pair);
    log_z = ex.log_z;
  } else {
    auto b = lbp(scene, params, cfg, &edges);
    log_z = bethe_log_z(scene, params, b);
    t.converged = b.converged;
    node = std::move(b.node);
    pair = std::move(b.pair);
  }
  double eu = 0.0, ep = 0.0;
  for (std::size_t i = 0; i < scene.size(); ++i)
    for (std::size_t a = 0; a < c; ++a) eu += node[i][a] * scene.instances[i].unary[a];
  for (const auto& pb : pair)
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) ep += pb(a, b) * scene.cooc(a, b);
  t.nll = log_z - params.theta_u * obs.unary - params.theta_p * obs.pair;
  t.grad_u = eu - obs.unary;
  t.grad_p = ep - obs.pair;
  return t;
}

}  // namespace

CrfObjective nll_and_grad(std::span<const Scene> scenes, const CrfParams& params, Inference inference,
                          const LbpConfig& lbp_cfg, Exec exec) {
  if (scenes.empty()) throw ConfigError("CRF batch is empty");
  std::vector<SceneTerm> terms(scenes.size());
  for_each_index(scenes.size(), exec,
                 [&](std::size_t s) { terms[s] = scene_term(scenes[s], params, inference, lbp_cfg); });
  CrfObjective obj;
  obj.approximate = inference == Inference::lbp;
  for (const auto& t : terms) {
    obj.nll += t.nll;
    obj.grad_u += t.grad_u;
    obj.grad_p += t.grad_p;
    obj.not_converged += t.converged ? 0 : 1;
  }
  const double k = double(scenes.size());
  obj.nll /= k;
  obj.grad_u /= k;
  obj.grad_p /= k;
  return obj;
}

void validate(const CrfTrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("CRF learning rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("CRF momentum must lie in [0,1)");
  if (cfg.batch_size == 0) throw ConfigError("CRF batch size must be positive");
  if (cfg.trace_every == 0) throw ConfigError("CRF trace interval must be positive");
  if (!std::isfinite(cfg.init.theta_u) || !std::isfinite(cfg.init.theta_p))
    throw ConfigError("CRF initial parameters must be finite");
  validate(cfg.lbp);
}

CrfTrainResult train_crf(const SceneSet& set, const CrfTrainConfig& cfg, Exec exec) {
  validate(cfg);
  if (set.scenes.empty()) throw ConfigError("no training scenes");
  CrfTrainResult res;
  res.params = cfg.init;
  double vu = 0.0, vp = 0.0;
  std::vector<std::size_t> order;
  std::size_t pos = 0, epoch = 0;
  std::vector<Scene> batch;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    batch.clear();
    while (batch.size() < std::min(cfg.batch_size, set.scenes.size())) {
      if (pos == order.size()) {
        RngStream s = cfg.stream.derive(epoch++);
        order = permutation(set.scenes.size(), s);
        pos = 0;
      }
      batch.push_back(set.scenes[order[pos++]]);
    }
    const auto obj = nll_and_grad(batch, res.params, Inference::lbp, cfg.lbp, exec);
    res.not_converged += obj.not_converged;
    vu = cfg.momentum * vu - cfg.learning_rate * obj.grad_u;
    vp = cfg.momentum * vp - cfg.learning_rate * obj.grad_p;
    res.params.theta_u += vu;
    res.params.theta_p += vp;
    const bool diverged = !(std::abs(res.params.theta_u) <= cfg.divergence_bound &&
                            std::abs(res.params.theta_p) <= cfg.divergence_bound);
    if (it % cfg.trace_every == 0 || it == 1 || it == cfg.max_iters || diverged)
      res.trace.push_back({it, obj.nll, res.params.theta_u, res.params.theta_p});
    if (diverged)
      throw CrfDivergence("CRF training diverged at iteration " + std::to_string(it) + " (theta_u=" +
                              std::to_string(res.params.theta_u) + ", theta_p=" +
                              std::to_string(res.params.theta_p) + ")",
                          res.trace);
  }
  return res;
}

Smoothed smooth(const Scene& scene, const CrfParams& params, const LbpConfig& cfg) {
  auto b = lbp(scene, params, cfg);
  Smoothed s;
  s.converged = b.converged;
  for (const auto& p : b.node) s.labels.push_back(static_cast<int>(argmax(p)));
  s.probs = std::move(b.node);
  return s;
}

std::vector<Smoothed> smooth_all(const SceneSet& set, const CrfParams& params, const LbpConfig& cfg, Exec exec) {
  std::vector<Smoothed> out(set.scenes.size());
  for_each_index(set.scenes.size(), exec, [&](std::size_t s) { out[s] = smooth(set.scenes[s], params, cfg); });
  return out;
}

double smoothed_accuracy(const SceneSet& set, const CrfParams& params, const LbpConfig& cfg, Exec exec) {
  const auto all = smooth_all(set, params, cfg, exec);
  std::size_t hits = 0, total = 0;
  for (std::size_t s = 0; s < all.size(); ++s)
    for (std::size_t i = 0; i < all[s].labels.size(); ++i) {
      hits += all[s].labels[i] == set.scenes[s].instances[i].y;
      ++total;
    }
  return total ? double(hits) / double(total) : 0.0;
}

void save_crf(const CrfParams& params, const fs::path& path) {
  io::write_json({{"theta_u", params.theta_u}, {"theta_p", params.theta_p}}, path);
}

CrfParams load_crf(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  CrfParams p{r.at("theta_u").number(), r.at("theta_p").number()};
  if (!std::isfinite(p.theta_u)) r.at("theta_u").fail("must be finite");
  if (!std::isfinite(p.theta_p)) r.at("theta_p").fail("must be finite");
  return p;
}

void save_trace_csv(const std::vector<CrfTracePoint>& trace, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "iter,nll_estimate,theta_u,theta_p\n";
  for (const auto& t : trace) out << t.iter << ',' << t.nll << ',' << t.theta_u << ',' << t.theta_p << '\n';
  io::write_text(out.str(), path);
}

}  // namespace introspect
