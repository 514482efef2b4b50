#include "introspect/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

namespace introspect {

namespace fs = std::filesystem;
using io::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::calibration: return "calibration";
    case Split::pool: return "pool";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "calibration") return Split::calibration;
  if (s == "pool") return Split::pool;
  if (s == "test") return Split::test;
  throw SchemaError("", "", "unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].split == s) out.push_back(i);
  return out;
}

std::size_t Dataset::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [s](const Item& it) { return it.split == s; }));
}

Dataset Dataset::subset(Split s) const {
  Dataset out{c, d, {}};
  for (const auto& it : items)
    if (it.split == s) out.items.push_back(it);
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(c, 0);
  for (const auto& it : items) ++counts.at(static_cast<std::size_t>(it.y));
  return counts;
}

void validate(const Dataset& data, const std::string& path) {
  if (data.c == 0) throw SchemaError(path, "/c", "class count must be positive");
  if (data.d == 0) throw SchemaError(path, "/d", "dimension must be positive");
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const auto& it = data.items[i];
    const std::string where = "/items/" + std::to_string(i);
    if (it.x.size() != data.d)
      throw SchemaError(path, where + "/x", "expected " + std::to_string(data.d) + " features");
    if (it.y < 0 || static_cast<std::size_t>(it.y) >= data.c)
      throw SchemaError(path, where + "/y", "label " + std::to_string(it.y) + " outside [0, c)");
    for (double v : it.x)
      if (!std::isfinite(v)) throw SchemaError(path, where + "/x", "non-finite feature");
  }
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Gram–Schmidt over `vectors`, dropping (numerically) dependent ones.
std::vector<std::vector<double>> orthonormalize(std::vector<std::vector<double>> vectors) {
  std::vector<std::vector<double>> basis;
  for (auto& v : vectors) {
    for (const auto& b : basis) {
      const double p = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm < 1e-9) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

std::vector<std::vector<double>> random_frame(std::size_t d, std::size_t k, RngStream& stream) {
  for (;;) {
    std::vector<std::vector<double>> raw(k, std::vector<double>(d));
    for (auto& v : raw)
      for (double& x : v) x = stream.normal();
    auto basis = orthonormalize(std::move(raw));
    if (basis.size() == k) return basis;
  }
}

std::vector<std::vector<double>> cluster_means(std::size_t c, std::size_t d, double separation,
                                               RngStream& stream) {
  std::vector<std::vector<double>> means(c, std::vector<double>(d, 0.0));
  if (d + 1 >= c) {
    // Centered simplex vertices e_k - 1/C have pairwise distance √2.
    std::vector<std::vector<double>> vertices(c, std::vector<double>(c, -1.0 / double(c)));
    for (std::size_t k = 0; k < c; ++k) vertices[k][k] += 1.0;
    const auto simplex_basis = orthonormalize(vertices);
    const auto frame = random_frame(d, simplex_basis.size(), stream);
    const double scale = separation / std::numbers::sqrt2;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < simplex_basis.size(); ++j) {
        const double coord = dot(vertices[k], simplex_basis[j]) * scale;
        for (std::size_t i = 0; i < d; ++i) means[k][i] += coord * frame[j][i];
      }
  } else {
    const auto frame = random_frame(d, 2, stream);
    const double radius = separation / (2.0 * std::sin(std::numbers::pi / double(c)));
    for (std::size_t k = 0; k < c; ++k) {
      const double angle = 2.0 * std::numbers::pi * double(k) / double(c);
      for (std::size_t i = 0; i < d; ++i)
        means[k][i] = radius * (std::cos(angle) * frame[0][i] + std::sin(angle) * frame[1][i]);
    }
  }
  return means;
}

}  // namespace

Dataset gen_clusters(std::size_t c, std::size_t d, std::size_t per_class, double separation,
                     RngStream stream) {
  if (c < 2) throw ConfigError("gen_clusters: need at least 2 classes");
  if (d < 2) throw ConfigError("gen_clusters: need at least 2 dimensions");
  if (per_class < 10) throw ConfigError("gen_clusters: need at least 10 items per class");
  if (!(separation > 0.0)) throw ConfigError("gen_clusters: separation must be positive");
  const auto means = cluster_means(c, d, separation, stream);
  Dataset data{c, d, {}};
  data.items.reserve(c * per_class);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t n = 0; n < per_class; ++n) {
      Item it;
      it.y = static_cast<int>(k);
      it.x = means[k];
      for (double& v : it.x) v += stream.normal();
      data.items.push_back(std::move(it));
    }
  return data;
}

Dataset assign_splits(Dataset data, const SplitFractions& f, RngStream stream) {
  const double fractions[] = {f.train, f.validation, f.calibration, f.pool, f.test};
  const Split splits[] = {Split::train, Split::validation, Split::calibration, Split::pool,
                          Split::test};
  double total = 0.0;
  for (double x : fractions) {
    if (x < 0.0) throw ConfigError("assign_splits: negative fraction");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("assign_splits: fractions must sum to 1");
  for (std::size_t k = 0; k < data.c; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.items.size(); ++i)
      if (static_cast<std::size_t>(data.items[i].y) == k) members.push_back(i);
    const auto order = permutation(members.size(), stream);
    const double n = static_cast<double>(members.size());
    double cum = 0.0;
    std::size_t begin = 0;
    for (std::size_t s = 0; s < 5; ++s) {
      cum += fractions[s];
      const std::size_t end = s == 4 ? members.size() : static_cast<std::size_t>(std::lround(cum * n));
      for (std::size_t j = begin; j < end; ++j) data.items[members[order[j]]].split = splits[s];
      begin = std::max(begin, end);
    }
  }
  return data;
}

Dataset carve_split(Dataset data, Split from, Split to, double fraction, RngStream stream) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("carve_split: fraction outside [0,1]");
  const auto members = data.indices(from);
  const auto order = permutation(members.size(), stream);
  const auto take = static_cast<std::size_t>(std::lround(fraction * double(members.size())));
  for (std::size_t j = 0; j < take; ++j) data.items[members[order[j]]].split = to;
  return data;
}

Dataset apply_shift(const Dataset& data, const ShiftSpec& shift, RngStream stream) {
  if (shift.mean_offset.size() != data.d)
    throw ConfigError("apply_shift: offset has " + std::to_string(shift.mean_offset.size()) +
                      " entries, data has dimension " + std::to_string(data.d));
  if (!(shift.noise_scale > 0.0) || !std::isfinite(shift.noise_scale))
    throw ConfigError("apply_shift: noise scale must be positive and finite");
  for (double v : shift.mean_offset)
    if (!std::isfinite(v)) throw ConfigError("apply_shift: non-finite offset");

  Dataset out = data;
  const double s = shift.noise_scale;
  if (s < 1.0) {
    const auto centre = NearestMean::fit(data).means;
    for (auto& it : out.items) {
      const auto& m = centre[static_cast<std::size_t>(it.y)];
      for (std::size_t i = 0; i < data.d; ++i) it.x[i] = m[i] + s * (it.x[i] - m[i]);
    }
  } else if (s > 1.0) {
    const double extra = std::sqrt(s * s - 1.0);
    for (auto& it : out.items)
      for (double& v : it.x) v += extra * stream.normal();
  }
  for (auto& it : out.items)
    for (std::size_t i = 0; i < data.d; ++i) it.x[i] += shift.mean_offset[i];
  return out;
}

ShiftedClusters gen_shifted_clusters(const ShiftedClustersConfig& cfg, RngStream stream) {
  const Dataset all = assign_splits(gen_clusters(cfg.c, cfg.d, cfg.per_class, cfg.separation, stream.derive(0)),
                                    cfg.fractions, stream.derive(1));
  ShiftedClusters out;
  out.source.c = out.target.c = all.c;
  out.source.d = out.target.d = all.d;
  for (const auto& it : all.items) {
    const bool src = it.split == Split::train || it.split == Split::validation;
    (src ? out.source : out.target).items.push_back(it);
  }
  ShiftSpec shift = cfg.shift;
  if (shift.mean_offset.empty()) shift.mean_offset.assign(all.d, 0.0);
  out.target = apply_shift(out.target, shift, stream.derive(2));
  return out;
}

NearestMean NearestMean::fit(const Dataset& data, std::optional<Split> split) {
  NearestMean nm;
  nm.means.assign(data.c, std::vector<double>(data.d, 0.0));
  std::vector<std::size_t> counts(data.c, 0);
  for (const auto& it : data.items) {
    if (split && it.split != *split) continue;
    const auto k = static_cast<std::size_t>(it.y);
    ++counts[k];
    for (std::size_t i = 0; i < data.d; ++i) nm.means[k][i] += it.x[i];
  }
  for (std::size_t k = 0; k < data.c; ++k)
    if (counts[k] > 0)
      for (double& v : nm.means[k]) v /= double(counts[k]);
  return nm;
}

int NearestMean::predict(const std::vector<double>& x) const {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < means.size(); ++k) {
    double dist = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) dist += (x[i] - means[k][i]) * (x[i] - means[k][i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = k;
    }
  }
  return static_cast<int>(best);
}

double NearestMean::accuracy(const Dataset& data, std::optional<Split> split) const {
  std::size_t n = 0;
  std::size_t hit = 0;
  for (const auto& it : data.items) {
    if (split && it.split != *split) continue;
    ++n;
    hit += predict(it.x) == it.y;
  }
  return n == 0 ? 0.0 : double(hit) / double(n);
}

void validate(const SceneSet& set, const std::string& path) {
  const std::size_t c = set.c;
  if (c == 0) throw SchemaError(path, "/c", "class count must be positive");
  for (std::size_t s = 0; s < set.scenes.size(); ++s) {
    const auto& scene = set.scenes[s];
    const std::string where = "/scenes/" + std::to_string(s);
    if (scene.cooc.rows() != c || scene.cooc.cols() != c)
      throw SchemaError(path, where + "/m", "expected a " + std::to_string(c) + "x" +
                                                std::to_string(c) + " matrix");
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) {
        const double v = scene.cooc(a, b);
        if (v != 0.0 && v != 1.0)
          throw SchemaError(path, where + "/m/" + std::to_string(a) + "/" + std::to_string(b),
                            "entries must be 0 or 1");
        if (v != scene.cooc(b, a))
          throw SchemaError(path, where + "/m", "matrix must be symmetric");
      }
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      const auto& inst = scene.instances[i];
      const std::string iw = where + "/instances/" + std::to_string(i);
      if (inst.unary.size() != c)
        throw SchemaError(path, iw + "/unary", "expected " + std::to_string(c) + " entries");
      double sum = 0.0;
      for (double v : inst.unary) {
        if (!(v >= 0.0) || !std::isfinite(v))
          throw SchemaError(path, iw + "/unary", "entries must be finite and non-negative");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw SchemaError(path, iw + "/unary", "must sum to 1");
      if (inst.y < 0 || static_cast<std::size_t>(inst.y) >= c)
        throw SchemaError(path, iw + "/y", "label " + std::to_string(inst.y) + " outside [0, c)");
    }
  }
}

Matrix group_cooccurrence(std::size_t c, const std::vector<int>& group, bool self_cooccurrence) {
  if (group.empty()) throw ConfigError("co-occurrence group is empty");
  Matrix m(c, c);
  for (int a : group) {
    if (a < 0 || static_cast<std::size_t>(a) >= c)
      throw ConfigError("group member " + std::to_string(a) + " outside [0, c)");
    for (int b : group)
      if (a != b || self_cooccurrence) m(std::size_t(a), std::size_t(b)) = 1.0;
  }
  return m;
}

std::vector<double> normalize_unary(std::vector<double> u) {
  double s = 0.0;
  for (double v : u) s += v;
  if (!(s > 0.0)) throw Error("normalize_unary: non-positive mass");
  for (double& v : u) v /= s;
  return u;
}

SceneSet gen_scenes(const SceneGenConfig& cfg, RngStream stream) {
  if (cfg.groups.empty()) throw ConfigError("gen_scenes: no groups");
  if (cfg.min_instances < 1 || cfg.min_instances > cfg.max_instances)
    throw ConfigError("gen_scenes: invalid instance range");
  std::vector<Matrix> coocs;
  for (const auto& g : cfg.groups) coocs.push_back(group_cooccurrence(cfg.c, g, cfg.self_cooccurrence));

  SceneSet set{cfg.c, {}};
  set.scenes.reserve(cfg.scenes);
  for (std::size_t s = 0; s < cfg.scenes; ++s) {
    const std::size_t g = stream.below(cfg.groups.size());
    const auto& group = cfg.groups[g];
    const std::size_t n = cfg.min_instances + stream.below(cfg.max_instances - cfg.min_instances + 1);
    Scene scene;
    scene.cooc = coocs[g];
    for (std::size_t i = 0; i < n; ++i) {
      SceneInstance inst;
      inst.y = group[stream.below(group.size())];
      std::vector<double> logits(cfg.c, 0.0);
      logits[std::size_t(inst.y)] = 1.0;
      for (double& v : logits) v += cfg.unary_noise * stream.normal();
      inst.unary = softmax(logits);
      scene.instances.push_back(std::move(inst));
    }
    set.scenes.push_back(std::move(scene));
  }
  return set;
}

SceneSet scenes_from_predictions(std::size_t c, const std::vector<int>& labels,
                                 const std::vector<std::vector<double>>& unaries,
                                 const std::vector<std::vector<int>>& groups,
                                 std::size_t min_instances, std::size_t max_instances,
                                 bool self_cooccurrence, RngStream stream) {
  if (labels.size() != unaries.size()) throw ConfigError("scenes_from_predictions: size mismatch");
  if (min_instances < 1 || min_instances > max_instances)
    throw ConfigError("scenes_from_predictions: invalid instance range");
  std::vector<std::vector<std::size_t>> buckets(groups.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (std::find(groups[g].begin(), groups[g].end(), labels[i]) != groups[g].end()) {
        buckets[g].push_back(i);
        break;
      }
  SceneSet set{c, {}};
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const Matrix m = group_cooccurrence(c, groups[g], self_cooccurrence);
    const auto order = permutation(buckets[g].size(), stream);
    std::size_t pos = 0;
    while (pos < order.size()) {
      std::size_t n = min_instances + stream.below(max_instances - min_instances + 1);
      n = std::min(n, order.size() - pos);
      Scene scene;
      scene.cooc = m;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = buckets[g][order[pos + j]];
        scene.instances.push_back({normalize_unary(unaries[i]), labels[i]});
      }
      pos += n;
      set.scenes.push_back(std::move(scene));
    }
  }
  return set;
}

double argmax_accuracy(const SceneSet& set) {
  std::size_t n = 0;
  std::size_t hit = 0;
  for (const auto& scene : set.scenes)
    for (const auto& inst : scene.instances) {
      ++n;
      hit += static_cast<int>(argmax(inst.unary)) == inst.y;
    }
  return n == 0 ? 0.0 : double(hit) / double(n);
}

void save_dataset(const Dataset& data, const fs::path& path) {
  json items = json::array();
  for (const auto& it : data.items)
    items.push_back({{"x", it.x}, {"y", it.y}, {"split", to_string(it.split)}});
  io::write_json({{"c", data.c}, {"d", data.d}, {"items", std::move(items)}}, path);
}

Dataset load_dataset(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  Dataset data;
  data.c = r.at("c").count();
  data.d = r.at("d").count();
  const auto items = r.at("items");
  data.items.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto item = items.at(i);
    auto& it = data.items[i];
    it.x = item.at("x").numbers();
    it.y = static_cast<int>(item.at("y").integer());
    try {
      it.split = parse_split(item.at("split").string());
    } catch (const SchemaError&) {
      item.at("split").fail("unknown split tag");
    }
  }
  validate(data, path.string());
  return data;
}

void save_scenes(const SceneSet& set, const fs::path& path) {
  json scenes = json::array();
  for (const auto& scene : set.scenes) {
    json m = json::array();
    for (std::size_t a = 0; a < scene.cooc.rows(); ++a) {
      json row = json::array();
      for (std::size_t b = 0; b < scene.cooc.cols(); ++b) row.push_back(scene.cooc(a, b) != 0.0 ? 1 : 0);
      m.push_back(std::move(row));
    }
    json instances = json::array();
    for (const auto& inst : scene.instances) instances.push_back({{"unary", inst.unary}, {"y", inst.y}});
    scenes.push_back({{"m", std::move(m)}, {"instances", std::move(instances)}});
  }
  io::write_json({{"c", set.c}, {"scenes", std::move(scenes)}}, path);
}

SceneSet load_scenes(const fs::path& path) {
  const json j = io::read_json(path);
  const io::Reader r(j, path.string());
  SceneSet set;
  set.c = r.at("c").count();
  const auto scenes = r.at("scenes");
  set.scenes.resize(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto sr = scenes.at(s);
    set.scenes[s].cooc = sr.at("m").matrix();
    const auto inst = sr.at("instances");
    for (std::size_t i = 0; i < inst.size(); ++i)
      set.scenes[s].instances.push_back(
          {inst.at(i).at("unary").numbers(), static_cast<int>(inst.at(i).at("y").integer())});
  }
  validate(set, path.string());
  return set;
}

void save_cooccurrence_csv(const Matrix& m, const fs::path& path) {
  std::ostringstream out;
  for (std::size_t a = 0; a < m.rows(); ++a) {
    for (std::size_t b = 0; b < m.cols(); ++b) out << (b ? "," : "") << (m(a, b) != 0.0 ? 1 : 0);
    out << "\n";
  }
  io::write_text(out.str(), path);
}

Matrix load_cooccurrence_csv(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      const std::string where = "row " + std::to_string(rows.size()) + " col " + std::to_string(row.size());
      if (cell == "0") row.push_back(0.0);
      else if (cell == "1") row.push_back(1.0);
      else throw SchemaError(path.string(), where, "entries must be 0 or 1, got '" + cell + "'");
    }
    rows.push_back(std::move(row));
  }
  const std::size_t n = rows.size();
  for (std::size_t a = 0; a < n; ++a)
    if (rows[a].size() != n)
      throw SchemaError(path.string(), "row " + std::to_string(a), "matrix must be square");
  Matrix m = Matrix::from_rows(rows);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (m(a, b) != m(b, a))
        throw SchemaError(path.string(), "row " + std::to_string(a), "matrix must be symmetric");
  return m;
}

}  // namespace introspect
