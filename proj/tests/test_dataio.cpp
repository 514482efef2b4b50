#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "introspect/dataio.hpp"
#include "introspect/errors.hpp"
#include "introspect/json_io.hpp"

using namespace introspect;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "introspect_test_dataio";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("gen_clusters counts and balance") {
  const Dataset d = gen_clusters(2, 3, 50, 4.0, RngStream(1, 0));
  CHECK(d.items.size() == 100);
  CHECK(d.class_counts() == std::vector<std::size_t>{50, 50});
  CHECK_NOTHROW(validate(d));
}

TEST_CASE("gen_clusters is deterministic per stream") {
  CHECK(gen_clusters(3, 4, 20, 3.0, RngStream(9, 1)) == gen_clusters(3, 4, 20, 3.0, RngStream(9, 1)));
  CHECK_FALSE(gen_clusters(3, 4, 20, 3.0, RngStream(9, 1)) == gen_clusters(3, 4, 20, 3.0, RngStream(9, 2)));
}

TEST_CASE("gen_clusters places means at the requested separation") {
  const std::size_t per = 4000;
  const Dataset d = gen_clusters(4, 5, per, 6.0, RngStream(3, 3));
  const auto nm = NearestMean::fit(d);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double dist = 0.0;
      for (std::size_t i = 0; i < 5; ++i) dist += std::pow(nm.means[a][i] - nm.means[b][i], 2);
      CHECK(std::abs(std::sqrt(dist) - 6.0) < 0.15);
    }
}

TEST_CASE("well separated clusters are solved by the nearest-mean oracle") {
  Dataset d = gen_clusters(2, 2, 500, 10.0, RngStream(4, 0));
  d = assign_splits(std::move(d), {.train = 0.5, .test = 0.5}, RngStream(4, 1));
  const auto nm = NearestMean::fit(d, Split::train);
  CHECK(nm.accuracy(d, Split::test) > 0.99);
}

TEST_CASE("assign_splits and carve_split") {
  Dataset d = gen_clusters(3, 2, 100, 3.0, RngStream(5, 0));
  d = assign_splits(std::move(d), {.train = 0.6, .validation = 0.2, .test = 0.2}, RngStream(5, 1));
  CHECK(d.count(Split::train) == 180);
  CHECK(d.count(Split::validation) == 60);
  CHECK(d.count(Split::test) == 60);
  d = carve_split(std::move(d), Split::train, Split::calibration, 0.1, RngStream(5, 2));
  CHECK(d.count(Split::calibration) == 18);
  CHECK(d.count(Split::train) == 162);
  CHECK_THROWS_AS(assign_splits(d, {.train = 0.5}, RngStream(0, 0)), ConfigError);
}

TEST_CASE("apply_shift identity and label preservation") {
  Dataset d = gen_clusters(3, 2, 30, 3.0, RngStream(6, 0));
  d = assign_splits(std::move(d), {.train = 0.5, .pool = 0.5}, RngStream(6, 1));
  const Dataset same = apply_shift(d, {{0.0, 0.0}, 1.0}, RngStream(6, 2));
  CHECK(same == d);

  const Dataset moved = apply_shift(d, {{5.0, 5.0}, 1.7}, RngStream(6, 3));
  REQUIRE(moved.items.size() == d.items.size());
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    CHECK(moved.items[i].y == d.items[i].y);
    CHECK(moved.items[i].split == d.items[i].split);
  }
  const Dataset tight = apply_shift(d, {{0.0, 0.0}, 0.5}, RngStream(6, 4));
  const auto m0 = NearestMean::fit(d).means;
  const auto m1 = NearestMean::fit(tight).means;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(m0[k][i] - m1[k][i]) < 1e-12);
  CHECK_THROWS_AS(apply_shift(d, {{1.0, 2.0, 3.0}, 1.0}, RngStream(0, 0)), ConfigError);
}

TEST_CASE("a large offset breaks the source nearest-mean oracle") {
  Dataset src = gen_clusters(3, 2, 300, 10.0, RngStream(8, 0));
  const auto nm = NearestMean::fit(src);
  CHECK(nm.accuracy(src) > 0.99);
  const Dataset shifted = apply_shift(src, {{5.0, 5.0}, 1.0}, RngStream(8, 1));
  CHECK(nm.accuracy(shifted) < 0.90);
}

TEST_CASE("gen_scenes construction") {
  SceneGenConfig cfg{.c = 3, .groups = {{0, 1}}, .scenes = 20, .min_instances = 2,
                     .max_instances = 4, .unary_noise = 0.0};
  const SceneSet set = gen_scenes(cfg, RngStream(1, 0));
  CHECK(set.scenes.size() == 20);
  CHECK(argmax_accuracy(set) == 1.0);
  const Matrix& m = set.scenes[0].cooc;
  CHECK(m == Matrix::from_rows({{1, 1, 0}, {1, 1, 0}, {0, 0, 0}}));
  for (const auto& s : set.scenes) {
    CHECK(s.size() >= 2);
    CHECK(s.size() <= 4);
    for (const auto& inst : s.instances) CHECK((inst.y == 0 || inst.y == 1));
  }
  CHECK(group_cooccurrence(3, {0, 1}, false) == Matrix::from_rows({{0, 1, 0}, {1, 0, 0}, {0, 0, 0}}));
  cfg.groups = {{}};
  CHECK_THROWS_AS(gen_scenes(cfg, RngStream(1, 0)), ConfigError);
}

TEST_CASE("noisy scene unaries are imperfect but informative") {
  const SceneGenConfig cfg{.c = 3, .groups = {{0, 1}, {2}}, .scenes = 200,
                           .min_instances = 3, .max_instances = 6, .unary_noise = 2.0};
  const SceneSet set = gen_scenes(cfg, RngStream(2, 0));
  const double acc = argmax_accuracy(set);
  CHECK(acc > 0.4);
  CHECK(acc < 0.8);
  for (const auto& s : set.scenes)
    for (const auto& inst : s.instances) {
      double sum = 0.0;
      for (double v : inst.unary) sum += v;
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("unary normalization is idempotent") {
  const std::vector<double> raw{0.2, 0.5, 0.9};
  const auto once = normalize_unary(raw);
  const auto twice = normalize_unary(once);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(once[i] - twice[i]) < 1e-15);
}

TEST_CASE("scenes_from_predictions places every grouped item once") {
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 4};
  std::vector<std::vector<double>> unaries(labels.size(), std::vector<double>(5, 0.2));
  const SceneSet set =
      scenes_from_predictions(5, labels, unaries, {{0, 1}, {2, 3}}, 1, 3, true, RngStream(1, 1));
  std::size_t total = 0;
  for (const auto& s : set.scenes) {
    total += s.size();
    const int first = s.instances.front().y;
    for (const auto& inst : s.instances) CHECK((inst.y < 2) == (first < 2));
  }
  CHECK(total == 8);
}

TEST_CASE("dataset round trip and validation") {
  Dataset d = gen_clusters(3, 2, 10, 2.0, RngStream(3, 0));
  d = assign_splits(std::move(d), {.train = 0.4, .calibration = 0.2, .pool = 0.2, .test = 0.2},
                    RngStream(3, 1));
  const auto path = scratch("dataset.json");
  save_dataset(d, path);
  CHECK(load_dataset(path) == d);

  auto j = io::read_json(path);
  j["items"][4]["y"] = 3;
  io::write_json(j, path);
  try {
    load_dataset(path);
    FAIL("expected schema error");
  } catch (const SchemaError& e) {
    CHECK(e.field() == "/items/4/y");
    CHECK(e.path() == path.string());
  }
  j["items"][4]["y"] = 0;
  j["items"][2]["split"] = "holdout";
  io::write_json(j, path);
  CHECK_THROWS_AS(load_dataset(path), SchemaError);
}

TEST_CASE("scene set round trip and validation") {
  const SceneGenConfig cfg{.c = 4, .groups = {{0, 1}, {2, 3}}, .scenes = 5, .min_instances = 1,
                           .max_instances = 3, .unary_noise = 1.0};
  const SceneSet set = gen_scenes(cfg, RngStream(4, 4));
  const auto path = scratch("scenes.json");
  save_scenes(set, path);
  CHECK(load_scenes(path) == set);

  auto j = io::read_json(path);
  j["scenes"][1]["m"][0][1] = 2;
  io::write_json(j, path);
  try {
    load_scenes(path);
    FAIL("expected schema error");
  } catch (const SchemaError& e) {
    CHECK(e.field() == "/scenes/1/m/0/1");
  }
}

TEST_CASE("co-occurrence CSV round trip and validation") {
  const Matrix m = group_cooccurrence(4, {1, 3}, true);
  const auto path = scratch("cooc.csv");
  save_cooccurrence_csv(m, path);
  CHECK(load_cooccurrence_csv(path) == m);
  std::ofstream(path) << "0,1\n1,0.5\n";
  CHECK_THROWS_AS(load_cooccurrence_csv(path), SchemaError);
  std::ofstream(path) << "0,1\n0,0\n";
  CHECK_THROWS_AS(load_cooccurrence_csv(path), SchemaError);
}

TEST_CASE("shifted clusters benchmark") {
  ShiftedClustersConfig cfg;
  cfg.per_class = 100;
  cfg.shift.mean_offset.assign(cfg.d, 0.9);
  const auto a = gen_shifted_clusters(cfg, RngStream(21, 0));
  const auto b = gen_shifted_clusters(cfg, RngStream(21, 0));
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  CHECK(a.source.items.size() + a.target.items.size() == cfg.c * cfg.per_class);
  for (const auto& it : a.source.items) CHECK((it.split == Split::train || it.split == Split::validation));
  for (const auto& it : a.target.items) CHECK((it.split == Split::pool || it.split == Split::test));
  // The target moved by the offset: its class means differ from the source's by about 0.9 per axis.
  const auto src = NearestMean::fit(a.source).means;
  const auto tgt = NearestMean::fit(a.target).means;
  double mean_shift = 0.0;
  for (std::size_t k = 0; k < cfg.c; ++k)
    for (std::size_t i = 0; i < cfg.d; ++i) mean_shift += tgt[k][i] - src[k][i];
  CHECK(mean_shift / double(cfg.c * cfg.d) == doctest::Approx(0.9).epsilon(0.1));

  ShiftedClustersConfig none = cfg;
  none.shift = {};
  const auto c = gen_shifted_clusters(none, RngStream(21, 0));
  CHECK(c.source == a.source);
}
