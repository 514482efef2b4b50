#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "introspect/numerics.hpp"

namespace introspect {

enum class Split { train, validation, calibration, pool, test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Item {
  std::vector<double> x;
  int y = 0;
  Split split = Split::train;

  friend bool operator==(const Item&, const Item&) = default;
};

/// Labelled feature vectors of a common dimension, each tagged with a split.
struct Dataset {
  std::size_t c = 0;
  std::size_t d = 0;
  std::vector<Item> items;

  std::vector<std::size_t> indices(Split s) const;
  std::size_t count(Split s) const;
  Dataset subset(Split s) const;
  std::vector<std::size_t> class_counts() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Throws SchemaError if any label, dimension or split invariant is broken.
void validate(const Dataset& data, const std::string& path = {});

struct SplitFractions {
  double train = 0.0;
  double validation = 0.0;
  double calibration = 0.0;
  double pool = 0.0;
  double test = 0.0;
};

/// Class-conditional unit-covariance Gaussian clusters. Means sit on a
/// randomly rotated regular simplex with pairwise distance `separation`
/// (needs d ≥ C-1; otherwise means are spaced evenly on a circle in a random
/// plane with adjacent distance `separation`). All items are tagged `train`.
Dataset gen_clusters(std::size_t c, std::size_t d, std::size_t per_class, double separation,
                     RngStream stream);

/// Re-tags items per class so each class is split in the given proportions.
/// Fractions must sum to 1 (within 1e-9).
Dataset assign_splits(Dataset data, const SplitFractions& fractions, RngStream stream);

/// Moves round(fraction · |from|) items tagged `from` to `to`, chosen uniformly.
Dataset carve_split(Dataset data, Split from, Split to, double fraction, RngStream stream);

struct ShiftSpec {
  std::vector<double> mean_offset;
  double noise_scale = 1.0;
};

/// Translates every feature by `mean_offset` and rescales the spread around
/// each class mean by `noise_scale`: scale ≥ 1 adds fresh isotropic noise of
/// variance scale²-1, scale < 1 contracts towards the empirical class mean.
/// Labels and split tags are untouched.
Dataset apply_shift(const Dataset& data, const ShiftSpec& shift, RngStream stream);

struct ShiftedClustersConfig {
  std::size_t c = 4;
  std::size_t d = 8;
  std::size_t per_class = 500;
  double separation = 4.0;
  SplitFractions fractions{0.3, 0.1, 0.0, 0.4, 0.2};
  ShiftSpec shift;  // empty offset means no translation
};

struct ShiftedClusters {
  Dataset source;  // train and validation items, unshifted
  Dataset target;  // calibration, pool and test items, shifted
};

/// gen_clusters, assign_splits and apply_shift on streams 0, 1 and 2.
ShiftedClusters gen_shifted_clusters(const ShiftedClustersConfig& cfg, RngStream stream);

/// Nearest-class-mean classifier; the reference oracle for generated data.
struct NearestMean {
  std::vector<std::vector<double>> means;
  static NearestMean fit(const Dataset& data, std::optional<Split> split = std::nullopt);
  int predict(const std::vector<double>& x) const;
  double accuracy(const Dataset& data, std::optional<Split> split = std::nullopt) const;
};

struct SceneInstance {
  std::vector<double> unary;
  int y = 0;

  friend bool operator==(const SceneInstance&, const SceneInstance&) = default;
};

struct Scene {
  std::vector<SceneInstance> instances;
  Matrix cooc;

  std::size_t size() const { return instances.size(); }

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct SceneSet {
  std::size_t c = 0;
  std::vector<Scene> scenes;

  friend bool operator==(const SceneSet&, const SceneSet&) = default;
};

void validate(const SceneSet& set, const std::string& path = {});

struct SceneGenConfig {
  std::size_t c = 0;
  std::vector<std::vector<int>> groups;
  std::size_t scenes = 0;
  std::size_t min_instances = 1;
  std::size_t max_instances = 1;
  double unary_noise = 0.0;
  bool self_cooccurrence = true;
};

/// Co-occurrence matrix of one group: M(a,b) = 1 iff a and b are both in the
/// group (the diagonal only when `self_cooccurrence`).
Matrix group_cooccurrence(std::size_t c, const std::vector<int>& group, bool self_cooccurrence);

/// Scenes drawn from kit-style groups; unaries are softmax(onehot(y) + noise·ε).
SceneSet gen_scenes(const SceneGenConfig& cfg, RngStream stream);

/// Groups classified items into scenes. Items are bucketed by the first group
/// containing their label (items in no group are skipped); each bucket is
/// shuffled and cut into scenes of size in [min_instances, max_instances], so
/// every bucketed item lands in exactly one scene. `unaries[i]` is the
/// predictive distribution of item i.
SceneSet scenes_from_predictions(std::size_t c, const std::vector<int>& labels,
                                 const std::vector<std::vector<double>>& unaries,
                                 const std::vector<std::vector<int>>& groups,
                                 std::size_t min_instances, std::size_t max_instances,
                                 bool self_cooccurrence, RngStream stream);

/// Divides by the sum. Idempotent on simplex vectors up to rounding.
std::vector<double> normalize_unary(std::vector<double> u);

double argmax_accuracy(const SceneSet& set);

// File formats. All loaders validate and throw SchemaError naming the field.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
void save_scenes(const SceneSet& set, const std::filesystem::path& path);
SceneSet load_scenes(const std::filesystem::path& path);
void save_cooccurrence_csv(const Matrix& m, const std::filesystem::path& path);
Matrix load_cooccurrence_csv(const std::filesystem::path& path);

}  // namespace introspect
