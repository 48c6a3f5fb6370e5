#pragma once

#include "fsfl/funcspace.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fsfl {

/// Inputs one per row. `origin` maps every row back to its index in the root
/// dataset it was drawn from, so splits can be checked for disjointness.
struct LabeledDataset {
  Eigen::MatrixXd inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<std::size_t> origin;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }

  /// Throws ParameterError on length mismatch, out-of-range labels or non-finite inputs.
  void validate() const;
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  Eigen::MatrixXd targets() const;  // one-hot
  std::vector<std::size_t> class_counts() const;
};

/// Unlabeled inputs for distillation.
struct PublicSet {
  Eigen::MatrixXd inputs;

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }
};

/// Gaussian clusters with means equally spaced on a circle of `radius` in R^2.
/// Class-major order, exactly per_class points per class.
LabeledDataset synth_blobs(std::size_t classes, std::size_t per_class, double spread, std::uint64_t seed,
                           double radius = 1.0);
/// Same with explicit means (one per row).
LabeledDataset synth_blobs(const Eigen::MatrixXd& means, std::size_t per_class, double spread, std::uint64_t seed);

/// Stratified split: test_per_class rows of every class go to the test set.
struct Split {
  LabeledDataset train;
  LabeledDataset test;
};
Split train_test_split(const LabeledDataset& ds, std::size_t test_per_class, std::uint64_t seed);

/// Device i receives classes (i*stride + l) mod C for l < labels_per_device,
/// per_device rows in total, drawn without replacement within each class.
std::vector<LabeledDataset> partition_ring(const LabeledDataset& ds, std::size_t devices, std::size_t per_device,
                                           std::uint64_t seed, std::size_t labels_per_device = 2,
                                           std::size_t stride = 1);

/// Every device receives labels_per_device distinct random classes.
std::vector<LabeledDataset> partition_random_pairs(const LabeledDataset& ds, std::size_t devices,
                                                   std::size_t per_device, std::uint64_t seed,
                                                   std::size_t labels_per_device = 2);

/// `size` inputs drawn uniformly without replacement from the pool; labels dropped.
PublicSet make_public(const Eigen::MatrixXd& pool, std::size_t size, std::uint64_t seed);
PublicSet make_public(const LabeledDataset& ds, std::size_t size, std::uint64_t seed);

/// Deterministic grid: a seeded shuffle of the pool rows, then every
/// (pool/count)-th row.
SampleGrid grid_from_pool(const Eigen::MatrixXd& pool, std::size_t count, std::uint64_t seed,
                          std::size_t dim_out = 1);

/// Per-device nearest-grid-point histograms, normalized; global is their mean.
MeasureSet measures_from_partition(std::span<const LabeledDataset> partitions, const SampleGrid& grid);

struct DataManifest {
  std::string source;
  std::uint64_t seed = 0;
  std::size_t per_device = 0;
  std::string rule;
};
nlohmann::json to_json(const DataManifest& m);
DataManifest manifest_from_json(const nlohmann::json& j);

}  // namespace fsfl
