#include "fsfl/data.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/nn.hpp"
#include "fsfl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace fsfl {

void LabeledDataset::validate() const {
  if (static_cast<std::size_t>(inputs.rows()) != labels.size())
    throw ParameterError("dataset: " + std::to_string(inputs.rows()) + " inputs but " +
                         std::to_string(labels.size()) + " labels");
  if (!origin.empty() && origin.size() != labels.size()) throw ParameterError("dataset: origin length mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ParameterError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  if (!inputs.allFinite()) throw ParameterError("dataset: non-finite input");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  out.labels.reserve(rows.size());
  out.origin.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = rows[k];
    if (r >= size()) throw ParameterError("subset: row out of range");
    out.inputs.row(static_cast<Eigen::Index>(k)) = inputs.row(static_cast<Eigen::Index>(r));
    out.labels.push_back(labels[r]);
    out.origin.push_back(origin.empty() ? r : origin[r]);
  }
  return out;
}

Eigen::MatrixXd LabeledDataset::targets() const { return one_hot(labels, num_classes); }

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> c(num_classes, 0);
  for (int y : labels) ++c.at(static_cast<std::size_t>(y));
  return c;
}

LabeledDataset synth_blobs(const Eigen::MatrixXd& means, std::size_t per_class, double spread, std::uint64_t seed) {
  const auto classes = static_cast<std::size_t>(means.rows());
  if (classes < 2) throw ParameterError("synth_blobs: need at least 2 classes");
  if (spread < 0.0) throw ParameterError("synth_blobs: spread must be nonnegative");
  Rng rng(derive_seed(seed, {kDataStream}));
  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledDataset ds;
  ds.num_classes = classes;
  ds.inputs.resize(static_cast<Eigen::Index>(classes * per_class), means.cols());
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k, ++r) {
      for (Eigen::Index d = 0; d < means.cols(); ++d)
        ds.inputs(r, d) = means(static_cast<Eigen::Index>(c), d) + spread * noise(rng);
      ds.labels.push_back(static_cast<int>(c));
      ds.origin.push_back(static_cast<std::size_t>(r));
    }
  }
  return ds;
}

LabeledDataset synth_blobs(std::size_t classes, std::size_t per_class, double spread, std::uint64_t seed,
                           double radius) {
  if (classes < 2) throw ParameterError("synth_blobs: need at least 2 classes");
  Eigen::MatrixXd means(static_cast<Eigen::Index>(classes), 2);
  for (std::size_t c = 0; c < classes; ++c) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    means(static_cast<Eigen::Index>(c), 0) = radius * std::cos(a);
    means(static_cast<Eigen::Index>(c), 1) = radius * std::sin(a);
  }
  return synth_blobs(means, per_class, spread, seed);
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by(ds.num_classes);
  for (std::size_t r = 0; r < ds.size(); ++r) by.at(static_cast<std::size_t>(ds.labels[r])).push_back(r);
  return by;
}

// Draws counts[l] rows of class classes[l] without replacement.
LabeledDataset draw_device(const LabeledDataset& ds, const std::vector<std::vector<std::size_t>>& by_class,
                           const std::vector<std::size_t>& classes, std::size_t per_device, Rng& rng,
                           std::size_t device) {
  std::vector<std::size_t> rows;
  const std::size_t base = per_device / classes.size();
  const std::size_t extra = per_device % classes.size();
  for (std::size_t l = 0; l < classes.size(); ++l) {
    const std::size_t want = base + (l < extra ? 1 : 0);
    auto pool = by_class.at(classes[l]);
    if (pool.size() < want)
      throw ConfigError("device " + std::to_string(device) + " needs " + std::to_string(want) + " samples of class " +
                        std::to_string(classes[l]) + ", only " + std::to_string(pool.size()) + " available");
    std::shuffle(pool.begin(), pool.end(), rng);
    rows.insert(rows.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  }
  return ds.subset(rows);
}

void check_partition_args(const LabeledDataset& ds, std::size_t devices, std::size_t per_device, std::size_t labels) {
  if (devices == 0) throw ParameterError("partition: need at least one device");
  if (per_device == 0) throw ParameterError("partition: per_device must be positive");
  if (labels == 0 || labels > ds.num_classes) throw ParameterError("partition: labels_per_device out of range");
}

}  // namespace

Split train_test_split(const LabeledDataset& ds, std::size_t test_per_class, std::uint64_t seed) {
  ds.validate();
  Rng rng(derive_seed(seed, {kDataStream, 1}));
  std::vector<std::size_t> train_rows, test_rows;
  for (auto pool : rows_by_class(ds)) {
    if (pool.size() <= test_per_class)
      throw ConfigError("train_test_split: class with " + std::to_string(pool.size()) + " rows cannot give " +
                        std::to_string(test_per_class) + " test rows and keep training data");
    std::shuffle(pool.begin(), pool.end(), rng);
    test_rows.insert(test_rows.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(test_per_class));
    train_rows.insert(train_rows.end(), pool.begin() + static_cast<std::ptrdiff_t>(test_per_class), pool.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  return {ds.subset(train_rows), ds.subset(test_rows)};
}

std::vector<LabeledDataset> partition_ring(const LabeledDataset& ds, std::size_t devices, std::size_t per_device,
                                           std::uint64_t seed, std::size_t labels_per_device, std::size_t stride) {
  check_partition_args(ds, devices, per_device, labels_per_device);
  const auto by_class = rows_by_class(ds);
  std::vector<LabeledDataset> out;
  for (std::size_t i = 0; i < devices; ++i) {
    std::vector<std::size_t> classes;
    for (std::size_t l = 0; l < labels_per_device; ++l) classes.push_back((i * stride + l) % ds.num_classes);
    Rng rng(derive_seed(seed, {kDataStream, 2, i}));
    out.push_back(draw_device(ds, by_class, classes, per_device, rng, i));
  }
  return out;
}

std::vector<LabeledDataset> partition_random_pairs(const LabeledDataset& ds, std::size_t devices,
                                                   std::size_t per_device, std::uint64_t seed,
                                                   std::size_t labels_per_device) {
  check_partition_args(ds, devices, per_device, labels_per_device);
  const auto by_class = rows_by_class(ds);
  std::vector<LabeledDataset> out;
  for (std::size_t i = 0; i < devices; ++i) {
    Rng rng(derive_seed(seed, {kDataStream, 3, i}));
    std::vector<std::size_t> all(ds.num_classes);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(labels_per_device);
    std::sort(all.begin(), all.end());
    out.push_back(draw_device(ds, by_class, all, per_device, rng, i));
  }
  return out;
}

PublicSet make_public(const Eigen::MatrixXd& pool, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw ParameterError("make_public: size must be positive");
  if (size > static_cast<std::size_t>(pool.rows()))
    throw ConfigError("make_public: pool has " + std::to_string(pool.rows()) + " rows, " + std::to_string(size) +
                      " requested");
  std::vector<std::size_t> idx(static_cast<std::size_t>(pool.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {kDataStream, 4}));
  std::shuffle(idx.begin(), idx.end(), rng);
  PublicSet p;
  p.inputs.resize(static_cast<Eigen::Index>(size), pool.cols());
  for (std::size_t k = 0; k < size; ++k)
    p.inputs.row(static_cast<Eigen::Index>(k)) = pool.row(static_cast<Eigen::Index>(idx[k]));
  return p;
}

PublicSet make_public(const LabeledDataset& ds, std::size_t size, std::uint64_t seed) {
  return make_public(ds.inputs, size, seed);
}

SampleGrid grid_from_pool(const Eigen::MatrixXd& pool, std::size_t count, std::uint64_t seed, std::size_t dim_out) {
  const auto rows = static_cast<std::size_t>(pool.rows());
  if (count == 0 || count > rows) throw ParameterError("grid_from_pool: count must lie in [1, pool size]");
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {kDataStream, 5}));
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t stride = rows / count;
  SampleGrid g;
  g.dim_out = dim_out;
  g.points.resize(static_cast<Eigen::Index>(count), pool.cols());
  for (std::size_t k = 0; k < count; ++k)
    g.points.row(static_cast<Eigen::Index>(k)) = pool.row(static_cast<Eigen::Index>(idx[k * stride]));
  return g;
}

MeasureSet measures_from_partition(std::span<const LabeledDataset> partitions, const SampleGrid& grid) {
  if (partitions.empty()) throw ParameterError("measures_from_partition: no partitions");
  std::vector<MeasureWeights> locals;
  for (const auto& part : partitions) {
    if (part.size() == 0) throw ParameterError("measures_from_partition: empty partition");
    if (part.dim() != grid.dim_in()) throw ParameterError("measures_from_partition: input dimension differs from grid");
    MeasureWeights w = MeasureWeights::Zero(static_cast<Eigen::Index>(grid.size()));
    for (Eigen::Index r = 0; r < part.inputs.rows(); ++r) {
      Eigen::Index best = 0;
      (grid.points.rowwise() - part.inputs.row(r)).rowwise().squaredNorm().minCoeff(&best);
      w(best) += 1.0;
    }
    locals.push_back(w / static_cast<double>(part.size()));
  }
  return MeasureSet::from_locals(std::move(locals));
}

nlohmann::json to_json(const DataManifest& m) {
  return {{"source", m.source}, {"seed", m.seed}, {"per_device", m.per_device}, {"rule", m.rule}};
}

DataManifest manifest_from_json(const nlohmann::json& j) {
  return {j.at("source").get<std::string>(), j.at("seed").get<std::uint64_t>(),
          j.at("per_device").get<std::size_t>(), j.at("rule").get<std::string>()};
}

}  // namespace fsfl
