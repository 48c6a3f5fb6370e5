#pragma once

#include "fsfl/funcspace.hpp"
#include "fsfl/rng.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fsfl {

enum class Head { Identity, Softmax };
enum class NnLoss { Mse, CrossEntropy };

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fully connected ReLU network. Parameters live in one flat vector, layer
/// by layer: the out x in weight matrix (row-major) followed by the bias.
class Mlp {
 public:
  Mlp(std::vector<std::size_t> layer_sizes, Head head, double dropout = 0.0);

  /// He-scaled Gaussian weights N(0, 2/fan_in), zero biases.
  static Mlp he_init(std::vector<std::size_t> layer_sizes, Head head, std::uint64_t seed, double dropout = 0.0);

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  Head head() const { return head_; }
  double dropout() const { return dropout_; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t layers() const { return sizes_.size() - 1; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }

  const Eigen::VectorXd& parameters() const { return params_; }
  void set_parameters(const Eigen::VectorXd& p);

  Eigen::Map<const RowMatrix> weights(std::size_t layer) const;
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;
  Eigen::Map<RowMatrix> weights(std::size_t layer);
  Eigen::Map<Eigen::VectorXd> bias(std::size_t layer);

  /// Batch forward pass (one sample per row), dropout off.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  /// Training-mode forward pass with inverted dropout on hidden activations.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Rng& dropout_rng) const;

  /// Summed loss over the batch. CrossEntropy requires the softmax head.
  double loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets, NnLoss kind) const;

  /// Exact gradient of the summed batch loss. With a dropout rng and a
  /// nonzero rate, masks are sampled as in training.
  Eigen::VectorXd gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets, NnLoss kind,
                           Rng* dropout_rng = nullptr) const;

  void sgd_step(const Eigen::VectorXd& grad, double eta);

  bool same_architecture(const Mlp& other) const { return sizes_ == other.sizes_ && head_ == other.head_; }

 private:
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }
  Eigen::MatrixXd run(const Eigen::MatrixXd& x, Rng* dropout_rng, std::vector<Eigen::MatrixXd>* activations,
                      std::vector<Eigen::MatrixXd>* masks) const;
  Eigen::MatrixXd apply_head(const Eigen::MatrixXd& z) const;

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Head head_;
  double dropout_;
  Eigen::VectorXd params_;
};

/// Row-wise softmax, shifted by the row max.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z);

/// One-hot encoding of class labels.
Eigen::MatrixXd one_hot(const std::vector<int>& labels, std::size_t classes);

/// Evaluates the model on every grid point, giving a function in the same
/// discretized space the meta-algorithm works in.
FunctionGrid predict_set(const Mlp& model, const SampleGrid& grid);

/// Checkpoint {"layers": [...], "params": [...], "head": ..., "dropout": ...}.
nlohmann::json to_json(const Mlp& model);
Mlp mlp_from_json(const nlohmann::json& j);

}  // namespace fsfl
