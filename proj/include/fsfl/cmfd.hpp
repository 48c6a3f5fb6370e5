#pragma once

#include "fsfl/data.hpp"
#include "fsfl/graph.hpp"
#include "fsfl/metrics.hpp"
#include "fsfl/nn.hpp"
#include "fsfl/rng.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace fsfl {

// ---- device-level operations ----------------------------------------------

/// One pass of minibatch SGD over a shuffle of the rows drawn from `order`.
/// Minibatch gradients are of the summed loss.
void local_sgd_epoch(Mlp& model, const LabeledDataset& data, const Eigen::MatrixXd& targets, double eta,
                     std::size_t batch_size, NnLoss loss, Rng& order, Rng* dropout_rng = nullptr);

/// Head outputs on the public set, one row per public input.
Eigen::MatrixXd compute_shared_outputs(const Mlp& model, const PublicSet& shared);

/// What a device broadcasts: its outputs on D_s. No parameters cross devices.
struct SharedOutputs {
  std::size_t device = 0;
  Eigen::MatrixXd values;
};

/// Mean of the neighbors' outputs, self excluded. Throws ProtocolError naming
/// the first neighbor without a report.
Eigen::MatrixXd aggregate_targets(std::span<const std::size_t> neighbors, std::span<const SharedOutputs> received);

/// c(w) = sum over x in D_s of ||f(x; w) - target(x)||^2.
double distillation_loss(const Mlp& model, const PublicSet& shared, const Eigen::MatrixXd& targets);

/// One epoch of minibatch descent on c with step eps * n_i.
void distillation_step(Mlp& model, const PublicSet& shared, const Eigen::MatrixXd& targets, double sharing_rate,
                       std::size_t n_i, std::size_t batch_size, Rng& order, Rng* dropout_rng = nullptr);

// ---- traffic and telemetry ------------------------------------------------

inline constexpr std::uint64_t kBytesPerValue = 4;

/// Bytes per link per direction per epoch.
constexpr std::uint64_t cmfd_link_bytes(std::size_t public_size, std::size_t outputs) {
  return std::uint64_t{public_size} * outputs * kBytesPerValue;
}
constexpr std::uint64_t param_avg_link_bytes(std::size_t parameter_count) {
  return std::uint64_t{parameter_count} * kBytesPerValue;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
/// FNV-1a over the outputs encoded as little-endian float32, row-major.
std::uint64_t outputs_digest(const Eigen::MatrixXd& outputs);

// ---- runners --------------------------------------------------------------

struct ModelSpec {
  std::vector<std::size_t> hidden;
  double dropout = 0.0;

  bool operator==(const ModelSpec&) const = default;
};

struct TrainingConfig {
  TopologySpec topology;
  std::vector<ModelSpec> models{ModelSpec{{64}}};  // one per device, or one shared by all
  double eta = 0.01;
  double sharing_rate = 0.01;
  std::size_t epochs = 100;
  std::size_t batch_size = 50;
  std::size_t distill_batch_size = 50;
  std::size_t eval_every = 1;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  NnLoss local_loss = NnLoss::CrossEntropy;

  const ModelSpec& model_for(std::size_t device) const;
};

struct FederatedData {
  std::vector<LabeledDataset> locals;
  PublicSet shared;
  LabeledDataset test;
};

struct BroadcastRecord {
  std::size_t epoch = 0;
  std::size_t device = 0;
  std::uint64_t outputs_digest = 0;
};

using RecordSink = std::function<void(const MetricsRecord&)>;
using BroadcastSink = std::function<void(const BroadcastRecord&)>;

/// Initial model of a device. Parameter averaging passes shared_init so that
/// every device starts from the same parameters.
Mlp initial_model(const TrainingConfig& config, std::size_t device, std::size_t inputs, std::size_t classes,
                  bool shared_init);

/// Graph used at `epoch`; a single device has no links.
Topology topology_at(const TopologySpec& spec, std::size_t epoch);

/// Algorithm 2. Records are emitted at epoch 0 and every eval_every epochs
/// (and at the last epoch). Returns the final models.
std::vector<Mlp> run_cmfd(const TrainingConfig& config, const FederatedData& data, const RecordSink& sink,
                          const BroadcastSink& broadcast = {});

/// Local SGD followed by w_i <- w_i - eps sum_j (w_i - w_j). Throws
/// ConfigError unless all devices share one architecture.
std::vector<Mlp> run_param_avg(const TrainingConfig& config, const FederatedData& data, const RecordSink& sink);

/// Test accuracy, top-5 accuracy (classes > 5) of one model.
struct Accuracy {
  double top1 = 0.0;
  std::optional<double> top5;
};
Accuracy evaluate(const Mlp& model, const LabeledDataset& test);

/// RMS disagreement of the device functions on the public set (uniform weights).
double public_disagreement(std::span<const Mlp> models, const PublicSet& shared);

// ---- two-device toy model -------------------------------------------------

/// f_i(x) = w_a^i w_b^i x, learning f*(x) = x.
struct ToyDevice {
  double wa = 0.0;
  double wb = 0.0;
  double product() const { return wa * wb; }
  bool operator==(const ToyDevice&) const = default;
};
using ToyState = std::array<ToyDevice, 2>;

/// Direction of the distillation update of device i,
/// -(w_a^i w_b^i - w_a^j w_b^j) (w_b^i, w_a^i).
std::array<double, 2> toy_distill_direction(const ToyState& s, std::size_t i);

enum class ToyScheme { Distill, ParamAvg };

struct ToyOptions {
  std::vector<double> shared_x{-1.0, -0.5, 0.5, 1.0};  // inputs for both the local loss and distillation
  double eta = 0.02;
  double sharing_rate = 0.02;
  std::size_t steps = 2000;
};

/// One synchronous step: local gradient step on sum_x (w_a w_b x - x)^2,
/// then distillation or parameter averaging on the temporal parameters.
ToyState toy_step(ToyScheme scheme, const ToyState& s, const ToyOptions& options);

/// Trajectory including the initial state.
std::vector<ToyState> run_toy(ToyScheme scheme, const ToyState& init, const ToyOptions& options);

}  // namespace fsfl
