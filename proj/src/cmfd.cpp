#include "fsfl/cmfd.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

namespace fsfl {

namespace {

std::vector<std::size_t> shuffled(std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

// One epoch of minibatch steps on the summed loss over a shuffle of (x, y).
void minibatch_epoch(Mlp& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double step,
                     std::size_t batch_size, NnLoss loss, Rng& order, Rng* dropout_rng) {
  if (batch_size == 0) throw ParameterError("minibatch size must be at least 1");
  const auto idx = shuffled(static_cast<std::size_t>(x.rows()), order);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto rows = std::span(idx).subspan(start, std::min(batch_size, idx.size() - start));
    model.sgd_step(model.gradient(gather(x, rows), gather(y, rows), loss, dropout_rng), step);
  }
}

}  // namespace

void local_sgd_epoch(Mlp& model, const LabeledDataset& data, const Eigen::MatrixXd& targets, double eta,
                     std::size_t batch_size, NnLoss loss, Rng& order, Rng* dropout_rng) {
  if (data.size() == 0) throw ParameterError("local_sgd_epoch: empty local dataset");
  minibatch_epoch(model, data.inputs, targets, eta, batch_size, loss, order, dropout_rng);
}

Eigen::MatrixXd compute_shared_outputs(const Mlp& model, const PublicSet& shared) {
  Eigen::MatrixXd out = model.forward(shared.inputs);
  if (!out.allFinite()) throw NumericError("non-finite shared outputs", 0);
  return out;
}

Eigen::MatrixXd aggregate_targets(std::span<const std::size_t> neighbors, std::span<const SharedOutputs> received) {
  if (neighbors.empty()) throw ParameterError("aggregate_targets: device has no neighbors");
  Eigen::MatrixXd sum;
  for (auto j : neighbors) {
    const auto it = std::find_if(received.begin(), received.end(), [j](const SharedOutputs& s) { return s.device == j; });
    if (it == received.end()) throw ProtocolError("no outputs received from neighbor device " + std::to_string(j));
    if (sum.size() == 0) {
      sum = it->values;
    } else {
      if (it->values.rows() != sum.rows() || it->values.cols() != sum.cols())
        throw ProtocolError("outputs of device " + std::to_string(j) + " have the wrong shape");
      sum += it->values;
    }
  }
  return sum / static_cast<double>(neighbors.size());
}

double distillation_loss(const Mlp& model, const PublicSet& shared, const Eigen::MatrixXd& targets) {
  return model.loss(shared.inputs, targets, NnLoss::Mse);
}

void distillation_step(Mlp& model, const PublicSet& shared, const Eigen::MatrixXd& targets, double sharing_rate,
                       std::size_t n_i, std::size_t batch_size, Rng& order, Rng* dropout_rng) {
  if (sharing_rate <= 0.0) throw ParameterError("distillation_step: sharing rate must be positive");
  minibatch_epoch(model, shared.inputs, targets, sharing_rate * static_cast<double>(n_i), batch_size, NnLoss::Mse,
                  order, dropout_rng);
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t outputs_digest(const Eigen::MatrixXd& outputs) {
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<std::size_t>(outputs.size()) * 4);
  for (Eigen::Index r = 0; r < outputs.rows(); ++r) {
    for (Eigen::Index c = 0; c < outputs.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(outputs(r, c)));
      for (int k = 0; k < 4; ++k) buf.push_back(static_cast<unsigned char>(bits >> (8 * k)));
    }
  }
  return fnv1a64(buf);
}

const ModelSpec& TrainingConfig::model_for(std::size_t device) const {
  if (models.size() == 1) return models.front();
  if (device >= models.size())
    throw ConfigError("no model spec for device " + std::to_string(device) + " (" + std::to_string(models.size()) +
                      " given)");
  return models[device];
}

Mlp initial_model(const TrainingConfig& config, std::size_t device, std::size_t inputs, std::size_t classes,
                  bool shared_init) {
  const auto& spec = config.model_for(device);
  std::vector<std::size_t> sizes{inputs};
  sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
  sizes.push_back(classes);
  return Mlp::he_init(sizes, Head::Softmax, derive_seed(config.seed, {kInitStream, shared_init ? 0 : device}),
                      spec.dropout);
}

Topology topology_at(const TopologySpec& spec, std::size_t epoch) {
  if (spec.n == 1) return Topology(1);
  return make_topology(spec, epoch);
}

Accuracy evaluate(const Mlp& model, const LabeledDataset& test) {
  if (test.size() == 0) throw ParameterError("evaluate: empty test set");
  const Eigen::MatrixXd out = model.forward(test.inputs);
  std::size_t top1 = 0, top5 = 0;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const int y = test.labels[static_cast<std::size_t>(r)];
    Eigen::Index best = 0;
    out.row(r).maxCoeff(&best);
    if (best == y) ++top1;
    // rank of the true class: number of strictly larger outputs, ties broken by index
    std::size_t above = 0;
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      if (out(r, c) > out(r, y) || (out(r, c) == out(r, y) && c < y)) ++above;
    if (above < 5) ++top5;
  }
  const double n = static_cast<double>(test.size());
  Accuracy a{static_cast<double>(top1) / n, std::nullopt};
  if (out.cols() > 5) a.top5 = static_cast<double>(top5) / n;
  return a;
}

double public_disagreement(std::span<const Mlp> models, const PublicSet& shared) {
  if (models.empty()) return 0.0;
  std::vector<Eigen::MatrixXd> outs;
  for (const auto& m : models) outs.push_back(m.forward(shared.inputs));
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(outs.front().rows(), outs.front().cols());
  for (const auto& o : outs) mean += o;
  mean /= static_cast<double>(outs.size());
  double acc = 0.0;
  for (const auto& o : outs) acc += (o - mean).squaredNorm();
  return std::sqrt(acc / (static_cast<double>(outs.size()) * static_cast<double>(shared.size())));
}

namespace {

struct Device {
  Mlp model;
  Eigen::MatrixXd targets;
  Rng shuffle;
  Rng distill;
  Rng dropout;
  std::optional<double> distill_loss;
  std::uint64_t bytes = 0;
};

void check_setup(const TrainingConfig& config, const FederatedData& data) {
  const std::size_t n = config.topology.n;
  if (data.locals.size() != n)
    throw ConfigError("topology has " + std::to_string(n) + " devices but " + std::to_string(data.locals.size()) +
                      " local datasets were given");
  if (config.models.size() != 1 && config.models.size() != n)
    throw ConfigError("model specs must number 1 or " + std::to_string(n));
  if (config.eta < 0.0) throw ConfigError("learning rate must be nonnegative");
  if (config.batch_size == 0 || config.distill_batch_size == 0) throw ConfigError("minibatch size must be at least 1");
  if (config.eval_every == 0) throw ConfigError("eval_every must be at least 1");
  if (data.test.size() == 0) throw ConfigError("empty test set");
  for (std::size_t i = 0; i < n; ++i) {
    if (data.locals[i].size() == 0) throw ConfigError("device " + std::to_string(i) + " has no local data");
    if (data.locals[i].dim() != data.test.dim()) throw ConfigError("local and test input widths differ");
  }
}

std::vector<Device> make_devices(const TrainingConfig& config, const FederatedData& data, bool shared_init) {
  std::vector<Device> devices;
  const std::size_t classes = data.test.num_classes;
  for (std::size_t i = 0; i < config.topology.n; ++i) {
    devices.push_back(Device{initial_model(config, i, data.test.dim(), classes, shared_init),
                             one_hot(data.locals[i].labels, classes),
                             Rng(derive_seed(config.seed, {kShuffleStream, i})),
                             Rng(derive_seed(config.seed, {kDistillStream, i})),
                             Rng(derive_seed(config.seed, {kDropoutStream, i})),
                             std::nullopt, 0});
  }
  return devices;
}

MetricsRecord record(std::size_t epoch, std::span<Device> devices, const FederatedData& data, std::size_t threads) {
  MetricsRecord rec;
  rec.epoch = epoch;
  rec.devices.resize(devices.size());
  parallel_for(devices.size(), threads, [&](std::size_t i) {
    const auto a = evaluate(devices[i].model, data.test);
    rec.devices[i] = DeviceMetrics{a.top1, a.top5, devices[i].distill_loss, devices[i].bytes};
  });
  if (data.shared.size() > 0) {
    std::vector<Mlp> models;
    for (const auto& d : devices) models.push_back(d.model);
    rec.d_t = public_disagreement(models, data.shared);
  }
  return rec;
}

bool due(std::size_t epoch, const TrainingConfig& config) {
  return epoch % config.eval_every == 0 || epoch == config.epochs;
}

void check_finite(const Mlp& m, std::size_t device, std::size_t epoch) {
  if (!m.parameters().allFinite())
    throw NumericError("device " + std::to_string(device) + " parameters became non-finite", epoch);
}

}  // namespace

std::vector<Mlp> run_cmfd(const TrainingConfig& config, const FederatedData& data, const RecordSink& sink,
                          const BroadcastSink& broadcast) {
  check_setup(config, data);
  if (data.shared.size() == 0) throw ConfigError("CMFD needs a nonempty public set");
  if (data.shared.dim() != data.test.dim()) throw ConfigError("public and test input widths differ");
  if (config.sharing_rate <= 0.0) throw ConfigError("sharing rate must be positive");
  auto devices = make_devices(config, data, false);
  const std::size_t n = devices.size();
  const std::size_t classes = data.test.num_classes;
  if (sink) sink(record(0, devices, data, config.threads));

  std::vector<SharedOutputs> outputs(n);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const Topology graph = topology_at(config.topology, epoch);
    // phase 1: local SGD on the private data, then broadcast outputs on D_s
    parallel_for(n, config.threads, [&](std::size_t i) {
      auto& d = devices[i];
      local_sgd_epoch(d.model, data.locals[i], d.targets, config.eta, config.batch_size, config.local_loss, d.shuffle,
                      &d.dropout);
      check_finite(d.model, i, epoch);
      outputs[i] = SharedOutputs{i, compute_shared_outputs(d.model, data.shared)};
      d.bytes = graph.degree(i) * cmfd_link_bytes(data.shared.size(), classes);
    });
    if (broadcast)
      for (std::size_t i = 0; i < n; ++i) broadcast({epoch, i, outputs_digest(outputs[i].values)});
    // phase 2: distill toward the neighbor mean; outputs are read-only here
    parallel_for(n, config.threads, [&](std::size_t i) {
      auto& d = devices[i];
      const auto& nbrs = graph.neighbors(i);
      if (nbrs.empty()) {
        d.distill_loss.reset();
        return;
      }
      const Eigen::MatrixXd targets = aggregate_targets(nbrs, outputs);
      d.distill_loss = distillation_loss(d.model, data.shared, targets);
      distillation_step(d.model, data.shared, targets, config.sharing_rate, nbrs.size(), config.distill_batch_size,
                        d.distill, &d.dropout);
      check_finite(d.model, i, epoch);
    });
    if (sink && due(epoch, config)) sink(record(epoch, devices, data, config.threads));
  }
  std::vector<Mlp> out;
  for (auto& d : devices) out.push_back(std::move(d.model));
  return out;
}

std::vector<Mlp> run_param_avg(const TrainingConfig& config, const FederatedData& data, const RecordSink& sink) {
  check_setup(config, data);
  for (std::size_t i = 1; i < config.topology.n; ++i)
    if (!(config.model_for(i) == config.model_for(0)))
      throw ConfigError("parameter averaging needs one architecture on every device; device " + std::to_string(i) +
                        " differs from device 0");
  auto devices = make_devices(config, data, true);
  const std::size_t n = devices.size();
  if (sink) sink(record(0, devices, data, config.threads));

  std::vector<Eigen::VectorXd> temporal(n);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const Topology graph = topology_at(config.topology, epoch);
    parallel_for(n, config.threads, [&](std::size_t i) {
      auto& d = devices[i];
      local_sgd_epoch(d.model, data.locals[i], d.targets, config.eta, config.batch_size, config.local_loss, d.shuffle,
                      &d.dropout);
      check_finite(d.model, i, epoch);
      temporal[i] = d.model.parameters();
      d.bytes = graph.degree(i) * param_avg_link_bytes(d.model.parameter_count());
    });
    parallel_for(n, config.threads, [&](std::size_t i) {
      Eigen::VectorXd w = temporal[i];
      for (auto j : graph.neighbors(i)) w -= config.sharing_rate * (temporal[i] - temporal[j]);
      devices[i].model.set_parameters(w);
      check_finite(devices[i].model, i, epoch);
    });
    if (sink && due(epoch, config)) sink(record(epoch, devices, data, config.threads));
  }
  std::vector<Mlp> out;
  for (auto& d : devices) out.push_back(std::move(d.model));
  return out;
}

std::array<double, 2> toy_distill_direction(const ToyState& s, std::size_t i) {
  if (i > 1) throw ParameterError("toy model has two devices");
  const auto& me = s[i];
  const double gap = me.product() - s[1 - i].product();
  return {-gap * me.wb, -gap * me.wa};
}

ToyState toy_step(ToyScheme scheme, const ToyState& s, const ToyOptions& options) {
  double sx2 = 0.0;
  for (double x : options.shared_x) sx2 += x * x;
  ToyState tmp = s;
  for (auto& d : tmp) {
    // d/dw of sum_x (w_a w_b x - x)^2
    const double g = 2.0 * sx2 * (d.product() - 1.0);
    const ToyDevice old = d;
    d.wa = old.wa - options.eta * g * old.wb;
    d.wb = old.wb - options.eta * g * old.wa;
  }
  ToyState next = tmp;
  for (std::size_t i = 0; i < 2; ++i) {
    if (scheme == ToyScheme::Distill) {
      // gradient of sum_x (p_i x - p_j x)^2 is 2 sum x^2 (p_i - p_j)(w_b, w_a); step eps * n_i with n_i = 1
      const auto dir = toy_distill_direction(tmp, i);
      next[i].wa = tmp[i].wa + options.sharing_rate * 2.0 * sx2 * dir[0];
      next[i].wb = tmp[i].wb + options.sharing_rate * 2.0 * sx2 * dir[1];
    } else {
      next[i].wa = tmp[i].wa - options.sharing_rate * (tmp[i].wa - tmp[1 - i].wa);
      next[i].wb = tmp[i].wb - options.sharing_rate * (tmp[i].wb - tmp[1 - i].wb);
    }
  }
  return next;
}

std::vector<ToyState> run_toy(ToyScheme scheme, const ToyState& init, const ToyOptions& options) {
  std::vector<ToyState> traj{init};
  traj.reserve(options.steps + 1);
  for (std::size_t k = 0; k < options.steps; ++k) {
    traj.push_back(toy_step(scheme, traj.back(), options));
    for (const auto& d : traj.back())
      if (!std::isfinite(d.wa) || !std::isfinite(d.wb)) throw NumericError("toy state became non-finite", k + 1);
  }
  return traj;
}

}  // namespace fsfl
