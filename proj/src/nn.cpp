#include "fsfl/nn.hpp"

#include "fsfl/errors.hpp"

#include <cmath>
#include <random>

namespace fsfl {

Mlp::Mlp(std::vector<std::size_t> layer_sizes, Head head, double dropout)
    : sizes_(std::move(layer_sizes)), head_(head), dropout_(dropout) {
  if (sizes_.size() < 2) throw ParameterError("Mlp needs at least input and output sizes");
  for (auto s : sizes_)
    if (s == 0) throw ParameterError("Mlp layer sizes must be positive");
  if (dropout_ < 0.0 || dropout_ >= 1.0) throw ParameterError("dropout rate must lie in [0, 1)");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(total);
    total += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
  }
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
}

Mlp Mlp::he_init(std::vector<std::size_t> layer_sizes, Head head, std::uint64_t seed, double dropout) {
  Mlp m(std::move(layer_sizes), head, dropout);
  Rng rng(seed);
  for (std::size_t l = 0; l < m.layers(); ++l) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(m.sizes_[l])));
    auto w = m.weights(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
  }
  return m;
}

void Mlp::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != params_.size()) throw ParameterError("set_parameters: wrong parameter count");
  params_ = p;
}

Eigen::Map<const RowMatrix> Mlp::weights(std::size_t layer) const {
  return {params_.data() + offset(layer), static_cast<Eigen::Index>(sizes_[layer + 1]),
          static_cast<Eigen::Index>(sizes_[layer])};
}
Eigen::Map<const Eigen::VectorXd> Mlp::bias(std::size_t layer) const {
  return {params_.data() + offset(layer) + sizes_[layer + 1] * sizes_[layer],
          static_cast<Eigen::Index>(sizes_[layer + 1])};
}
Eigen::Map<RowMatrix> Mlp::weights(std::size_t layer) {
  return {params_.data() + offset(layer), static_cast<Eigen::Index>(sizes_[layer + 1]),
          static_cast<Eigen::Index>(sizes_[layer])};
}
Eigen::Map<Eigen::VectorXd> Mlp::bias(std::size_t layer) {
  return {params_.data() + offset(layer) + sizes_[layer + 1] * sizes_[layer],
          static_cast<Eigen::Index>(sizes_[layer + 1])};
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p = z.colwise() - z.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

Eigen::MatrixXd Mlp::apply_head(const Eigen::MatrixXd& z) const {
  return head_ == Head::Softmax ? softmax_rows(z) : z;
}

// Returns pre-head outputs (logits). `activations` receives the input of
// every layer; `masks` the dropout scale applied to each hidden layer.
Eigen::MatrixXd Mlp::run(const Eigen::MatrixXd& x, Rng* dropout_rng, std::vector<Eigen::MatrixXd>* activations,
                         std::vector<Eigen::MatrixXd>* masks) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim())
    throw ParameterError("Mlp: input width " + std::to_string(x.cols()) + ", expected " + std::to_string(input_dim()));
  Eigen::MatrixXd a = x;
  const bool drop = dropout_rng != nullptr && dropout_ > 0.0;
  std::bernoulli_distribution keep(1.0 - dropout_);
  for (std::size_t l = 0; l < layers(); ++l) {
    if (activations) activations->push_back(a);
    Eigen::MatrixXd z = a * weights(l).transpose();
    z.rowwise() += bias(l).transpose();
    if (l + 1 == layers()) return z;
    a = z.cwiseMax(0.0);
    if (drop) {
      Eigen::MatrixXd mask(a.rows(), a.cols());
      const double scale = 1.0 / (1.0 - dropout_);
      for (Eigen::Index r = 0; r < mask.rows(); ++r)
        for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = keep(*dropout_rng) ? scale : 0.0;
      a.array() *= mask.array();
      if (masks) masks->push_back(std::move(mask));
    }
  }
  return a;  // unreachable: layers() >= 1
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const { return apply_head(run(x, nullptr, nullptr, nullptr)); }

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Rng& dropout_rng) const {
  return apply_head(run(x, &dropout_rng, nullptr, nullptr));
}

namespace {
void check_targets(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, std::size_t out) {
  if (y.rows() != x.rows() || static_cast<std::size_t>(y.cols()) != out)
    throw ParameterError("Mlp: targets do not match batch shape");
}
}  // namespace

double Mlp::loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets, NnLoss kind) const {
  check_targets(x, targets, output_dim());
  const Eigen::MatrixXd out = forward(x);
  if (kind == NnLoss::Mse) return (out - targets).squaredNorm();
  if (head_ != Head::Softmax) throw ParameterError("cross-entropy loss requires the softmax head");
  const Eigen::MatrixXd z = run(x, nullptr, nullptr, nullptr);
  // -sum y log softmax(z), via log-sum-exp
  const Eigen::VectorXd zmax = z.rowwise().maxCoeff();
  const Eigen::VectorXd lse = ((z.colwise() - zmax).array().exp().rowwise().sum().log()).matrix() + zmax;
  const Eigen::MatrixXd logp = z.colwise() - lse;
  return -(targets.array() * logp.array()).sum();
}

Eigen::VectorXd Mlp::gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets, NnLoss kind,
                              Rng* dropout_rng) const {
  check_targets(x, targets, output_dim());
  if (kind == NnLoss::CrossEntropy && head_ != Head::Softmax)
    throw ParameterError("cross-entropy loss requires the softmax head");
  std::vector<Eigen::MatrixXd> acts, masks;
  const Eigen::MatrixXd z = run(x, dropout_rng, &acts, &masks);
  const bool drop = dropout_rng != nullptr && dropout_ > 0.0;

  // dLoss/dz at the output layer
  Eigen::MatrixXd delta;
  if (head_ == Head::Identity) {
    delta = 2.0 * (z - targets);
  } else {
    const Eigen::MatrixXd p = softmax_rows(z);
    if (kind == NnLoss::CrossEntropy) {
      delta = (p.array().colwise() * targets.rowwise().sum().array()).matrix() - targets;
    } else {
      const Eigen::MatrixXd g = 2.0 * (p - targets);
      const Eigen::VectorXd pg = (p.array() * g.array()).rowwise().sum();
      delta = (p.array() * (g.colwise() - pg).array()).matrix();
    }
  }

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());
  for (std::size_t l = layers(); l-- > 0;) {
    const auto out = static_cast<Eigen::Index>(sizes_[l + 1]);
    const auto in = static_cast<Eigen::Index>(sizes_[l]);
    Eigen::Map<RowMatrix> gw(grad.data() + offset(l), out, in);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + offset(l) + sizes_[l + 1] * sizes_[l], out);
    gw.noalias() = delta.transpose() * acts[l];
    gb = delta.colwise().sum().transpose();
    if (l == 0) break;
    Eigen::MatrixXd back = delta * weights(l);
    // acts[l] is relu(z_{l-1}) times the mask; positive exactly where the unit was active and kept
    back.array() *= (acts[l].array() > 0.0).cast<double>();
    if (drop) back.array() *= masks[l - 1].array();
    delta = std::move(back);
  }
  return grad;
}

void Mlp::sgd_step(const Eigen::VectorXd& grad, double eta) {
  if (grad.size() != params_.size()) throw ParameterError("sgd_step: gradient has wrong size");
  params_.noalias() -= eta * grad;
}

Eigen::MatrixXd one_hot(const std::vector<int>& labels, std::size_t classes) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(classes));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) throw ParameterError("label out of range");
    y(static_cast<Eigen::Index>(r), labels[r]) = 1.0;
  }
  return y;
}

FunctionGrid predict_set(const Mlp& model, const SampleGrid& grid) {
  if (grid.dim_out != model.output_dim()) throw ParameterError("predict_set: grid output dimension differs from model");
  return model.forward(grid.points);
}

nlohmann::json to_json(const Mlp& model) {
  const auto& p = model.parameters();
  return {{"layers", model.layer_sizes()},
          {"params", std::vector<double>(p.data(), p.data() + p.size())},
          {"head", model.head() == Head::Softmax ? "softmax" : "identity"},
          {"dropout", model.dropout()}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
  const auto head = j.value("head", std::string("softmax")) == "identity" ? Head::Identity : Head::Softmax;
  Mlp m(j.at("layers").get<std::vector<std::size_t>>(), head, j.value("dropout", 0.0));
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != m.parameter_count()) throw ParameterError("checkpoint parameter count does not match layers");
  m.set_parameters(Eigen::Map<const Eigen::VectorXd>(params.data(), static_cast<Eigen::Index>(params.size())));
  return m;
}

}  // namespace fsfl
