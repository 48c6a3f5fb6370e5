#include "fsfl/meta.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace fsfl {

namespace {

void require_positive(const FunctionGrid& f, const char* what) {
  if (!(f.array() > 0.0).all()) throw DomainError(std::string(what) + ": KL loss needs strictly positive values");
}

bool all_finite(const FederatedGrid& f) {
  for (const auto& p : f.parts())
    if (!p.allFinite()) return false;
  return true;
}

}  // namespace

double LossFunctional::value(const FunctionGrid& f, const MeasureWeights& weights) const {
  detail::require_same_shape(f, target, "LossFunctional::value");
  if (weights.size() != f.rows()) throw ParameterError("LossFunctional::value: weight count does not match grid");
  CompensatedSum<double> acc;
  if (kind == LossKind::Mse) {
    for (Eigen::Index s = 0; s < f.rows(); ++s)
      if (weights(s) != 0.0) acc.add(weights(s) * (f.row(s) - target.row(s)).squaredNorm());
  } else {
    require_positive(f, "prediction");
    require_positive(target, "target");
    for (Eigen::Index s = 0; s < f.rows(); ++s) {
      if (weights(s) == 0.0) continue;
      double row = 0.0;
      for (Eigen::Index m = 0; m < f.cols(); ++m) row += f(s, m) * std::log(f(s, m) / target(s, m));
      acc.add(weights(s) * row);
    }
  }
  return acc.value();
}

FunctionGrid frechet_subgradient(const FunctionGrid& f, const LossFunctional& loss) {
  detail::require_same_shape(f, loss.target, "frechet_subgradient");
  if (loss.kind == LossKind::Mse) return 2.0 * (f - loss.target);
  require_positive(f, "prediction");
  require_positive(loss.target, "target");
  return ((f.array() / loss.target.array()).log() + 1.0).matrix();
}

namespace {

void local_step_into(const FunctionGrid& f, const FunctionGrid& subgrad, const MeasureWeights& nu, double eta,
                     FunctionGrid& out) {
  out.resize(f.rows(), f.cols());
  for (Eigen::Index s = 0; s < f.rows(); ++s) {
    const double scale = eta * nu(s);
    for (Eigen::Index m = 0; m < f.cols(); ++m) out(s, m) = f(s, m) - scale * subgrad(s, m);
  }
}

}  // namespace

FunctionGrid local_step(const FunctionGrid& f, const FunctionGrid& subgrad, const MeasureWeights& nu, double eta) {
  detail::require_same_shape(f, subgrad, "local_step");
  if (nu.size() != f.rows()) throw ParameterError("local_step: density ratio does not match grid");
  FunctionGrid g(f.rows(), f.cols());
  local_step_into(f, subgrad, nu, eta, g);
  return g;
}

namespace {

void check_consensus_args(const FederatedGrid& g, const Topology& t) {
  if (g.size() != t.size())
    throw ParameterError("consensus_step: " + std::to_string(g.size()) + " parts for " + std::to_string(t.size()) +
                         " devices");
}

void consensus_device(const FederatedGrid& g, const Topology& t, double eps, std::size_t i, FunctionGrid& out) {
  const auto& nb = t.neighbors(i);
  if (nb.empty()) {
    out = g[i];
    return;
  }
  const double ni = static_cast<double>(nb.size());
  FunctionGrid avg = FunctionGrid::Zero(g.rows(), g.cols());
  for (auto j : nb) avg += g[j];
  avg /= ni;
  out = g[i] - eps * ni * (g[i] - avg);
}

}  // namespace

FederatedGrid consensus_step(const FederatedGrid& g, const Topology& t, double sharing_rate) {
  check_consensus_args(g, t);
  auto out = FederatedGrid::zeros(g.size(), g.rows(), g.cols());
  for (std::size_t i = 0; i < g.size(); ++i) consensus_device(g, t, sharing_rate, i, out[i]);
  return out;
}

FederatedGrid consensus_step_matrix(const FederatedGrid& g, const Topology& t, double sharing_rate) {
  check_consensus_args(g, t);
  const auto n = static_cast<Eigen::Index>(t.size());
  const Eigen::MatrixXd p = Eigen::MatrixXd::Identity(n, n) - sharing_rate * laplacian(t);
  return matrix_apply(p, g);
}

bool project_to_simplex_rows(FunctionGrid& f, double floor) {
  bool clamped = false;
  for (Eigen::Index s = 0; s < f.rows(); ++s) {
    for (Eigen::Index m = 0; m < f.cols(); ++m) {
      if (!(f(s, m) >= floor)) {
        f(s, m) = floor;
        clamped = true;
      }
    }
    f.row(s) /= f.row(s).sum();
  }
  return clamped;
}

double EtaSchedule::operator()(std::size_t t) const {
  const double tt = static_cast<double>(std::max<std::size_t>(t, 1));
  switch (kind) {
    case Kind::Constant: return scale;
    case Kind::InverseT: return scale / tt;
    case Kind::InverseSqrtT: return scale / std::sqrt(tt);
  }
  return scale;
}

EtaSchedule EtaSchedule::parse(const std::string& text) {
  EtaSchedule s;
  const auto colon = text.find(':');
  std::string kind = colon == std::string::npos ? "const" : text.substr(0, colon);
  const std::string value = colon == std::string::npos ? text : text.substr(colon + 1);
  try {
    s.scale = std::stod(value);
  } catch (const std::exception&) {
    throw ParameterError("bad learning-rate schedule '" + text + "'");
  }
  if (kind == "const") s.kind = Kind::Constant;
  else if (kind == "inv") s.kind = Kind::InverseT;
  else if (kind == "invsqrt") s.kind = Kind::InverseSqrtT;
  else throw ParameterError("unknown learning-rate schedule '" + kind + "'");
  if (!(s.scale > 0.0)) throw ParameterError("learning rate must be positive");
  return s;
}

std::string EtaSchedule::to_string() const {
  char buf[64];
  const char* name = kind == Kind::Constant ? "const" : kind == Kind::InverseT ? "inv" : "invsqrt";
  std::snprintf(buf, sizeof buf, "%s:%.17g", name, scale);
  return buf;
}

MetaRunResult simulate_meta(const MetaProblem& problem, const MetaOptions& options, const MetaObserver& observer) {
  const auto& topo = problem.topology;
  const auto& ms = problem.measures;
  const std::size_t n = topo.size();
  if (ms.devices() != n) throw ParameterError("simulate_meta: measure set and topology disagree on device count");
  if (problem.init.size() != n) throw ParameterError("simulate_meta: initial federated function has wrong arity");
  if (problem.init.rows() != problem.loss.target.rows() || problem.init.cols() != problem.loss.target.cols())
    throw ParameterError("simulate_meta: initial functions do not match the target grid");
  if (static_cast<std::size_t>(problem.loss.target.rows()) != ms.grid_size())
    throw ParameterError("simulate_meta: measures do not match the grid");
  if (!topo.connected()) throw DomainError("simulate_meta: topology is disconnected");

  const bool kl = problem.loss.kind == LossKind::Kl;
  const auto& global = ms.global();
  MetaRunResult result;
  FederatedGrid f = problem.init;
  if (kl)
    for (std::size_t i = 0; i < n; ++i) result.clamped |= project_to_simplex_rows(f[i]);
  result.loss_optimum = problem.loss.value(problem.loss.target, global);

  FederatedGrid g = f;
  std::vector<FunctionGrid> subgrads(n);
  std::vector<double> norm_local(n), norm_mean(n);
  std::vector<char> clamped(n, 0);
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t t = 1; t <= options.epochs; ++t) {
    const double eta = options.eta(t);
    const FunctionGrid mean = mean_part(f);
    const double loss_mean = problem.loss.value(mean, global);
    best = std::min(best, loss_mean);
    const FunctionGrid mean_subgrad = frechet_subgradient(mean, problem.loss);

    // phase 1: local steps
    parallel_for(n, options.threads, [&](std::size_t i) {
      subgrads[i] = frechet_subgradient(f[i], problem.loss);
      norm_local[i] = norm(subgrads[i], ms.local(i));
      norm_mean[i] = norm(mean_subgrad, ms.local(i));
      local_step_into(f[i], subgrads[i], ms.nu(i), eta, g[i]);
      if (kl) clamped[i] |= project_to_simplex_rows(g[i]) ? 1 : 0;
    });

    if (observer) {
      const FunctionGrid diff = mean - problem.loss.target;
      const EpochView view{t, f, mean, rms_distance(f, global), loss_mean, best, eta, inner(diff, diff, global),
                           norm_local, norm_mean};
      observer(view);
    }

    // phase 2: aggregation reads only phase-1 outputs
    parallel_for(n, options.threads, [&](std::size_t i) { consensus_device(g, topo, options.sharing_rate, i, f[i]); });
    if (!all_finite(f)) throw NumericError("meta-algorithm state became non-finite", t);
  }
  for (auto c : clamped) result.clamped |= c != 0;
  result.final = std::move(f);
  return result;
}

double lipschitz_max(const MeasureSet& measures, std::span<const double> lipschitz) {
  if (lipschitz.size() != measures.devices()) throw ParameterError("lipschitz_max: one constant per device required");
  double lm = 0.0;
  for (std::size_t i = 0; i < lipschitz.size(); ++i) lm = std::max(lm, std::sqrt(measures.s_sup(i)) * lipschitz[i]);
  return lm;
}

double gamma(std::size_t t, double f1_norm, double kappa2, double lm, const EtaSchedule& eta, std::size_t n) {
  if (t < 1) throw ParameterError("gamma: t starts at 1");
  double sum = 0.0;
  for (std::size_t tau = 1; tau < t; ++tau) sum += eta(tau) * std::pow(kappa2, static_cast<double>(t - tau));
  return f1_norm / std::sqrt(static_cast<double>(n)) * std::pow(kappa2, static_cast<double>(t - 1)) + lm * sum;
}

double gamma_upper(std::size_t t, double f1_norm, double kappa2, double lm, double eta1, std::size_t n) {
  const double tm1 = static_cast<double>(t - 1);
  return f1_norm / std::sqrt(static_cast<double>(n)) * std::pow(kappa2, tm1) +
         lm * eta1 * kappa2 * (1.0 - std::pow(kappa2, tm1)) / (1.0 - kappa2);
}

double limit_distance(double eta1, double lm, double sharing_rate, double lambda2) {
  const double el = sharing_rate * lambda2;
  return eta1 * (1.0 - el) * lm / el;
}

double theorem2_rhs(std::size_t t, double c1, double c2, double lm, double kappa2, double f1_norm, std::size_t n,
                    const EtaSchedule& eta) {
  if (t < 2) throw ParameterError("theorem2_rhs: defined for t >= 2");
  double sum_eta = 0.0, sum_eta2 = 0.0, sum_eta2_before = 0.0;
  for (std::size_t tau = 2; tau <= t; ++tau) {
    sum_eta += eta(tau);
    sum_eta2 += eta(tau) * eta(tau);
  }
  for (std::size_t tau = 1; tau < t; ++tau) sum_eta2_before += eta(tau) * eta(tau);
  const double tail = c2 * (1.0 - std::pow(kappa2, static_cast<double>(t - 1))) *
                      (eta(1) * f1_norm + std::sqrt(static_cast<double>(n)) * lm * sum_eta2_before);
  return (c1 + lm * sum_eta2 + tail) / (2.0 * sum_eta);
}

double theorem2_limit_const(double eta, double lm, std::size_t n, double sharing_rate, double lambda2) {
  const double el = sharing_rate * lambda2;
  return 0.5 * eta * lm * (1.0 + 4.0 * std::sqrt(static_cast<double>(n)) * lm * (1.0 - el) / el);
}

BoundReport make_bound_report(double c1, double lm, const SpectralSummary& spectrum, double sharing_rate, double eta1,
                              std::size_t n) {
  BoundReport r;
  r.c1 = c1;
  r.lm = lm;
  r.kappa2 = spectrum.kappa2(sharing_rate);
  r.applicable = sharing_rate > 0.0 && sharing_rate <= spectrum.max_sharing_rate() * (1.0 + 1e-12);
  r.c2 = r.kappa2 < 1.0 ? 4.0 * lm * r.kappa2 / (1.0 - r.kappa2) : std::numeric_limits<double>::infinity();
  r.limit_d = limit_distance(eta1, lm, sharing_rate, spectrum.lambda2);
  r.limit_best = theorem2_limit_const(eta1, lm, n, sharing_rate, spectrum.lambda2);
  return r;
}

nlohmann::json to_json(const BoundReport& r) {
  return {{"C1", r.c1},           {"C2", r.c2},
          {"L_m", r.lm},          {"kappa2", r.kappa2},
          {"limit_D", r.limit_d}, {"limit_best", r.limit_best},
          {"applicable", r.applicable}};
}

std::vector<double> estimate_lipschitz(const MetaProblem& problem, const MetaOptions& options, double headroom) {
  std::vector<double> sup(problem.topology.size(), 0.0);
  simulate_meta(problem, options, [&](const EpochView& v) {
    for (std::size_t i = 0; i < sup.size(); ++i)
      sup[i] = std::max({sup[i], v.grad_norm_local[i], v.grad_norm_at_mean[i]});
  });
  for (auto& s : sup) s *= headroom;
  return sup;
}

BoundTracker::BoundTracker(double lm, double kappa2, double f1_norm, std::size_t n, double loss_optimum, double slack)
    : lm_(lm), kappa_(kappa2), f1_norm_(f1_norm), loss_optimum_(loss_optimum), slack_(slack), n_(n) {}

void BoundTracker::observe(const EpochView& view) {
  observe(view.t, view.eta, view.d_t, view.loss_best, view.mean_dist2);
}

void BoundTracker::observe(std::size_t t, double eta, double d_t, double loss_best, double mean_dist2) {
  if (t == 1) eta1_ = eta;
  gamma_ = f1_norm_ / std::sqrt(static_cast<double>(n_)) * kappa_pow_ + lm_ * geometric_;
  if (d_t > gamma_ + slack_) {
    if (gamma_violations_++ == 0) first_gamma_violation_ = t;
  }
  gap_ = loss_best - loss_optimum_;
  if (t >= 2) {
    if (t == 2) c1_ = mean_dist2;
    sum_eta_from2_ += eta;
    sum_eta2_from2_ += eta * eta;
    const double c2 = kappa_ < 1.0 ? 4.0 * lm_ * kappa_ / (1.0 - kappa_) : std::numeric_limits<double>::infinity();
    const double tail =
        c2 * (1.0 - kappa_pow_) * (eta1_ * f1_norm_ + std::sqrt(static_cast<double>(n_)) * lm_ * sum_eta2_before_);
    rhs_ = (*c1_ + lm_ * sum_eta2_from2_ + tail) / (2.0 * sum_eta_from2_);
    if (gap_ > *rhs_ + slack_) {
      if (rhs_violations_++ == 0) first_rhs_violation_ = t;
    }
  }
  // advance to t + 1
  sum_eta2_before_ += eta * eta;
  geometric_ = kappa_ * (geometric_ + eta);
  kappa_pow_ *= kappa_;
}

std::size_t MetaTrace::gamma_violations(double slack) const {
  std::size_t v = 0;
  for (std::size_t i = 0; i < d.size(); ++i) v += d[i] > gamma[i] + slack ? 1 : 0;
  return v;
}

std::size_t MetaTrace::rhs_violations(double slack) const {
  std::size_t v = 0;
  for (std::size_t i = 1; i < loss_best.size(); ++i) v += loss_best[i] - loss_optimum > thm2_rhs[i] + slack ? 1 : 0;
  return v;
}

MetaTrace run_meta(const MetaProblem& problem, const MetaOptions& options, double headroom) {
  MetaTrace trace;
  const std::size_t n = problem.topology.size();
  std::vector<double> sup(n, 0.0), etas, dist2;
  trace.d.reserve(options.epochs);
  auto sim = simulate_meta(problem, options, [&](const EpochView& v) {
    trace.d.push_back(v.d_t);
    trace.loss_mean.push_back(v.loss_mean);
    trace.loss_best.push_back(v.loss_best);
    etas.push_back(v.eta);
    dist2.push_back(v.mean_dist2);
    for (std::size_t i = 0; i < n; ++i) sup[i] = std::max({sup[i], v.grad_norm_local[i], v.grad_norm_at_mean[i]});
  });
  trace.final = std::move(sim.final);
  trace.loss_optimum = sim.loss_optimum;
  trace.clamped = sim.clamped;
  if (trace.clamped) trace.warnings.push_back("KL positivity projection was applied");

  for (auto& s : sup) s *= headroom;
  trace.lipschitz = sup;
  const double lm = lipschitz_max(problem.measures, sup);
  const auto spectrum = spectral_summary(problem.topology);
  const double f1 = fed_norm(problem.init, problem.measures.global());
  const double c1 = dist2.size() >= 2 ? dist2[1] : std::numeric_limits<double>::quiet_NaN();
  trace.bounds = make_bound_report(c1, lm, spectrum, options.sharing_rate, options.eta(1), n);
  if (!trace.bounds.applicable)
    trace.warnings.push_back("sharing rate exceeds 1/(2 max degree); convergence bounds are not applicable");

  BoundTracker tracker(lm, trace.bounds.kappa2, f1, n, trace.loss_optimum);
  for (std::size_t k = 0; k < trace.d.size(); ++k) {
    tracker.observe(k + 1, etas[k], trace.d[k], trace.loss_best[k], dist2[k]);
    trace.gamma.push_back(tracker.gamma());
    trace.thm2_rhs.push_back(tracker.rhs().value_or(std::numeric_limits<double>::quiet_NaN()));
  }
  return trace;
}

void write_trace_csv(std::ostream& os, const MetaTrace& trace) {
  os << "epoch,D_t,gamma_t,loss_mean,loss_best,thm2_rhs\n";
  char buf[256];
  for (std::size_t k = 0; k < trace.d.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", k + 1, trace.d[k], trace.gamma[k],
                  trace.loss_mean[k], trace.loss_best[k], trace.thm2_rhs[k]);
    os << buf;
  }
}

}  // namespace fsfl
