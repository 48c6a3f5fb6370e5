#pragma once

// Consensus-based subgradient descent in function space, and executable forms
// of its disagreement (D_t <= gamma_t) and optimality bounds.

#include "fsfl/funcspace.hpp"
#include "fsfl/graph.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace fsfl {

enum class LossKind { Mse, Kl };

/// Integral risk of a pointwise cost l(f(x), f*(x)).
///   MSE: l(y, y') = ||y - y'||^2
///   KL:  l(y, y') = sum_m y_m log(y_m / y'_m)   (prediction first)
struct LossFunctional {
  LossKind kind = LossKind::Mse;
  FunctionGrid target;

  double value(const FunctionGrid& f, const MeasureWeights& weights) const;
};

/// Pointwise derivative of l in its first argument, which is the Riesz
/// representative of the Frechet derivative in L2(mu_i) for any mu_i.
FunctionGrid frechet_subgradient(const FunctionGrid& f, const LossFunctional& loss);

/// g = f - eta * d * nu, pointwise in the grid rows.
FunctionGrid local_step(const FunctionGrid& f, const FunctionGrid& subgrad, const MeasureWeights& nu, double eta);

/// f_i = g_i - eps n_i (g_i - (1/n_i) sum_{j in N(i)} g_j), per device.
FederatedGrid consensus_step(const FederatedGrid& g, const Topology& t, double sharing_rate);
/// Same update in matrix form, (I - eps L) g.
FederatedGrid consensus_step_matrix(const FederatedGrid& g, const Topology& t, double sharing_rate);

/// Clamp at `floor` and renormalize every row to sum 1. Returns true if any
/// entry was clamped.
bool project_to_simplex_rows(FunctionGrid& f, double floor = 1e-12);

struct EtaSchedule {
  enum class Kind { Constant, InverseT, InverseSqrtT };
  Kind kind = Kind::Constant;
  double scale = 0.1;

  /// Learning rate at epoch t >= 1.
  double operator()(std::size_t t) const;

  /// "const:0.1", "inv:0.1" (0.1/t) or "invsqrt:0.1" (0.1/sqrt t).
  static EtaSchedule parse(const std::string& text);
  std::string to_string() const;
};

struct MetaProblem {
  Topology topology;
  MeasureSet measures;
  LossFunctional loss;
  FederatedGrid init;
};

struct MetaOptions {
  EtaSchedule eta;
  double sharing_rate = 0.1;
  std::size_t epochs = 100;
  std::size_t threads = 1;
};

/// State handed to observers at the start of epoch t (before the update).
struct EpochView {
  std::size_t t;
  const FederatedGrid& f;
  const FunctionGrid& mean;
  double d_t;
  double loss_mean;
  double loss_best;
  double eta;
  double mean_dist2;  // ||mean_t - f*||^2_{L2(mu)}
  std::span<const double> grad_norm_local;    // ||d_i^t||_{L2(mu_i)}
  std::span<const double> grad_norm_at_mean;  // ||dL_{mu_i}(mean_t)||_{L2(mu_i)}
};

using MetaObserver = std::function<void(const EpochView&)>;

struct MetaRunResult {
  FederatedGrid final;
  double loss_optimum = 0.0;  // L_mu(f*)
  bool clamped = false;       // KL positivity projection fired
};

/// Runs `epochs` synchronous rounds: every device takes its local step, then
/// every device aggregates its neighbors' temporal functions. The observer
/// sees f_t for t = 1..epochs. Throws NumericError on non-finite state.
MetaRunResult simulate_meta(const MetaProblem& problem, const MetaOptions& options,
                            const MetaObserver& observer = {});

// ---- bounds ---------------------------------------------------------------

/// L_m = max_i sqrt(S_i) L_i.
double lipschitz_max(const MeasureSet& measures, std::span<const double> lipschitz);

/// gamma_t = ||f_1||_F kappa^{t-1} / sqrt(n) + L_m sum_{tau<t} eta_tau kappa^{t-tau}, by direct summation.
double gamma(std::size_t t, double f1_norm, double kappa2, double lm, const EtaSchedule& eta, std::size_t n);

/// Closed-form upper bound on gamma_t for non-increasing rates (eta_1 in place of eta_tau).
double gamma_upper(std::size_t t, double f1_norm, double kappa2, double lm, double eta1, std::size_t n);

/// Limit of the disagreement bound, eta_1 (1 - eps l2) L_m / (eps l2).
double limit_distance(double eta1, double lm, double sharing_rate, double lambda2);

/// Right-hand side of the best-iterate optimality bound at t >= 2, by direct summation.
double theorem2_rhs(std::size_t t, double c1, double c2, double lm, double kappa2, double f1_norm, std::size_t n,
                    const EtaSchedule& eta);

/// Constant-rate limit (eta L_m / 2)(1 + 4 sqrt(n) L_m (1 - eps l2)/(eps l2)).
double theorem2_limit_const(double eta, double lm, std::size_t n, double sharing_rate, double lambda2);

struct BoundReport {
  double c1 = 0.0;
  double c2 = 0.0;
  double lm = 0.0;
  double kappa2 = 0.0;
  double limit_d = 0.0;
  double limit_best = 0.0;  // meaningful for constant rates
  bool applicable = true;   // false when eps > 1/(2 Delta)
};

BoundReport make_bound_report(double c1, double lm, const SpectralSummary& spectrum, double sharing_rate,
                              double eta1, std::size_t n);
nlohmann::json to_json(const BoundReport& r);

/// Per-device Lipschitz estimates: headroom times the largest subgradient
/// norm seen at any iterate or iterate mean during a run (first pass).
std::vector<double> estimate_lipschitz(const MetaProblem& problem, const MetaOptions& options,
                                       double headroom = 1.1);

/// Streaming evaluation of gamma_t and the optimality bound along a run,
/// counting violations of D_t <= gamma_t and gap_t <= rhs_t (second pass).
class BoundTracker {
 public:
  BoundTracker(double lm, double kappa2, double f1_norm, std::size_t n, double loss_optimum, double slack = 1e-9);

  void observe(const EpochView& view);
  void observe(std::size_t t, double eta, double d_t, double loss_best, double mean_dist2);

  double gamma() const { return gamma_; }
  std::optional<double> rhs() const { return rhs_; }
  std::optional<double> c1() const { return c1_; }
  std::size_t gamma_violations() const { return gamma_violations_; }
  std::size_t rhs_violations() const { return rhs_violations_; }
  std::size_t first_gamma_violation() const { return first_gamma_violation_; }
  std::size_t first_rhs_violation() const { return first_rhs_violation_; }
  double gap() const { return gap_; }

 private:
  double lm_, kappa_, f1_norm_, loss_optimum_, slack_;
  std::size_t n_;
  double gamma_ = 0.0;
  double geometric_ = 0.0;  // sum_{tau<t} eta_tau kappa^{t-tau}
  double kappa_pow_ = 1.0;  // kappa^{t-1}
  double eta1_ = 0.0;
  double sum_eta_from2_ = 0.0, sum_eta2_from2_ = 0.0, sum_eta2_before_ = 0.0;
  std::optional<double> c1_, rhs_;
  double gap_ = 0.0;
  std::size_t gamma_violations_ = 0, rhs_violations_ = 0;
  std::size_t first_gamma_violation_ = 0, first_rhs_violation_ = 0;
};

struct MetaTrace {
  std::vector<double> d;
  std::vector<double> gamma;
  std::vector<double> loss_mean;
  std::vector<double> loss_best;
  std::vector<double> thm2_rhs;  // NaN at t = 1
  std::vector<double> lipschitz;
  BoundReport bounds;
  FederatedGrid final;
  double loss_optimum = 0.0;
  bool clamped = false;
  std::vector<std::string> warnings;

  std::size_t gamma_violations(double slack = 1e-9) const;
  std::size_t rhs_violations(double slack = 1e-9) const;
};

/// Full run with bound reporting: one simulation recording the trace and the
/// subgradient norms, then gamma_t and the optimality bound evaluated on it.
MetaTrace run_meta(const MetaProblem& problem, const MetaOptions& options, double headroom = 1.1);

/// CSV: epoch,D_t,gamma_t,loss_mean,loss_best,thm2_rhs
void write_trace_csv(std::ostream& os, const MetaTrace& trace);

}  // namespace fsfl
