#pragma once

// Discretized L2(mu) and the federated-function algebra over it.
//
// A function f: X -> R^M is stored on a fixed sample grid as an S x M array
// whose row s is f(x_s). Measures are atomic, so every integral is an exact
// weighted sum over grid rows.

#include "fsfl/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace fsfl {

template <class Scalar>
using Grid = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Weights = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using FunctionGrid = Grid<double>;
using MeasureWeights = Weights<double>;

/// Ordered input points x_s (rows) and the output dimension M.
struct SampleGrid {
  Eigen::MatrixXd points;  // S x N
  std::size_t dim_out = 1;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t dim_in() const { return static_cast<std::size_t>(points.cols()); }

  /// S equispaced points on [lo, hi] in one dimension.
  static SampleGrid linspace(double lo, double hi, std::size_t count, std::size_t dim_out = 1) {
    if (count == 0) throw ParameterError("SampleGrid needs at least one point");
    SampleGrid g;
    g.points.resize(static_cast<Eigen::Index>(count), 1);
    for (std::size_t s = 0; s < count; ++s)
      g.points(static_cast<Eigen::Index>(s), 0) =
          count == 1 ? lo : lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(count - 1);
    g.dim_out = dim_out;
    return g;
  }
};

/// Neumaier-compensated running sum. Accumulation order is the caller's
/// loop order, so results do not depend on threading.
template <class Scalar>
class CompensatedSum {
 public:
  void add(Scalar v) {
    const Scalar t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) comp_ += (sum_ - t) + v;
    else comp_ += (v - t) + sum_;
    sum_ = t;
  }
  Scalar value() const { return sum_ + comp_; }

 private:
  Scalar sum_{0};
  Scalar comp_{0};
};

namespace detail {
template <class A, class B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ParameterError(std::string(what) + ": shape mismatch");
}
}  // namespace detail

/// <f, g>_{L2(m)} = sum_s m_s <f(x_s), g(x_s)>.
template <class DerivedF, class DerivedG, class DerivedW>
typename DerivedF::Scalar inner(const Eigen::MatrixBase<DerivedF>& f, const Eigen::MatrixBase<DerivedG>& g,
                                const Eigen::MatrixBase<DerivedW>& weights) {
  using Scalar = typename DerivedF::Scalar;
  detail::require_same_shape(f, g, "inner");
  if (weights.size() != f.rows()) throw ParameterError("inner: weight count does not match grid size");
  const auto& fe = f.derived();
  const auto& ge = g.derived();
  CompensatedSum<Scalar> acc;
  for (Eigen::Index s = 0; s < fe.rows(); ++s) {
    const Scalar w = weights.coeff(s);
    if (w == Scalar(0)) continue;
    Scalar row(0);
    for (Eigen::Index m = 0; m < fe.cols(); ++m) row += fe.coeff(s, m) * ge.coeff(s, m);
    acc.add(w * row);
  }
  return acc.value();
}

template <class DerivedF, class DerivedW>
typename DerivedF::Scalar norm(const Eigen::MatrixBase<DerivedF>& f, const Eigen::MatrixBase<DerivedW>& weights) {
  using std::sqrt;
  return sqrt(inner(f, f, weights));
}

/// Probability measures on the grid: the global mu and one mu_i per device,
/// with the density ratio nu_i = d mu_i / d mu and its supremum S_i.
class MeasureSet {
 public:
  /// Global measure taken as the device average, (1/n) sum_i mu_i.
  static MeasureSet from_locals(std::vector<MeasureWeights> locals) {
    if (locals.empty()) throw ParameterError("MeasureSet needs at least one device");
    MeasureWeights global = MeasureWeights::Zero(locals.front().size());
    for (const auto& l : locals) {
      if (l.size() != global.size()) throw ParameterError("MeasureSet: device measures differ in grid size");
      global += l;
    }
    global /= static_cast<double>(locals.size());
    return MeasureSet(std::move(global), std::move(locals));
  }

  /// Explicit global measure. Requires mu_i << mu for every device.
  MeasureSet(MeasureWeights global, std::vector<MeasureWeights> locals)
      : global_(std::move(global)), locals_(std::move(locals)) {
    check_probability(global_, "global");
    nu_.reserve(locals_.size());
    s_sup_.reserve(locals_.size());
    for (std::size_t i = 0; i < locals_.size(); ++i) {
      const auto& l = locals_[i];
      if (l.size() != global_.size()) throw ParameterError("MeasureSet: device measures differ in grid size");
      check_probability(l, "device " + std::to_string(i));
      MeasureWeights nu = MeasureWeights::Zero(l.size());
      for (Eigen::Index s = 0; s < l.size(); ++s) {
        if (global_(s) > 0.0) nu(s) = l(s) / global_(s);
        else if (l(s) > 0.0)
          throw DomainError("device " + std::to_string(i) + " is not absolutely continuous w.r.t. the global measure");
      }
      s_sup_.push_back(nu.maxCoeff());
      nu_.push_back(std::move(nu));
    }
  }

  std::size_t devices() const { return locals_.size(); }
  std::size_t grid_size() const { return static_cast<std::size_t>(global_.size()); }
  const MeasureWeights& global() const { return global_; }
  const MeasureWeights& local(std::size_t i) const { return locals_.at(i); }
  const MeasureWeights& nu(std::size_t i) const { return nu_.at(i); }
  double s_sup(std::size_t i) const { return s_sup_.at(i); }

 private:
  static void check_probability(const MeasureWeights& w, const std::string& who) {
    if ((w.array() < 0.0).any()) throw ParameterError("measure " + who + " has negative weight");
    CompensatedSum<double> acc;
    for (Eigen::Index s = 0; s < w.size(); ++s) acc.add(w(s));
    if (std::abs(acc.value() - 1.0) > 1e-12) throw ParameterError("measure " + who + " does not sum to 1");
  }

  MeasureWeights global_;
  std::vector<MeasureWeights> locals_;
  std::vector<MeasureWeights> nu_;
  std::vector<double> s_sup_;
};

/// n-tuple of functions on one shared grid, an element of (L2(mu))^n.
template <class Scalar>
class FederatedFunction {
 public:
  using Part = Grid<Scalar>;

  FederatedFunction() = default;
  explicit FederatedFunction(std::vector<Part> parts) : parts_(std::move(parts)) {
    for (const auto& p : parts_)
      if (p.rows() != parts_.front().rows() || p.cols() != parts_.front().cols())
        throw ParameterError("FederatedFunction: parts differ in shape");
  }
  static FederatedFunction zeros(std::size_t n, Eigen::Index rows, Eigen::Index cols) {
    return FederatedFunction(std::vector<Part>(n, Part::Zero(rows, cols)));
  }
  static FederatedFunction replicate(std::size_t n, const Part& p) {
    return FederatedFunction(std::vector<Part>(n, p));
  }

  std::size_t size() const { return parts_.size(); }
  Eigen::Index rows() const { return parts_.empty() ? 0 : parts_.front().rows(); }
  Eigen::Index cols() const { return parts_.empty() ? 0 : parts_.front().cols(); }
  const Part& operator[](std::size_t i) const { return parts_[i]; }
  Part& operator[](std::size_t i) { return parts_[i]; }
  const std::vector<Part>& parts() const { return parts_; }

  FederatedFunction& operator+=(const FederatedFunction& o) {
    check_arity(o);
    for (std::size_t i = 0; i < size(); ++i) parts_[i] += o.parts_[i];
    return *this;
  }
  FederatedFunction& operator-=(const FederatedFunction& o) {
    check_arity(o);
    for (std::size_t i = 0; i < size(); ++i) parts_[i] -= o.parts_[i];
    return *this;
  }
  FederatedFunction& operator*=(Scalar c) {
    for (auto& p : parts_) p *= c;
    return *this;
  }
  friend FederatedFunction operator+(FederatedFunction a, const FederatedFunction& b) { return a += b; }
  friend FederatedFunction operator-(FederatedFunction a, const FederatedFunction& b) { return a -= b; }
  friend FederatedFunction operator*(Scalar c, FederatedFunction a) { return a *= c; }

  void check_arity(const FederatedFunction& o) const {
    if (o.size() != size() || o.rows() != rows() || o.cols() != cols())
      throw ParameterError("federated functions differ in arity or shape");
  }

 private:
  std::vector<Part> parts_;
};

using FederatedGrid = FederatedFunction<double>;

/// <a, b>_F = sum_i <a_i, b_i>_{L2(mu)} under the global measure.
template <class Scalar, class DerivedW>
Scalar fed_inner(const FederatedFunction<Scalar>& a, const FederatedFunction<Scalar>& b,
                 const Eigen::MatrixBase<DerivedW>& weights) {
  a.check_arity(b);
  CompensatedSum<Scalar> acc;
  for (std::size_t i = 0; i < a.size(); ++i) acc.add(inner(a[i], b[i], weights));
  return acc.value();
}

template <class Scalar, class DerivedW>
Scalar fed_norm(const FederatedFunction<Scalar>& a, const Eigen::MatrixBase<DerivedW>& weights) {
  using std::sqrt;
  return sqrt(fed_inner(a, a, weights));
}

/// (A a)_i = sum_j A_ij a_j.
template <class DerivedA, class Scalar>
FederatedFunction<Scalar> matrix_apply(const Eigen::MatrixBase<DerivedA>& a, const FederatedFunction<Scalar>& f) {
  const auto n = static_cast<Eigen::Index>(f.size());
  if (a.rows() != n || a.cols() != n) throw ParameterError("matrix_apply: matrix is not n x n for n parts");
  auto out = FederatedFunction<Scalar>::zeros(f.size(), f.rows(), f.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (a(i, j) != Scalar(0)) out[static_cast<std::size_t>(i)] += a(i, j) * f[static_cast<std::size_t>(j)];
  return out;
}

/// Pointwise mean of the parts.
template <class Scalar>
Grid<Scalar> mean_part(const FederatedFunction<Scalar>& f) {
  Grid<Scalar> m = Grid<Scalar>::Zero(f.rows(), f.cols());
  for (const auto& p : f.parts()) m += p;
  if (f.size() > 0) m /= static_cast<Scalar>(f.size());
  return m;
}

/// (1/n) 1 1^T a: every part replaced by the mean part.
template <class Scalar>
FederatedFunction<Scalar> mean_fed(const FederatedFunction<Scalar>& f) {
  return FederatedFunction<Scalar>::replicate(f.size(), mean_part(f));
}

/// Root-mean-square distance of the parts from their mean, (1/sqrt n) ||a - mean(a)||_F.
template <class Scalar, class DerivedW>
Scalar rms_distance(const FederatedFunction<Scalar>& f, const Eigen::MatrixBase<DerivedW>& weights) {
  using std::sqrt;
  if (f.size() == 0) return Scalar(0);
  const auto m = mean_part(f);
  CompensatedSum<Scalar> acc;
  for (const auto& p : f.parts()) {
    const Grid<Scalar> diff = p - m;
    acc.add(inner(diff, diff, weights));
  }
  return sqrt(acc.value() / static_cast<Scalar>(f.size()));
}

/// Federated function attaining ||A a||_F = ||A|| ||a||_F: part i is the
/// constant v_i in every output coordinate, v the top right singular vector.
template <class DerivedA>
FederatedFunction<typename DerivedA::Scalar> lemma1_witness(const Eigen::MatrixBase<DerivedA>& a,
                                                            std::size_t grid_size, std::size_t dim_out) {
  using Scalar = typename DerivedA::Scalar;
  if (a.rows() != a.cols()) throw ParameterError("lemma1_witness: matrix must be square");
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Mat dense = a;
  Eigen::JacobiSVD<Mat> svd(dense, Eigen::ComputeFullV);
  const auto v = svd.matrixV().col(0);
  std::vector<Grid<Scalar>> parts;
  parts.reserve(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    parts.push_back(Grid<Scalar>::Constant(static_cast<Eigen::Index>(grid_size), static_cast<Eigen::Index>(dim_out), v(i)));
  return FederatedFunction<Scalar>(std::move(parts));
}

/// CSV snapshot: header x_0..x_{N-1},y_0..y_{M-1}, one row per grid point.
void write_function_csv(std::ostream& os, const SampleGrid& grid, const FunctionGrid& f);

}  // namespace fsfl
