#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fsfl {

template <class Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Householder reduction of a symmetric matrix to tridiagonal form.
/// On return `diag` holds the diagonal and `off` the subdiagonal (size n-1).
/// Only the lower triangle of `a` is read.
template <class Derived>
void tridiagonalize(const Eigen::MatrixBase<Derived>& a,
                    DenseVector<typename Derived::Scalar>& diag,
                    DenseVector<typename Derived::Scalar>& off) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("tridiagonalize: matrix is not square");
  DenseMatrix<Scalar> w = a.template selfadjointView<Eigen::Lower>();
  for (Eigen::Index k = 0; k + 2 < n; ++k) {
    const Eigen::Index m = n - k - 1;
    DenseVector<Scalar> v = w.col(k).tail(m);
    const Scalar xnorm = v.norm();
    if (xnorm == Scalar(0)) continue;
    const Scalar alpha = v(0) > Scalar(0) ? -xnorm : xnorm;
    v(0) -= alpha;
    const Scalar vnorm = v.norm();
    if (vnorm == Scalar(0)) continue;
    v /= vnorm;
    auto sub = w.bottomRightCorner(m, m);
    const DenseVector<Scalar> p = sub * v;
    const DenseVector<Scalar> q = p - v.dot(p) * v;
    sub.noalias() -= Scalar(2) * (v * q.transpose() + q * v.transpose());
    w.col(k).tail(m).setZero();
    w.row(k).tail(m).setZero();
    w(k + 1, k) = alpha;
    w(k, k + 1) = alpha;
  }
  diag = w.diagonal();
  off = n > 1 ? DenseVector<Scalar>(w.diagonal(-1)) : DenseVector<Scalar>();
}

/// Eigenvalues of a symmetric tridiagonal matrix by the implicit QL method
/// with Wilkinson-style shifts. Returns them sorted ascending.
template <class Scalar>
DenseVector<Scalar> tridiagonal_eigenvalues(DenseVector<Scalar> d, const DenseVector<Scalar>& sub) {
  const Eigen::Index n = d.size();
  DenseVector<Scalar> e = DenseVector<Scalar>::Zero(n);
  if (n > 1) e.head(n - 1) = sub;
  const Scalar tiny = std::numeric_limits<Scalar>::epsilon();

  for (Eigen::Index l = 0; l < n; ++l) {
    int iter = 0;
    Eigen::Index m;
    do {
      for (m = l; m + 1 < n; ++m) {
        const Scalar dd = std::abs(d(m)) + std::abs(d(m + 1));
        if (std::abs(e(m)) <= tiny * dd) break;
      }
      if (m == l) break;
      if (++iter > 64) throw std::runtime_error("tridiagonal_eigenvalues: no convergence");

      Scalar g = (d(l + 1) - d(l)) / (Scalar(2) * e(l));
      Scalar r = std::hypot(g, Scalar(1));
      g = d(m) - d(l) + e(l) / (g + std::copysign(r, g));
      Scalar s = 1, c = 1, p = 0;
      bool underflow = false;
      for (Eigen::Index i = m - 1; i >= l; --i) {
        const Scalar f = s * e(i);
        const Scalar b = c * e(i);
        r = std::hypot(f, g);
        e(i + 1) = r;
        if (r == Scalar(0)) {
          d(i + 1) -= p;
          e(m) = 0;
          underflow = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = d(i + 1) - p;
        r = (d(i) - g) * s + Scalar(2) * c * b;
        p = s * r;
        d(i + 1) = g + p;
        g = c * r - b;
      }
      if (underflow) continue;
      d(l) -= p;
      e(l) = g;
      e(m) = 0;
    } while (true);
  }
  std::stable_sort(d.data(), d.data() + n);
  return d;
}

/// All eigenvalues of a real symmetric matrix, ascending.
template <class Derived>
DenseVector<typename Derived::Scalar> symmetric_eigenvalues(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  DenseVector<Scalar> diag, off;
  tridiagonalize(a, diag, off);
  return tridiagonal_eigenvalues<Scalar>(diag, off);
}

}  // namespace fsfl
