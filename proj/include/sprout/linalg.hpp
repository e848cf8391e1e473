#pragma once

// Thin SVD by one-sided (Hestenes) Jacobi rotations.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sprout/error.hpp"

namespace sprout {

struct ThinSvd {
  Eigen::VectorXd singular_values;  // descending, length min(m, n)
  // Right singular vectors as columns, n x min(m, n). Filled on request.
  Eigen::MatrixXd v;
};

namespace detail {

// Rotates column pairs of `a` (m x n) until they are mutually orthogonal,
// applying the same rotations to `v` when non-null.
inline void jacobi_orthogonalize(Eigen::MatrixXd& a, Eigen::MatrixXd* v) {
  const Eigen::Index n = a.cols();
  constexpr double tol = 1e-15;
  constexpr int max_sweeps = 80;
  Eigen::VectorXd tmp;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        tmp = a.col(p);
        a.col(p) = c * tmp - s * a.col(q);
        a.col(q) = s * tmp + c * a.col(q);
        if (v) {
          tmp = v->col(p);
          v->col(p) = c * tmp - s * v->col(q);
          v->col(q) = s * tmp + c * v->col(q);
        }
      }
    }
    if (!rotated) return;
  }
}

inline std::vector<Eigen::Index> descending_order(const Eigen::VectorXd& x) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return x(i) > x(j); });
  return order;
}

}  // namespace detail

inline ThinSvd thin_svd(const Eigen::MatrixXd& m, bool want_v = false) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("SVD of an empty matrix");
  if (!m.allFinite()) throw NumericError("SVD input contains non-finite values");
  ThinSvd out;

  if (m.rows() >= m.cols()) {
    // Rotating columns of m: m V = U S, so the rotations accumulate V. A
    // tall input is replaced by its R factor first (same S and V).
    const Eigen::Index n = m.cols();
    Eigen::MatrixXd a = m;
    if (m.rows() > 2 * n) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
      a = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
    }
    Eigen::MatrixXd v;
    if (want_v) v = Eigen::MatrixXd::Identity(n, n);
    detail::jacobi_orthogonalize(a, want_v ? &v : nullptr);
    const Eigen::VectorXd norms = a.colwise().norm().transpose();
    const auto order = detail::descending_order(norms);
    out.singular_values.resize(n);
    if (want_v) out.v.resize(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto k = order[static_cast<std::size_t>(j)];
      out.singular_values(j) = norms(k);
      if (want_v) out.v.col(j) = v.col(k);
    }
    return out;
  }

  // Wide input: orthogonalize the columns of m^T. Their normalized results
  // are the left vectors of m^T, i.e. the right vectors of m.
  const Eigen::Index k = m.rows();
  Eigen::MatrixXd w = m.transpose();
  detail::jacobi_orthogonalize(w, nullptr);
  const Eigen::VectorXd norms = w.colwise().norm().transpose();
  const auto order = detail::descending_order(norms);
  out.singular_values.resize(k);
  if (want_v) out.v = Eigen::MatrixXd::Zero(m.cols(), k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto c = order[static_cast<std::size_t>(j)];
    out.singular_values(j) = norms(c);
    if (want_v && norms(c) > 0) out.v.col(j) = w.col(c) / norms(c);
  }
  return out;
}

}  // namespace sprout
