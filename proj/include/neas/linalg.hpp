#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

namespace neas {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// In-place LU factorization with partial (row) pivoting. On return `lu`
/// holds U on and above the diagonal and the unit-lower L multipliers below
/// it. Returns the permutation parity (+1 or -1), or 0 when a pivot column
/// is exactly zero.
template <typename Derived>
int lu_factorize_in_place(Eigen::MatrixBase<Derived>& lu) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = lu.rows();
  int parity = 1;
  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index pivot = col;
    Scalar best = std::abs(lu(col, col));
    for (Eigen::Index r = col + 1; r < n; ++r) {
      if (std::abs(lu(r, col)) > best) {
        best = std::abs(lu(r, col));
        pivot = r;
      }
    }
    if (best == Scalar(0)) return 0;
    if (pivot != col) {
      lu.row(pivot).swap(lu.row(col));
      parity = -parity;
    }
    const Scalar inv = Scalar(1) / lu(col, col);
    for (Eigen::Index r = col + 1; r < n; ++r) {
      const Scalar f = lu(r, col) * inv;
      lu(r, col) = f;
      for (Eigen::Index c = col + 1; c < n; ++c) lu(r, c) -= f * lu(col, c);
    }
  }
  return parity;
}

/// Determinant via partial-pivot LU. Empty matrices have determinant 1.
template <typename Derived>
typename Derived::Scalar lu_determinant(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  eigen_assert(a.rows() == a.cols());
  MatrixX<Scalar> lu = a;
  const int parity = lu_factorize_in_place(lu);
  if (parity == 0) return Scalar(0);
  Scalar det = Scalar(parity);
  for (Eigen::Index i = 0; i < lu.rows(); ++i) det *= lu(i, i);
  return det;
}

/// Principal submatrix on `idx` (row and column indices into `a`).
template <typename Derived>
MatrixX<typename Derived::Scalar> principal_submatrix(
    const Eigen::MatrixBase<Derived>& a, std::span<const int> idx) {
  const auto k = static_cast<Eigen::Index>(idx.size());
  MatrixX<typename Derived::Scalar> sub(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) sub(i, j) = a(idx[i], idx[j]);
  }
  return sub;
}

}  // namespace neas
