#pragma once

#include <Eigen/Dense>

#include "xmodal/core.hpp"

namespace xmodal::detail {

using EMat =
    Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C (m x n) = A (m x k) * B (k x n), optionally accumulating into C.
inline void gemm(const real* A, const real* B, real* C, int m, int k, int n,
                 bool accumulate) {
  ECMap a(A, m, k), b(B, k, n);
  EMap c(C, m, n);
  if (accumulate)
    c.noalias() += a * b;
  else
    c.noalias() = a * b;
}

// C (m x n) = A^T * B where A is (k x m).
inline void gemm_at(const real* A, const real* B, real* C, int m, int k, int n,
                    bool accumulate) {
  ECMap a(A, k, m), b(B, k, n);
  EMap c(C, m, n);
  if (accumulate)
    c.noalias() += a.transpose() * b;
  else
    c.noalias() = a.transpose() * b;
}

// C (m x n) = A * B^T where B is (n x k).
inline void gemm_bt(const real* A, const real* B, real* C, int m, int k, int n,
                    bool accumulate) {
  ECMap a(A, m, k), b(B, n, k);
  EMap c(C, m, n);
  if (accumulate)
    c.noalias() += a * b.transpose();
  else
    c.noalias() = a * b.transpose();
}

}  // namespace xmodal::detail
