#pragma once

#include <span>
#include <vector>

#include "obc/tensor_io.hpp"

namespace obc {

// 2 X X^T + damp I, exactly symmetric.
Matrix compute_hessian(const Matrix& inputs, double damp);

// Accumulates 2 X_i X_i^T over several input batches (e.g. augmented
// copies of the calibration set) before adding damp I.
Matrix compute_hessian(std::span<const Matrix> inputs, double damp);

// Hessian of a layer problem; damp_auto replaces `damp` by auto_damp().
Matrix problem_hessian(const LayerProblem& problem, double damp, bool damp_auto);

// 0.01 * mean diagonal of an undamped Hessian; what "--damp auto" means.
double auto_damp(const Matrix& hessian);

// Inverse of a symmetric positive definite matrix via Cholesky. Throws
// NumericalError naming the first pivot that is not safely positive.
Matrix invert_spd(const Matrix& h);

// Inverse of h restricted to the given (sorted or unsorted) indices.
Matrix masked_inverse(const Matrix& h, std::span<const Eigen::Index> mask);

// Working copy of H^-1 for one row. Eliminated indices keep their
// diagonal entry and have zero off-diagonal row/column, so the matrix never
// needs resizing.
class InverseHessianState {
 public:
  explicit InverseHessianState(Matrix inverse);

  // Gaussian elimination of row/column p (row & column removal). After the
  // call, the active submatrix is the inverse of H with p deleted.
  void eliminate(Eigen::Index p);

  const Matrix& inv() const { return inv_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return inv_(i, j); }
  Eigen::Index dim() const { return inv_.rows(); }
  bool is_active(Eigen::Index p) const { return active_[static_cast<std::size_t>(p)] != 0; }
  Eigen::Index active_count() const { return active_count_; }
  std::vector<Eigen::Index> active_indices() const;

  // Pivots at or below this value are treated as numerical breakdown.
  double breakdown_threshold() const { return breakdown_; }

  // Inverse restricted to the active indices, in ascending index order.
  Matrix active_submatrix() const;

 private:
  Matrix inv_;
  std::vector<char> active_;
  Eigen::Index active_count_;
  double breakdown_;
  Vector column_;
};

}  // namespace obc
