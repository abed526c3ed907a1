#include "obc/hessian.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Core>

#include "obc/error.hpp"

namespace obc {

namespace {

void mirror_lower(Matrix& h) {
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    for (Eigen::Index j = i + 1; j < h.cols(); ++j) h(i, j) = h(j, i);
}

}  // namespace

Matrix compute_hessian(std::span<const Matrix> inputs, double damp) {
  if (inputs.empty()) throw InvalidArgument("compute_hessian needs at least one input batch");
  if (!(damp >= 0.0) || !std::isfinite(damp)) throw InvalidArgument("dampening must be a finite nonnegative value");
  const Eigen::Index d = inputs.front().rows();
  Matrix h = Matrix::Zero(d, d);
  for (const auto& x : inputs) {
    if (x.rows() != d) throw InvalidArgument("input batches disagree on the feature dimension");
    h.selfadjointView<Eigen::Lower>().rankUpdate(x, 2.0);
  }
  mirror_lower(h);
  h.diagonal().array() += damp;
  return h;
}

Matrix compute_hessian(const Matrix& inputs, double damp) {
  return compute_hessian(std::span<const Matrix>(&inputs, 1), damp);
}

Matrix problem_hessian(const LayerProblem& problem, double damp, bool damp_auto) {
  if (!damp_auto) return compute_hessian(problem.inputs(), damp);
  Matrix h = compute_hessian(problem.inputs(), 0.0);
  h.diagonal().array() += auto_damp(h);
  return h;
}

double auto_damp(const Matrix& hessian) {
  if (hessian.rows() == 0) return 0.0;
  return 0.01 * hessian.diagonal().mean();
}

Matrix invert_spd(const Matrix& h) {
  if (h.rows() != h.cols()) throw InvalidArgument("invert_spd expects a square matrix");
  const Eigen::Index n = h.rows();
  if (n == 0) return Matrix(0, 0);

  const double max_diag = h.diagonal().cwiseAbs().maxCoeff();
  const double tol = 16.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;

  // Row-major lower Cholesky factor, left-looking.
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = h(j, j) - l.row(j).head(j).squaredNorm();
    if (!(pivot > tol)) {
      std::ostringstream msg;
      msg << "matrix is not positive definite: pivot " << j << " is " << pivot
          << " (increase dampening or add calibration data)";
      throw NumericalError(msg.str());
    }
    const double ljj = std::sqrt(pivot);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i)
      l(i, j) = (h(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / ljj;
  }

  Matrix linv = Matrix::Identity(n, n);
  l.triangularView<Eigen::Lower>().solveInPlace(linv);
  Matrix inv(n, n);
  inv.setZero();
  inv.selfadjointView<Eigen::Lower>().rankUpdate(linv.transpose());
  mirror_lower(inv);
  return inv;
}

Matrix masked_inverse(const Matrix& h, std::span<const Eigen::Index> mask) {
  if (mask.empty()) throw InvalidArgument("masked_inverse needs a nonempty mask");
  const auto k = static_cast<Eigen::Index>(mask.size());
  Matrix sub(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const auto i = mask[static_cast<std::size_t>(a)];
    if (i < 0 || i >= h.rows()) throw InvalidArgument("mask index out of range");
    for (Eigen::Index b = 0; b < k; ++b) sub(a, b) = h(i, mask[static_cast<std::size_t>(b)]);
  }
  return invert_spd(sub);
}

InverseHessianState::InverseHessianState(Matrix inverse)
    : inv_(std::move(inverse)),
      active_(static_cast<std::size_t>(inv_.rows()), 1),
      active_count_(inv_.rows()),
      breakdown_(0.0),
      column_(inv_.rows()) {
  if (inv_.rows() != inv_.cols()) throw InvalidArgument("inverse Hessian must be square");
  if (inv_.rows() > 0) breakdown_ = 1e-12 * inv_.trace() / static_cast<double>(inv_.rows());
}

void InverseHessianState::eliminate(Eigen::Index p) {
  if (p < 0 || p >= dim() || !is_active(p)) throw InvalidArgument("eliminate: index is not active");
  const double pivot = inv_(p, p);
  if (!(pivot > breakdown_)) {
    std::ostringstream msg;
    msg << "numerical breakdown eliminating index " << p << ": pivot " << pivot
        << " <= threshold " << breakdown_;
    throw NumericalError(msg.str());
  }
  // Off-diagonal entries of eliminated rows/columns are zero, so a dense
  // rank-1 update leaves them untouched.
  column_ = inv_.col(p);
  column_(p) = 0.0;
  const Vector row = inv_.row(p).transpose();
  column_ /= pivot;
  for (Eigen::Index i = 0; i < dim(); ++i) {
    const double f = column_(i);
    if (f != 0.0) inv_.row(i) -= f * row.transpose();
  }
  inv_.row(p).setZero();
  inv_.col(p).setZero();
  inv_(p, p) = pivot;
  active_[static_cast<std::size_t>(p)] = 0;
  --active_count_;
}

std::vector<Eigen::Index> InverseHessianState::active_indices() const {
  std::vector<Eigen::Index> out;
  out.reserve(static_cast<std::size_t>(active_count_));
  for (Eigen::Index i = 0; i < dim(); ++i)
    if (is_active(i)) out.push_back(i);
  return out;
}

Matrix InverseHessianState::active_submatrix() const {
  const auto idx = active_indices();
  const auto k = static_cast<Eigen::Index>(idx.size());
  Matrix sub(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) sub(a, b) = inv_(idx[a], idx[b]);
  return sub;
}

}  // namespace obc
