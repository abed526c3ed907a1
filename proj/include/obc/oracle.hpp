#pragma once

#include <functional>
#include <vector>

#include "obc/allocator.hpp"
#include "obc/tensor_io.hpp"

// Brute-force references. Nothing here calls into the fast solvers: masked
// Hessians are re-inverted from scratch with Eigen's LU/LDLT at every step,
// and masks/allocations are enumerated exhaustively.
namespace obc::oracle {

struct NaiveStep {
  Eigen::Index index = -1;
  Vector w;
  double delta = 0.0;
};

// One greedy OBS step: invert H on the indices not in `removed`, pick
// argmin w_p^2 / [H_S^-1]_pp (lowest index on ties), update and zero p.
NaiveStep naive_obs_step(const Vector& w, const Matrix& h, const std::vector<bool>& removed);

// Generalized step toward target(w_p) with an optional candidate filter and
// outlier threshold (largest error above it goes first).
NaiveStep naive_target_step(const Vector& w, const Matrix& h, const std::vector<bool>& removed,
                            const std::function<double(double)>& target,
                            const std::function<bool(Eigen::Index)>& allowed, double outlier_threshold);

struct NaiveTrace {
  std::vector<Eigen::Index> order;
  std::vector<double> deltas;
  Vector w;
};

NaiveTrace naive_prune_row(const Vector& w, const Matrix& h, Eigen::Index k);

// Plain asymmetric/symmetric rounding grid, reimplemented here.
struct Grid {
  double scale;
  long long zero_point;
  int bits;
  bool symmetric;
};
double naive_quantize(double w, const Grid& g);

NaiveTrace naive_quantize_row(const Vector& w, const Matrix& h, const Grid& g, bool outlier_rule);

// N:M restricted greedy row.
NaiveTrace naive_nm_row(const Vector& w, const Matrix& h, int n, int m);

// Block OBS with block scores w_P^T ((H_S^-1)_P)^-1 w_P.
NaiveTrace naive_block_row(const Vector& w, const Matrix& h, int block_size, Eigen::Index blocks);

struct NaiveGlobal {
  Matrix weights;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> order;  // (row, index)
};

// OBS on the whole matrix: each step takes the globally cheapest weight
// (ties: lowest row, then lowest column).
NaiveGlobal naive_global_obs(const Matrix& weights, const Matrix& h, Eigen::Index k);

// Same for aligned blocks of size c; k counts blocks. `order` holds (row, block).
NaiveGlobal naive_global_block(const Matrix& weights, const Matrix& h, int block_size, Eigen::Index k);

struct MaskSolution {
  std::vector<Eigen::Index> mask;  // pruned indices, ascending
  Vector w;
  // (w - w')^T H (w - w'), the same scale as the OBS ledger deltas.
  double loss = 0.0;
};

// Least-squares optimal row with zeros on `mask`, solved on the support.
MaskSolution solve_on_mask(const Vector& w, const Matrix& h, const std::vector<Eigen::Index>& mask);

// Best k-mask by enumeration. Throws if C(d, k) > 1e6.
MaskSolution exhaustive_mask(const Vector& w, const Matrix& h, Eigen::Index k);

// Optimal plan by enumeration over exact costs. Throws if the product of
// level counts exceeds 1e6 or no assignment fits.
AllocationPlan exhaustive_allocate(const CompressionDatabase& db, double budget);

}  // namespace obc::oracle
