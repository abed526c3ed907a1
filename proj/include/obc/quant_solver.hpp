#pragma once

#include <vector>

#include "obc/hessian.hpp"
#include "obc/ledger.hpp"
#include "obc/tensor_io.hpp"

namespace obc {

// Uniform grid Delta * (q - z) for integer q in [0, 2^bits - 1]
// (asymmetric) or Delta * q for q in [-2^(bits-1), 2^(bits-1) - 1]
// (symmetric, z = 0).
struct QuantGrid {
  double scale = 1.0;
  long long zero_point = 0;
  int bits = 8;
  bool symmetric = false;

  long long qmin() const;
  long long qmax() const;
  // True if v is exactly scale * (q - zero_point) for an in-range q.
  bool contains(double v) const;
};

// Round half away from zero, clamp to the representable range.
double quantize_value(double w, const QuantGrid& g);

// MSE-optimal grid over 128 clipping ratios r in [0.5, 1] of the row range.
// An all-zero row yields the degenerate grid (scale 1, zero point 0).
QuantGrid fit_grid(const Vector& w, int bits, bool symmetric);

struct QuantizeOptions {
  double damp = 0.0;
  bool damp_auto = false;
  unsigned threads = 0;
  // Quantize any weight whose error exceeds scale/2 first.
  bool outlier_rule = true;
  // Zero entries are treated as pruned: never selected, kept at zero.
  bool freeze_zeros = false;
};

struct QuantRowResult {
  Vector row;
  LossLedger ledger;
};

// OBQ on one row to full depth. `state` is consumed.
QuantRowResult obq_quantize_row(const Vector& w, InverseHessianState& state, const QuantGrid& g,
                                bool outlier_rule = true);

// OBQ for a row whose zero entries are frozen: the inverse is formed on the
// nonzero support only. Zeros are absent from the ledger.
QuantRowResult obq_quantize_row_on_support(const Vector& w, const Matrix& hessian, const QuantGrid& g,
                                           bool outlier_rule = true);

struct QuantizeResult {
  Matrix weights;
  std::vector<QuantGrid> grids;
  std::vector<LossLedger> ledgers;

  double accounted_loss() const;
};

// Per-channel grids plus OBQ on every row, each with a fresh inverse state.
QuantizeResult quantize_layer(const Matrix& weights, const Matrix& hessian, int bits, bool symmetric,
                              const QuantizeOptions& opts = {});
QuantizeResult quantize_layer(const LayerProblem& problem, int bits, bool symmetric, const QuantizeOptions& opts = {});

// Least-squares W minimizing ||W X - Y||^2, i.e. W^T = (X X^T + damp I)^-1 X Y^T.
Matrix sequential_reopt(const Matrix& inputs, const Matrix& targets, double damp = 0.0);

}  // namespace obc
