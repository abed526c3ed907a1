#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "obc/hessian.hpp"
#include "obc/ledger.hpp"
#include "obc/tensor_io.hpp"

namespace obc {

// Ledger plus, optionally, the full row after every step (the "pruning
// trace"). snapshots[i] has exact zeros at ledger.order[0..i].
struct RowTrace {
  LossLedger ledger;
  std::vector<Vector> snapshots;
};

struct RowResult {
  RowTrace trace;
  Vector row;
};

class SparsityTarget {
 public:
  enum class Kind { unstructured, nm, block };

  static SparsityTarget unstructured(double sparsity);
  static SparsityTarget unstructured_count(Eigen::Index k);
  static SparsityTarget nm(int n, int m);
  static SparsityTarget block(int block_size, double sparsity);

  Kind kind() const { return kind_; }
  double sparsity() const { return sparsity_; }
  std::optional<Eigen::Index> count() const { return count_; }
  int n() const { return n_; }
  int m() const { return m_; }
  int block_size() const { return block_; }

  // Validates against a layer with d_col columns.
  void check(Eigen::Index d_col) const;

 private:
  Kind kind_ = Kind::unstructured;
  double sparsity_ = 0.0;
  std::optional<Eigen::Index> count_;
  int n_ = 0;
  int m_ = 0;
  int block_ = 1;
};

// How final weights are produced once the global mask is known: reload the
// stored per-step rows (trace, more memory) or solve the group OBS update on
// the chosen mask (recompute, less memory).
enum class Materialize { trace, recompute };

struct PruneOptions {
  double damp = 0.0;
  bool damp_auto = false;
  Materialize mode = Materialize::trace;
  unsigned threads = 0;
  // Trace mode needs d_row * steps * d_col doubles; above this it falls back
  // to recompute.
  std::size_t snapshot_cap_bytes = std::size_t{1} << 30;
  // Rows that already contain zeros are solved on their nonzero support.
  bool compact_sparse_rows = false;
};

struct PruneResult {
  Matrix weights;
  std::vector<LossLedger> ledgers;
  // Pruned elements (weights, or blocks in block mode) per row.
  std::vector<Eigen::Index> counts;
  Materialize mode_used = Materialize::trace;

  double accounted_loss() const;
};

// Exact greedy OBS on one row: k steps of argmin w_p^2/[H^-1]_pp, weight
// update and inverse elimination. `state` is consumed.
RowResult prune_row(const Vector& w, InverseHessianState& state, Eigen::Index k, bool record_snapshots);

// Same result as prune_row on a fresh state, but existing zeros are
// removed up front by inverting H on the nonzero support only. The zeros
// appear first in the ledger (ascending index, delta 0).
RowResult prune_row_compact(const Vector& w, const Matrix& hessian, Eigen::Index k, bool record_snapshots);

// Global OBS mask from per-row ledgers: k times, take the row whose next
// delta is smallest (ties: lowest row). Returns the count per row.
std::vector<Eigen::Index> select_global_mask(std::span<const LossLedger> ledgers, Eigen::Index k);

// w - H^-1_{:,M} ((H^-1)_M)^-1 w_M with w_M forced to exactly 0: the
// least-squares optimal row subject to zeros on M.
Vector group_obs_reconstruct(const Vector& w, const Matrix& h_inv, std::span<const Eigen::Index> mask);

// Unstructured ExactOBS: full-depth per-row traces, global mask selection,
// materialization by `opts.mode`.
PruneResult prune_unstructured(const Matrix& weights, const Matrix& hessian, const SparsityTarget& target,
                               const PruneOptions& opts = {});
PruneResult prune_unstructured(const LayerProblem& problem, const SparsityTarget& target,
                               const PruneOptions& opts = {});

// One trace pass, many sparsity levels (database generation).
std::vector<PruneResult> prune_unstructured_levels(const Matrix& weights, const Matrix& hessian,
                                                   std::span<const double> sparsities, const PruneOptions& opts = {});

// N:M: per row, greedy restricted to blocks with fewer than M-N zeros,
// stopping at sparsity 1 - N/M. No global step.
PruneResult prune_nm(const Matrix& weights, const Matrix& hessian, int n, int m, const PruneOptions& opts = {});
PruneResult prune_nm(const LayerProblem& problem, int n, int m, const PruneOptions& opts = {});

// Block OBS over aligned contiguous blocks of size c with global selection
// over block ledgers. Ledgers index blocks, not weights.
PruneResult prune_block(const Matrix& weights, const Matrix& hessian, int block_size, double sparsity,
                        const PruneOptions& opts = {});
PruneResult prune_block(const LayerProblem& problem, int block_size, double sparsity, const PruneOptions& opts = {});

// Per-row block OBS to the given number of blocks.
RowResult prune_row_blocks(const Vector& w, InverseHessianState& state, int block_size, Eigen::Index blocks,
                           bool record_snapshots);

}  // namespace obc
