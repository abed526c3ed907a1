#include "obc/sparse_solver.hpp"

#include <cmath>
#include <limits>
#include <queue>
#include <sstream>

#include <Eigen/Cholesky>

#include "obc/detail/greedy.hpp"
#include "obc/error.hpp"
#include "obc/parallel.hpp"

namespace obc {

SparsityTarget SparsityTarget::unstructured(double sparsity) {
  SparsityTarget t;
  t.kind_ = Kind::unstructured;
  t.sparsity_ = sparsity;
  return t;
}

SparsityTarget SparsityTarget::unstructured_count(Eigen::Index k) {
  SparsityTarget t;
  t.kind_ = Kind::unstructured;
  t.count_ = k;
  return t;
}

SparsityTarget SparsityTarget::nm(int n, int m) {
  SparsityTarget t;
  t.kind_ = Kind::nm;
  t.n_ = n;
  t.m_ = m;
  t.sparsity_ = m > 0 ? 1.0 - static_cast<double>(n) / m : 0.0;
  return t;
}

SparsityTarget SparsityTarget::block(int block_size, double sparsity) {
  SparsityTarget t;
  t.kind_ = Kind::block;
  t.block_ = block_size;
  t.sparsity_ = sparsity;
  return t;
}

void SparsityTarget::check(Eigen::Index d_col) const {
  if (!(sparsity_ >= 0.0 && sparsity_ < 1.0)) throw InvalidArgument("sparsity must lie in [0, 1)");
  if (count_ && *count_ < 0) throw InvalidArgument("pruned count must be nonnegative");
  switch (kind_) {
    case Kind::unstructured:
      break;
    case Kind::nm:
      if (!(n_ > 0 && n_ < m_)) throw InvalidArgument("N:M requires 0 < N < M");
      if (d_col % m_ != 0) throw InvalidArgument("M must divide the number of columns");
      break;
    case Kind::block:
      if (block_ < 1) throw InvalidArgument("block size must be positive");
      if (d_col % block_ != 0) throw InvalidArgument("block size must divide the number of columns");
      break;
  }
}

double PruneResult::accounted_loss() const {
  double total = 0.0;
  for (std::size_t i = 0; i < ledgers.size(); ++i)
    total += ledgers[i].accounted_loss(static_cast<std::size_t>(counts[i]));
  return total;
}

RowResult prune_row(const Vector& w, InverseHessianState& state, Eigen::Index k, bool record_snapshots) {
  if (w.size() != state.dim()) throw InvalidArgument("row length does not match the inverse Hessian");
  if (k < 0 || k > state.active_count()) throw InvalidArgument("cannot prune more weights than are active");
  RowResult out;
  out.row = w;
  out.trace.ledger.order.reserve(static_cast<std::size_t>(k));
  out.trace.ledger.deltas.reserve(static_cast<std::size_t>(k));
  if (record_snapshots) out.trace.snapshots.reserve(static_cast<std::size_t>(k));
  detail::greedy_eliminate(
      out.row, state, k, [](double) { return 0.0; }, [](Eigen::Index) { return true; }, [](Eigen::Index) {},
      std::numeric_limits<double>::infinity(), out.trace.ledger,
      record_snapshots ? &out.trace.snapshots : nullptr);
  return out;
}

RowResult prune_row_compact(const Vector& w, const Matrix& hessian, Eigen::Index k, bool record_snapshots) {
  const Eigen::Index d = w.size();
  if (hessian.rows() != d || hessian.cols() != d) throw InvalidArgument("row length does not match the Hessian");
  if (k < 0 || k > d) throw InvalidArgument("cannot prune more weights than the row holds");
  std::vector<Eigen::Index> support;
  std::vector<Eigen::Index> zeros;
  for (Eigen::Index i = 0; i < d; ++i) (w(i) == 0.0 ? zeros : support).push_back(i);

  RowResult out;
  out.row = w;
  const auto nz = static_cast<Eigen::Index>(zeros.size());
  for (Eigen::Index i = 0; i < std::min(k, nz); ++i) {
    out.trace.ledger.order.push_back(zeros[static_cast<std::size_t>(i)]);
    out.trace.ledger.deltas.push_back(0.0);
    if (record_snapshots) out.trace.snapshots.push_back(w);
  }
  if (k <= nz) return out;

  const auto ns = static_cast<Eigen::Index>(support.size());
  InverseHessianState state(masked_inverse(hessian, support));
  Vector ws(ns);
  for (Eigen::Index a = 0; a < ns; ++a) ws(a) = w(support[static_cast<std::size_t>(a)]);
  RowResult inner = prune_row(ws, state, k - nz, record_snapshots);

  auto expand = [&](const Vector& compact) {
    Vector full = Vector::Zero(d);
    for (Eigen::Index a = 0; a < ns; ++a) full(support[static_cast<std::size_t>(a)]) = compact(a);
    return full;
  };
  for (std::size_t s = 0; s < inner.trace.ledger.size(); ++s) {
    out.trace.ledger.order.push_back(support[static_cast<std::size_t>(inner.trace.ledger.order[s])]);
    out.trace.ledger.deltas.push_back(inner.trace.ledger.deltas[s]);
    if (record_snapshots) out.trace.snapshots.push_back(expand(inner.trace.snapshots[s]));
  }
  out.row = expand(inner.row);
  return out;
}

std::vector<Eigen::Index> select_global_mask(std::span<const LossLedger> ledgers, Eigen::Index k) {
  Eigen::Index total = 0;
  for (const auto& l : ledgers) total += static_cast<Eigen::Index>(l.size());
  if (k < 0 || k > total) throw InvalidArgument("global mask size exceeds the number of recorded steps");

  using Entry = std::pair<double, std::size_t>;  // next delta, row
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  std::vector<Eigen::Index> counts(ledgers.size(), 0);
  for (std::size_t r = 0; r < ledgers.size(); ++r)
    if (ledgers[r].size() > 0) heap.emplace(ledgers[r].deltas[0], r);
  for (Eigen::Index step = 0; step < k; ++step) {
    const auto [delta, r] = heap.top();
    heap.pop();
    const auto next = static_cast<std::size_t>(++counts[r]);
    if (next < ledgers[r].size()) heap.emplace(ledgers[r].deltas[next], r);
  }
  return counts;
}

Vector group_obs_reconstruct(const Vector& w, const Matrix& h_inv, std::span<const Eigen::Index> mask) {
  const Eigen::Index d = w.size();
  if (h_inv.rows() != d || h_inv.cols() != d) throw InvalidArgument("row length does not match the inverse Hessian");
  if (mask.empty()) throw InvalidArgument("group OBS needs a nonempty mask");
  const auto k = static_cast<Eigen::Index>(mask.size());
  Matrix block(k, k);
  Vector wm(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const auto i = mask[static_cast<std::size_t>(a)];
    if (i < 0 || i >= d) throw InvalidArgument("mask index out of range");
    wm(a) = w(i);
    for (Eigen::Index b = 0; b < k; ++b) block(a, b) = h_inv(i, mask[static_cast<std::size_t>(b)]);
  }
  const Eigen::LLT<Matrix> llt(block);
  if (llt.info() != Eigen::Success) throw NumericalError("group OBS: inverse-Hessian block on the mask is singular");
  const Vector z = llt.solve(wm);
  Vector out = w;
  for (Eigen::Index a = 0; a < k; ++a) out -= h_inv.col(mask[static_cast<std::size_t>(a)]) * z(a);
  for (auto i : mask) out(i) = 0.0;
  return out;
}

namespace {

Eigen::Index global_count(const SparsityTarget& target, Eigen::Index total) {
  if (target.count()) {
    if (*target.count() > total) throw InvalidArgument("cannot prune more elements than the layer holds");
    return *target.count();
  }
  return static_cast<Eigen::Index>(std::llround(target.sparsity() * static_cast<double>(total)));
}

bool trace_fits(const PruneOptions& opts, Eigen::Index rows, Eigen::Index steps, Eigen::Index cols) {
  const double bytes = static_cast<double>(rows) * static_cast<double>(steps) * static_cast<double>(cols) * 8.0;
  return bytes <= static_cast<double>(opts.snapshot_cap_bytes);
}

struct Traces {
  std::vector<RowTrace> rows;
  Matrix h_inv;
  bool have_snapshots = false;
};

Traces unstructured_traces(const Matrix& weights, const Matrix& hessian, const PruneOptions& opts, bool want_snapshots) {
  Traces t;
  t.h_inv = invert_spd(hessian);
  const Eigen::Index d_row = weights.rows();
  const Eigen::Index d_col = weights.cols();
  t.have_snapshots = want_snapshots && trace_fits(opts, d_row, d_col, d_col);
  t.rows.resize(static_cast<std::size_t>(d_row));
  parallel_for(static_cast<std::size_t>(d_row), opts.threads, [&](std::size_t r) {
    const Vector w = weights.row(static_cast<Eigen::Index>(r)).transpose();
    RowResult res;
    if (opts.compact_sparse_rows && (w.array() == 0.0).any()) {
      res = prune_row_compact(w, hessian, d_col, t.have_snapshots);
    } else {
      InverseHessianState state(t.h_inv);
      res = prune_row(w, state, d_col, t.have_snapshots);
    }
    t.rows[r] = std::move(res.trace);
  });
  return t;
}

// Zeros on the first counts[r] ledger entries of each row, expanded to
// weight indices via `members`.
template <class Members>
Matrix materialize(const Matrix& weights, const Traces& t, std::span<const Eigen::Index> counts, bool use_trace,
                   unsigned threads, Members&& members) {
  Matrix out = weights;
  parallel_for(static_cast<std::size_t>(weights.rows()), threads, [&](std::size_t r) {
    const auto count = counts[r];
    if (count == 0) return;
    const auto row = static_cast<Eigen::Index>(r);
    if (use_trace) {
      out.row(row) = t.rows[r].snapshots[static_cast<std::size_t>(count - 1)].transpose();
      return;
    }
    std::vector<Eigen::Index> mask;
    for (Eigen::Index s = 0; s < count; ++s) members(t.rows[r].ledger.order[static_cast<std::size_t>(s)], mask);
    const Vector w = weights.row(row).transpose();
    out.row(row) = group_obs_reconstruct(w, t.h_inv, mask).transpose();
  });
  return out;
}

void check_shapes(const Matrix& weights, const Matrix& hessian) {
  if (hessian.rows() != weights.cols() || hessian.cols() != weights.cols())
    throw InvalidArgument("Hessian size does not match the weight columns");
  if (!all_finite(weights)) throw InvalidArgument("weights contain non-finite values");
}

}  // namespace

std::vector<PruneResult> prune_unstructured_levels(const Matrix& weights, const Matrix& hessian,
                                                   std::span<const double> sparsities, const PruneOptions& opts) {
  check_shapes(weights, hessian);
  for (double s : sparsities) SparsityTarget::unstructured(s).check(weights.cols());
  const bool want_trace = opts.mode == Materialize::trace;
  const Traces t = unstructured_traces(weights, hessian, opts, want_trace);
  std::vector<LossLedger> ledgers;
  ledgers.reserve(t.rows.size());
  for (const auto& row : t.rows) ledgers.push_back(row.ledger);

  std::vector<PruneResult> results;
  for (double s : sparsities) {
    PruneResult res;
    res.counts = select_global_mask(ledgers, global_count(SparsityTarget::unstructured(s), weights.size()));
    res.mode_used = t.have_snapshots ? Materialize::trace : Materialize::recompute;
    res.weights = materialize(weights, t, res.counts, t.have_snapshots, opts.threads,
                              [](Eigen::Index i, std::vector<Eigen::Index>& m) { m.push_back(i); });
    res.ledgers = ledgers;
    results.push_back(std::move(res));
  }
  return results;
}

PruneResult prune_unstructured(const Matrix& weights, const Matrix& hessian, const SparsityTarget& target,
                               const PruneOptions& opts) {
  if (target.kind() != SparsityTarget::Kind::unstructured)
    throw InvalidArgument("prune_unstructured needs an unstructured target");
  check_shapes(weights, hessian);
  target.check(weights.cols());
  const bool want_trace = opts.mode == Materialize::trace;
  const Traces t = unstructured_traces(weights, hessian, opts, want_trace);
  PruneResult res;
  res.ledgers.reserve(t.rows.size());
  for (const auto& row : t.rows) res.ledgers.push_back(row.ledger);
  res.counts = select_global_mask(res.ledgers, global_count(target, weights.size()));
  res.mode_used = t.have_snapshots ? Materialize::trace : Materialize::recompute;
  res.weights = materialize(weights, t, res.counts, t.have_snapshots, opts.threads,
                            [](Eigen::Index i, std::vector<Eigen::Index>& m) { m.push_back(i); });
  return res;
}

PruneResult prune_unstructured(const LayerProblem& problem, const SparsityTarget& target, const PruneOptions& opts) {
  return prune_unstructured(problem.weights(), problem_hessian(problem, opts.damp, opts.damp_auto), target, opts);
}

PruneResult prune_nm(const Matrix& weights, const Matrix& hessian, int n, int m, const PruneOptions& opts) {
  check_shapes(weights, hessian);
  SparsityTarget::nm(n, m).check(weights.cols());
  const Eigen::Index d_col = weights.cols();
  const Eigen::Index steps = d_col / m * (m - n);
  const int max_zeros = m - n;
  const Matrix h_inv = invert_spd(hessian);

  PruneResult res;
  res.weights = weights;
  res.ledgers.resize(static_cast<std::size_t>(weights.rows()));
  res.counts.assign(static_cast<std::size_t>(weights.rows()), steps);
  res.mode_used = Materialize::trace;
  parallel_for(static_cast<std::size_t>(weights.rows()), opts.threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    Vector w = weights.row(row).transpose();
    InverseHessianState state(h_inv);
    std::vector<int> zeros(static_cast<std::size_t>(d_col / m), 0);
    detail::greedy_eliminate(
        w, state, steps, [](double) { return 0.0; },
        [&](Eigen::Index p) { return zeros[static_cast<std::size_t>(p / m)] < max_zeros; },
        [&](Eigen::Index p) { ++zeros[static_cast<std::size_t>(p / m)]; }, std::numeric_limits<double>::infinity(),
        res.ledgers[r], nullptr);
    res.weights.row(row) = w.transpose();
  });
  return res;
}

PruneResult prune_nm(const LayerProblem& problem, int n, int m, const PruneOptions& opts) {
  return prune_nm(problem.weights(), problem_hessian(problem, opts.damp, opts.damp_auto), n, m, opts);
}

RowResult prune_row_blocks(const Vector& w, InverseHessianState& state, int block_size, Eigen::Index blocks,
                           bool record_snapshots) {
  const Eigen::Index d = w.size();
  const Eigen::Index c = block_size;
  if (d != state.dim()) throw InvalidArgument("row length does not match the inverse Hessian");
  if (c < 1 || d % c != 0) throw InvalidArgument("block size must divide the row length");
  const Eigen::Index nblocks = d / c;
  std::vector<char> alive(static_cast<std::size_t>(nblocks), 1);
  for (Eigen::Index b = 0; b < nblocks; ++b)
    for (Eigen::Index j = 0; j < c; ++j)
      if (!state.is_active(b * c + j)) alive[static_cast<std::size_t>(b)] = 0;
  const auto available = std::count(alive.begin(), alive.end(), 1);
  if (blocks < 0 || blocks > available) throw InvalidArgument("cannot prune more blocks than are active");

  RowResult out;
  out.row = w;
  Matrix sub(c, c);
  Vector wp(c);
  for (Eigen::Index step = 0; step < blocks; ++step) {
    Eigen::Index best = -1;
    double best_score = std::numeric_limits<double>::infinity();
    Vector best_z;
    for (Eigen::Index b = 0; b < nblocks; ++b) {
      if (!alive[static_cast<std::size_t>(b)]) continue;
      for (Eigen::Index i = 0; i < c; ++i) {
        wp(i) = out.row(b * c + i);
        for (Eigen::Index j = 0; j < c; ++j) sub(i, j) = state(b * c + i, b * c + j);
      }
      const Eigen::LLT<Matrix> llt(sub);
      if (llt.info() != Eigen::Success) {
        std::ostringstream msg;
        msg << "numerical breakdown: inverse-Hessian block " << b << " is not positive definite";
        throw NumericalError(msg.str());
      }
      Vector z = llt.solve(wp);
      const double score = wp.dot(z);
      if (best < 0 || score < best_score) {
        best = b;
        best_score = score;
        best_z = std::move(z);
      }
    }
    for (Eigen::Index j = 0; j < c; ++j) {
      const Eigen::Index col = best * c + j;
      for (Eigen::Index i = 0; i < d; ++i) out.row(i) -= state(i, col) * best_z(j);
    }
    for (Eigen::Index j = 0; j < c; ++j) out.row(best * c + j) = 0.0;
    for (Eigen::Index j = 0; j < c; ++j) state.eliminate(best * c + j);
    alive[static_cast<std::size_t>(best)] = 0;
    out.trace.ledger.order.push_back(best);
    out.trace.ledger.deltas.push_back(best_score);
    if (record_snapshots) out.trace.snapshots.push_back(out.row);
  }
  return out;
}

PruneResult prune_block(const Matrix& weights, const Matrix& hessian, int block_size, double sparsity,
                        const PruneOptions& opts) {
  check_shapes(weights, hessian);
  const auto target = SparsityTarget::block(block_size, sparsity);
  target.check(weights.cols());
  const Eigen::Index c = block_size;
  const Eigen::Index nblocks = weights.cols() / c;

  Traces t;
  t.h_inv = invert_spd(hessian);
  t.have_snapshots = opts.mode == Materialize::trace && trace_fits(opts, weights.rows(), nblocks, weights.cols());
  t.rows.resize(static_cast<std::size_t>(weights.rows()));
  parallel_for(static_cast<std::size_t>(weights.rows()), opts.threads, [&](std::size_t r) {
    InverseHessianState state(t.h_inv);
    const Vector w = weights.row(static_cast<Eigen::Index>(r)).transpose();
    t.rows[r] = prune_row_blocks(w, state, block_size, nblocks, t.have_snapshots).trace;
  });

  PruneResult res;
  for (const auto& row : t.rows) res.ledgers.push_back(row.ledger);
  res.counts = select_global_mask(res.ledgers, global_count(target, weights.rows() * nblocks));
  res.mode_used = t.have_snapshots ? Materialize::trace : Materialize::recompute;
  res.weights = materialize(weights, t, res.counts, t.have_snapshots, opts.threads,
                            [c](Eigen::Index b, std::vector<Eigen::Index>& m) {
                              for (Eigen::Index j = 0; j < c; ++j) m.push_back(b * c + j);
                            });
  return res;
}

PruneResult prune_block(const LayerProblem& problem, int block_size, double sparsity, const PruneOptions& opts) {
  return prune_block(problem.weights(), problem_hessian(problem, opts.damp, opts.damp_auto), block_size, sparsity,
                     opts);
}

}  // namespace obc
