#include "obc/quant_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "obc/detail/greedy.hpp"
#include "obc/error.hpp"
#include "obc/parallel.hpp"

namespace obc {

long long QuantGrid::qmin() const { return symmetric ? -(1LL << (bits - 1)) : 0; }

long long QuantGrid::qmax() const { return symmetric ? (1LL << (bits - 1)) - 1 : (1LL << bits) - 1; }

bool QuantGrid::contains(double v) const {
  const double q = std::round(v / scale) + static_cast<double>(zero_point);
  if (q < static_cast<double>(qmin()) || q > static_cast<double>(qmax())) return false;
  const auto qi = static_cast<long long>(q);
  return scale * static_cast<double>(qi - zero_point) == v;
}

double quantize_value(double w, const QuantGrid& g) {
  double q = std::round(w / g.scale) + static_cast<double>(g.zero_point);
  q = std::clamp(q, static_cast<double>(g.qmin()), static_cast<double>(g.qmax()));
  return g.scale * static_cast<double>(static_cast<long long>(q) - g.zero_point);
}

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 32) throw InvalidArgument("bit width must lie in [2, 32]");
}

double grid_error(const Vector& w, const QuantGrid& g) {
  double err = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double e = quantize_value(w(i), g) - w(i);
    err += e * e;
  }
  return err;
}

}  // namespace

QuantGrid fit_grid(const Vector& w, int bits, bool symmetric) {
  check_bits(bits);
  QuantGrid best{1.0, 0, bits, symmetric};
  if (w.size() == 0 || (w.array() == 0.0).all()) return best;

  constexpr int kCandidates = 128;
  double best_err = std::numeric_limits<double>::infinity();
  const double lo = std::min(w.minCoeff(), 0.0);
  const double hi = std::max(w.maxCoeff(), 0.0);
  const double absmax = w.cwiseAbs().maxCoeff();
  for (int i = 0; i < kCandidates; ++i) {
    const double r = 0.5 + 0.5 * static_cast<double>(i) / (kCandidates - 1);
    QuantGrid g{1.0, 0, bits, symmetric};
    if (symmetric) {
      g.scale = r * absmax / static_cast<double>(g.qmax());
    } else {
      g.scale = r * (hi - lo) / static_cast<double>(g.qmax());
      g.zero_point = std::clamp(static_cast<long long>(std::llround(-r * lo / g.scale)), g.qmin(), g.qmax());
    }
    const double err = grid_error(w, g);
    if (err <= best_err) {
      best_err = err;
      best = g;
    }
  }
  return best;
}

QuantRowResult obq_quantize_row(const Vector& w, InverseHessianState& state, const QuantGrid& g, bool outlier_rule) {
  if (w.size() != state.dim()) throw InvalidArgument("row length does not match the inverse Hessian");
  QuantRowResult out;
  out.row = w;
  const double threshold = outlier_rule ? g.scale / 2.0 : std::numeric_limits<double>::infinity();
  detail::greedy_eliminate(
      out.row, state, state.active_count(), [&g](double v) { return quantize_value(v, g); },
      [](Eigen::Index) { return true; }, [](Eigen::Index) {}, threshold, out.ledger, nullptr);
  return out;
}

QuantRowResult obq_quantize_row_on_support(const Vector& w, const Matrix& hessian, const QuantGrid& g,
                                           bool outlier_rule) {
  std::vector<Eigen::Index> support;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (w(i) != 0.0) support.push_back(i);
  QuantRowResult out;
  out.row = w;
  if (support.empty()) return out;
  const auto ns = static_cast<Eigen::Index>(support.size());
  InverseHessianState state(masked_inverse(hessian, support));
  Vector ws(ns);
  for (Eigen::Index a = 0; a < ns; ++a) ws(a) = w(support[static_cast<std::size_t>(a)]);
  QuantRowResult inner = obq_quantize_row(ws, state, g, outlier_rule);
  for (Eigen::Index a = 0; a < ns; ++a) out.row(support[static_cast<std::size_t>(a)]) = inner.row(a);
  for (std::size_t s = 0; s < inner.ledger.size(); ++s) {
    out.ledger.order.push_back(support[static_cast<std::size_t>(inner.ledger.order[s])]);
    out.ledger.deltas.push_back(inner.ledger.deltas[s]);
  }
  return out;
}

double QuantizeResult::accounted_loss() const {
  double total = 0.0;
  for (const auto& l : ledgers) total += l.accounted_loss();
  return total;
}

QuantizeResult quantize_layer(const Matrix& weights, const Matrix& hessian, int bits, bool symmetric,
                              const QuantizeOptions& opts) {
  check_bits(bits);
  if (hessian.rows() != weights.cols() || hessian.cols() != weights.cols())
    throw InvalidArgument("Hessian size does not match the weight columns");
  const auto d_row = static_cast<std::size_t>(weights.rows());
  QuantizeResult res;
  res.weights = weights;
  res.grids.resize(d_row);
  res.ledgers.resize(d_row);
  const bool any_zero = opts.freeze_zeros && (weights.array() == 0.0).any();
  Matrix h_inv;
  if (!any_zero) h_inv = invert_spd(hessian);
  parallel_for(d_row, opts.threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    const Vector w = weights.row(row).transpose();
    res.grids[r] = fit_grid(w, bits, symmetric);
    QuantRowResult q;
    if (opts.freeze_zeros) {
      q = obq_quantize_row_on_support(w, hessian, res.grids[r], opts.outlier_rule);
    } else {
      InverseHessianState state(h_inv);
      q = obq_quantize_row(w, state, res.grids[r], opts.outlier_rule);
    }
    res.weights.row(row) = q.row.transpose();
    res.ledgers[r] = std::move(q.ledger);
  });
  return res;
}

QuantizeResult quantize_layer(const LayerProblem& problem, int bits, bool symmetric, const QuantizeOptions& opts) {
  return quantize_layer(problem.weights(), problem_hessian(problem, opts.damp, opts.damp_auto), bits, symmetric,
                        opts);
}

Matrix sequential_reopt(const Matrix& inputs, const Matrix& targets, double damp) {
  if (inputs.cols() != targets.cols()) throw InvalidArgument("inputs and targets disagree on the sample count");
  Matrix gram = Matrix::Zero(inputs.rows(), inputs.rows());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(inputs);
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  gram.diagonal().array() += damp;
  const Matrix gram_inv = invert_spd(gram);
  return targets * inputs.transpose() * gram_inv;
}

}  // namespace obc
