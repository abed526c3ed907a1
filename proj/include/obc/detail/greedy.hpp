#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "obc/error.hpp"
#include "obc/hessian.hpp"
#include "obc/ledger.hpp"

namespace obc::detail {

// One-weight-at-a-time OBS loop shared by pruning (target 0) and OBQ
// (target quant(w_p)). Each step:
//   - if any allowed active weight is further than `outlier_threshold` from
//     its target, take the one with the largest such error;
//   - otherwise take argmin (target - w_p)^2 / [H^-1]_pp;
//   - w <- w - H^-1_{:,p} (w_p - target) / [H^-1]_pp, w_p <- target;
//   - eliminate p from the inverse.
// Ties go to the lowest index. `allowed(p)` filters candidates and
// `on_select(p)` is called after each choice.
template <class TargetFn, class AllowFn, class SelectFn>
void greedy_eliminate(Vector& w, InverseHessianState& state, Eigen::Index steps, TargetFn&& target,
                      AllowFn&& allowed, SelectFn&& on_select, double outlier_threshold,
                      LossLedger& ledger, std::vector<Vector>* snapshots) {
  const Eigen::Index d = w.size();
  const bool check_outliers = std::isfinite(outlier_threshold);
  std::vector<double> targets(static_cast<std::size_t>(d));
  for (Eigen::Index step = 0; step < steps; ++step) {
    Eigen::Index best = -1;
    double best_score = std::numeric_limits<double>::infinity();

    for (Eigen::Index p = 0; p < d; ++p)
      if (state.is_active(p) && allowed(p)) targets[static_cast<std::size_t>(p)] = target(w(p));

    if (check_outliers) {
      double worst = outlier_threshold;
      for (Eigen::Index p = 0; p < d; ++p) {
        if (!state.is_active(p) || !allowed(p)) continue;
        const double err = std::abs(targets[static_cast<std::size_t>(p)] - w(p));
        if (err > worst) {
          worst = err;
          best = p;
        }
      }
    }
    if (best < 0) {
      for (Eigen::Index p = 0; p < d; ++p) {
        if (!state.is_active(p) || !allowed(p)) continue;
        const double diff = targets[static_cast<std::size_t>(p)] - w(p);
        const double score = diff * diff / state(p, p);
        if (score < best_score || best < 0) {
          best_score = score;
          best = p;
        }
      }
    }
    if (best < 0) throw InvalidArgument("greedy step has no admissible candidate");

    const double t = targets[static_cast<std::size_t>(best)];
    const double pivot = state(best, best);
    const double diff = t - w(best);
    const double delta = diff * diff / pivot;
    const double factor = (w(best) - t) / pivot;
    for (Eigen::Index i = 0; i < d; ++i) w(i) -= state(i, best) * factor;
    w(best) = t;
    state.eliminate(best);

    ledger.order.push_back(best);
    ledger.deltas.push_back(delta);
    if (snapshots) snapshots->push_back(w);
    on_select(best);
  }
}

}  // namespace obc::detail
