#pragma once

#include <numeric>
#include <vector>

#include <Eigen/Core>

namespace obc {

// Per-row record of the greedy elimination: indices (weights or blocks) in
// the order they were removed/quantized, and the OBS score delta L of each
// step, delta L = (target - w_p)^2 / [H^-1]_pp.
//
// With H = 2 X X^T the scores measure (w - w')^T H (w - w'), which is twice
// the squared output error; accounted_loss() converts to ||wX - w'X||^2.
struct LossLedger {
  std::vector<Eigen::Index> order;
  std::vector<double> deltas;

  std::size_t size() const { return order.size(); }

  double delta_sum(std::size_t prefix) const {
    return std::accumulate(deltas.begin(), deltas.begin() + static_cast<std::ptrdiff_t>(prefix), 0.0);
  }
  double delta_sum() const { return delta_sum(deltas.size()); }

  // Squared output error implied by the first `prefix` steps.
  double accounted_loss(std::size_t prefix) const { return 0.5 * delta_sum(prefix); }
  double accounted_loss() const { return 0.5 * delta_sum(); }
};

}  // namespace obc
