#include "obc/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "obc/error.hpp"

namespace obc::oracle {

namespace {

using Dense = Eigen::MatrixXd;

std::vector<Eigen::Index> survivors(const std::vector<bool>& removed) {
  std::vector<Eigen::Index> s;
  for (std::size_t i = 0; i < removed.size(); ++i)
    if (!removed[i]) s.push_back(static_cast<Eigen::Index>(i));
  return s;
}

Dense restricted_inverse(const Matrix& h, const std::vector<Eigen::Index>& s) {
  const auto k = static_cast<Eigen::Index>(s.size());
  Dense sub(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) sub(a, b) = h(s[a], s[b]);
  Eigen::FullPivLU<Dense> lu(sub);
  if (!lu.isInvertible()) throw NumericalError("oracle: restricted Hessian is singular");
  return lu.inverse();
}

}  // namespace

NaiveStep naive_target_step(const Vector& w, const Matrix& h, const std::vector<bool>& removed,
                            const std::function<double(double)>& target,
                            const std::function<bool(Eigen::Index)>& allowed, double outlier_threshold) {
  const auto s = survivors(removed);
  if (s.empty()) throw InvalidArgument("oracle: no surviving weights");
  const Dense inv = restricted_inverse(h, s);
  const auto k = static_cast<Eigen::Index>(s.size());

  Eigen::Index pick = -1;
  if (std::isfinite(outlier_threshold)) {
    double worst = outlier_threshold;
    for (Eigen::Index a = 0; a < k; ++a) {
      if (!allowed(s[a])) continue;
      const double err = std::abs(target(w(s[a])) - w(s[a]));
      if (err > worst) {
        worst = err;
        pick = a;
      }
    }
  }
  if (pick < 0) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < k; ++a) {
      if (!allowed(s[a])) continue;
      const double diff = target(w(s[a])) - w(s[a]);
      const double score = diff * diff / inv(a, a);
      if (pick < 0 || score < best) {
        best = score;
        pick = a;
      }
    }
  }
  if (pick < 0) throw InvalidArgument("oracle: no admissible candidate");

  NaiveStep out;
  out.index = s[pick];
  out.w = w;
  const double wp = w(out.index);
  const double t = target(wp);
  out.delta = (t - wp) * (t - wp) / inv(pick, pick);
  for (Eigen::Index b = 0; b < k; ++b) out.w(s[b]) -= inv(b, pick) * (wp - t) / inv(pick, pick);
  out.w(out.index) = t;
  return out;
}

NaiveStep naive_obs_step(const Vector& w, const Matrix& h, const std::vector<bool>& removed) {
  return naive_target_step(
      w, h, removed, [](double) { return 0.0; }, [](Eigen::Index) { return true; },
      std::numeric_limits<double>::infinity());
}

NaiveTrace naive_prune_row(const Vector& w, const Matrix& h, Eigen::Index k) {
  NaiveTrace t{{}, {}, w};
  std::vector<bool> removed(static_cast<std::size_t>(w.size()), false);
  for (Eigen::Index i = 0; i < k; ++i) {
    auto step = naive_obs_step(t.w, h, removed);
    removed[static_cast<std::size_t>(step.index)] = true;
    t.order.push_back(step.index);
    t.deltas.push_back(step.delta);
    t.w = std::move(step.w);
  }
  return t;
}

double naive_quantize(double w, const Grid& g) {
  const long long lo = g.symmetric ? -(1LL << (g.bits - 1)) : 0;
  const long long hi = g.symmetric ? (1LL << (g.bits - 1)) - 1 : (1LL << g.bits) - 1;
  // Half away from zero.
  const double x = w / g.scale;
  const double r = x < 0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5);
  long long q = static_cast<long long>(r) + g.zero_point;
  q = std::min(std::max(q, lo), hi);
  return g.scale * static_cast<double>(q - g.zero_point);
}

NaiveTrace naive_quantize_row(const Vector& w, const Matrix& h, const Grid& g, bool outlier_rule) {
  NaiveTrace t{{}, {}, w};
  std::vector<bool> removed(static_cast<std::size_t>(w.size()), false);
  const double threshold = outlier_rule ? g.scale / 2.0 : std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    auto step = naive_target_step(
        t.w, h, removed, [&g](double v) { return naive_quantize(v, g); }, [](Eigen::Index) { return true; },
        threshold);
    removed[static_cast<std::size_t>(step.index)] = true;
    t.order.push_back(step.index);
    t.deltas.push_back(step.delta);
    t.w = std::move(step.w);
  }
  return t;
}

NaiveTrace naive_nm_row(const Vector& w, const Matrix& h, int n, int m) {
  NaiveTrace t{{}, {}, w};
  std::vector<bool> removed(static_cast<std::size_t>(w.size()), false);
  std::vector<int> zeros(static_cast<std::size_t>(w.size() / m), 0);
  const Eigen::Index steps = w.size() / m * (m - n);
  for (Eigen::Index i = 0; i < steps; ++i) {
    auto step = naive_target_step(
        t.w, h, removed, [](double) { return 0.0; },
        [&](Eigen::Index p) { return zeros[static_cast<std::size_t>(p / m)] < m - n; },
        std::numeric_limits<double>::infinity());
    removed[static_cast<std::size_t>(step.index)] = true;
    ++zeros[static_cast<std::size_t>(step.index / m)];
    t.order.push_back(step.index);
    t.deltas.push_back(step.delta);
    t.w = std::move(step.w);
  }
  return t;
}

namespace {

struct BlockStep {
  Eigen::Index block = -1;
  double score = 0.0;
  Vector w;
};

BlockStep naive_block_step(const Vector& w, const Matrix& h, const std::vector<bool>& removed, int c) {
  const auto s = survivors(removed);
  const Dense inv = restricted_inverse(h, s);
  std::vector<Eigen::Index> position(static_cast<std::size_t>(w.size()), -1);
  for (std::size_t a = 0; a < s.size(); ++a) position[static_cast<std::size_t>(s[a])] = static_cast<Eigen::Index>(a);

  BlockStep best;
  Vector best_z;
  for (Eigen::Index b = 0; b < w.size() / c; ++b) {
    bool alive = true;
    for (Eigen::Index j = 0; j < c; ++j) alive = alive && !removed[static_cast<std::size_t>(b * c + j)];
    if (!alive) continue;
    Dense sub(c, c);
    Vector wp(c);
    for (Eigen::Index i = 0; i < c; ++i) {
      wp(i) = w(b * c + i);
      for (Eigen::Index j = 0; j < c; ++j) sub(i, j) = inv(position[b * c + i], position[b * c + j]);
    }
    Vector z = sub.ldlt().solve(wp);
    const double score = wp.dot(z);
    if (best.block < 0 || score < best.score) {
      best.block = b;
      best.score = score;
      best_z = std::move(z);
    }
  }
  if (best.block < 0) throw InvalidArgument("oracle: no block left");
  best.w = w;
  for (std::size_t a = 0; a < s.size(); ++a)
    for (Eigen::Index j = 0; j < c; ++j)
      best.w(s[a]) -= inv(static_cast<Eigen::Index>(a), position[best.block * c + j]) * best_z(j);
  for (Eigen::Index j = 0; j < c; ++j) best.w(best.block * c + j) = 0.0;
  return best;
}

}  // namespace

NaiveTrace naive_block_row(const Vector& w, const Matrix& h, int block_size, Eigen::Index blocks) {
  NaiveTrace t{{}, {}, w};
  std::vector<bool> removed(static_cast<std::size_t>(w.size()), false);
  for (Eigen::Index i = 0; i < blocks; ++i) {
    auto step = naive_block_step(t.w, h, removed, block_size);
    for (Eigen::Index j = 0; j < block_size; ++j) removed[static_cast<std::size_t>(step.block * block_size + j)] = true;
    t.order.push_back(step.block);
    t.deltas.push_back(step.score);
    t.w = std::move(step.w);
  }
  return t;
}

NaiveGlobal naive_global_obs(const Matrix& weights, const Matrix& h, Eigen::Index k) {
  NaiveGlobal g{weights, {}};
  const auto rows = static_cast<std::size_t>(weights.rows());
  std::vector<std::vector<bool>> removed(rows, std::vector<bool>(static_cast<std::size_t>(weights.cols()), false));
  std::vector<Eigen::Index> left(rows, weights.cols());
  for (Eigen::Index step = 0; step < k; ++step) {
    Eigen::Index best_row = -1;
    NaiveStep best;
    for (std::size_t r = 0; r < rows; ++r) {
      if (left[r] == 0) continue;
      auto cand = naive_obs_step(g.weights.row(static_cast<Eigen::Index>(r)).transpose(), h, removed[r]);
      if (best_row < 0 || cand.delta < best.delta) {
        best = std::move(cand);
        best_row = static_cast<Eigen::Index>(r);
      }
    }
    if (best_row < 0) throw InvalidArgument("oracle: more prunes requested than weights");
    g.weights.row(best_row) = best.w.transpose();
    removed[static_cast<std::size_t>(best_row)][static_cast<std::size_t>(best.index)] = true;
    --left[static_cast<std::size_t>(best_row)];
    g.order.emplace_back(best_row, best.index);
  }
  return g;
}

NaiveGlobal naive_global_block(const Matrix& weights, const Matrix& h, int block_size, Eigen::Index k) {
  NaiveGlobal g{weights, {}};
  const auto rows = static_cast<std::size_t>(weights.rows());
  std::vector<std::vector<bool>> removed(rows, std::vector<bool>(static_cast<std::size_t>(weights.cols()), false));
  std::vector<Eigen::Index> left(rows, weights.cols() / block_size);
  for (Eigen::Index step = 0; step < k; ++step) {
    Eigen::Index best_row = -1;
    BlockStep best;
    for (std::size_t r = 0; r < rows; ++r) {
      if (left[r] == 0) continue;
      auto cand = naive_block_step(g.weights.row(static_cast<Eigen::Index>(r)).transpose(), h, removed[r], block_size);
      if (best_row < 0 || cand.score < best.score) {
        best = std::move(cand);
        best_row = static_cast<Eigen::Index>(r);
      }
    }
    if (best_row < 0) throw InvalidArgument("oracle: more blocks requested than available");
    g.weights.row(best_row) = best.w.transpose();
    for (Eigen::Index j = 0; j < block_size; ++j)
      removed[static_cast<std::size_t>(best_row)][static_cast<std::size_t>(best.block * block_size + j)] = true;
    --left[static_cast<std::size_t>(best_row)];
    g.order.emplace_back(best_row, best.block);
  }
  return g;
}

MaskSolution solve_on_mask(const Vector& w, const Matrix& h, const std::vector<Eigen::Index>& mask) {
  const Eigen::Index d = w.size();
  std::vector<bool> pruned(static_cast<std::size_t>(d), false);
  for (auto i : mask) pruned[static_cast<std::size_t>(i)] = true;
  const auto s = survivors(pruned);
  Vector delta = Vector::Zero(d);
  for (auto i : mask) delta(i) = -w(i);
  if (!s.empty() && !mask.empty()) {
    const auto ns = static_cast<Eigen::Index>(s.size());
    const auto nm = static_cast<Eigen::Index>(mask.size());
    Dense hss(ns, ns), hsm(ns, nm);
    Vector dm(nm);
    for (Eigen::Index a = 0; a < ns; ++a) {
      for (Eigen::Index b = 0; b < ns; ++b) hss(a, b) = h(s[a], s[b]);
      for (Eigen::Index b = 0; b < nm; ++b) hsm(a, b) = h(s[a], mask[static_cast<std::size_t>(b)]);
    }
    for (Eigen::Index b = 0; b < nm; ++b) dm(b) = delta(mask[static_cast<std::size_t>(b)]);
    const Vector ds = -hss.ldlt().solve(hsm * dm);
    for (Eigen::Index a = 0; a < ns; ++a) delta(s[a]) = ds(a);
  }
  MaskSolution out;
  out.mask = mask;
  std::sort(out.mask.begin(), out.mask.end());
  out.w = w + delta;
  for (auto i : mask) out.w(i) = 0.0;
  out.loss = delta.dot(h * delta);
  return out;
}

MaskSolution exhaustive_mask(const Vector& w, const Matrix& h, Eigen::Index k) {
  const Eigen::Index d = w.size();
  if (k < 0 || k > d) throw InvalidArgument("oracle: mask size out of range");
  double combos = 1.0;
  for (Eigen::Index i = 0; i < k; ++i) combos = combos * static_cast<double>(d - i) / static_cast<double>(i + 1);
  if (combos > 1e6) throw InvalidArgument("oracle: too many masks to enumerate");

  std::vector<bool> select(static_cast<std::size_t>(d), false);
  std::fill(select.begin(), select.begin() + k, true);
  MaskSolution best;
  best.loss = std::numeric_limits<double>::infinity();
  do {
    std::vector<Eigen::Index> mask;
    for (Eigen::Index i = 0; i < d; ++i)
      if (select[static_cast<std::size_t>(i)]) mask.push_back(i);
    auto cand = solve_on_mask(w, h, mask);
    if (cand.loss < best.loss) best = std::move(cand);
  } while (std::prev_permutation(select.begin(), select.end()));
  return best;
}

AllocationPlan exhaustive_allocate(const CompressionDatabase& db, double budget) {
  db.validate();
  double combos = 1.0;
  for (const auto& l : db.layers) combos *= static_cast<double>(l.levels.size());
  if (combos > 1e6) throw InvalidArgument("oracle: too many allocations to enumerate");

  const std::size_t n = db.layers.size();
  std::vector<std::size_t> idx(n, 0);
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> best_idx;
  for (;;) {
    double cost = 0.0, loss = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      cost += db.layers[l].levels[idx[l]].cost;
      loss += db.layers[l].levels[idx[l]].loss;
    }
    if (cost <= budget * (1.0 + 1e-12) && loss < best_loss) {
      best_loss = loss;
      best_idx = idx;
    }
    std::size_t l = 0;
    while (l < n && ++idx[l] == db.layers[l].levels.size()) idx[l++] = 0;
    if (l == n) break;
  }
  if (best_idx.size() != n || best_loss == std::numeric_limits<double>::infinity())
    throw InvalidArgument("infeasible budget: no level assignment fits");

  AllocationPlan plan;
  for (std::size_t l = 0; l < n; ++l) {
    const auto& lvl = db.layers[l].levels[best_idx[l]];
    plan.choices.push_back({db.layers[l].name, lvl.label, best_idx[l]});
    plan.total_cost += lvl.cost;
    plan.total_loss += lvl.loss;
  }
  return plan;
}

}  // namespace obc::oracle
