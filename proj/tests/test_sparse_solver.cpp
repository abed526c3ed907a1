#include "doctest.h"

#include <algorithm>
#include <functional>

#include <Eigen/LU>

#include "obc/error.hpp"
#include "obc/oracle.hpp"
#include "obc/sparse_solver.hpp"
#include "test_util.hpp"

using namespace obc;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

double output_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) { return ((w - w_hat) * x).squaredNorm(); }

// Least-squares row with zeros on `mask`: w_S = (H_SS)^-1 H_S,: w.
Vector lsq_on_mask(const Vector& w, const Matrix& h, const std::vector<Eigen::Index>& mask) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (std::find(mask.begin(), mask.end(), i) == mask.end()) keep.push_back(i);
  const auto n = static_cast<Eigen::Index>(keep.size());
  Matrix hss(n, n);
  Vector rhs(n);
  for (Eigen::Index a = 0; a < n; ++a) {
    rhs(a) = h.row(keep[a]).dot(w);
    for (Eigen::Index b = 0; b < n; ++b) hss(a, b) = h(keep[a], keep[b]);
  }
  const Vector sol = hss.fullPivLu().solve(rhs);
  Vector out = Vector::Zero(w.size());
  for (Eigen::Index a = 0; a < n; ++a) out(keep[a]) = sol(a);
  return out;
}

}  // namespace

TEST_CASE("prune_row: diagonal Hessian example") {
  InverseHessianState st(invert_spd(2.0 * Matrix::Identity(2, 2)));
  const auto res = prune_row(vec({3, 1}), st, 1, true);
  REQUIRE(res.trace.ledger.size() == 1);
  CHECK(res.trace.ledger.order[0] == 1);
  CHECK(res.trace.ledger.deltas[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(res.row == vec({3, 0}));
  CHECK(res.trace.snapshots[0] == vec({3, 0}));
}

TEST_CASE("prune_row: k = 0 is a no-op") {
  std::mt19937_64 rng(11);
  const Vector w = test::random_vector(rng, 5);
  InverseHessianState st(invert_spd(test::random_spd(rng, 5)));
  const auto res = prune_row(w, st, 0, true);
  CHECK(res.row == w);
  CHECK(res.trace.ledger.size() == 0);
  CHECK(res.trace.snapshots.empty());
  InverseHessianState st2(Matrix::Identity(5, 5));
  CHECK_THROWS_AS(prune_row(w, st2, 6, false), InvalidArgument);
}

TEST_CASE("prune_row matches the naive re-inversion oracle") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const Vector w = test::random_vector(rng, 8);
    const Matrix h = compute_hessian(test::random_matrix(rng, 8, 32), 0.0);
    InverseHessianState st(invert_spd(h));
    const auto fast = prune_row(w, st, 6, true);
    const auto naive = oracle::naive_prune_row(w, h, 6);
    CHECK(fast.trace.ledger.order == naive.order);
    CHECK(test::max_abs(fast.row - naive.w) < 1e-8);
    for (std::size_t i = 0; i < naive.deltas.size(); ++i)
      CHECK(fast.trace.ledger.deltas[i] == doctest::Approx(naive.deltas[i]).epsilon(1e-8));
    // Snapshot i has exact zeros at order[0..i] and nowhere else.
    for (std::size_t i = 0; i < fast.trace.snapshots.size(); ++i) {
      const Vector& snap = fast.trace.snapshots[i];
      for (Eigen::Index j = 0; j < 8; ++j) {
        const bool pruned = std::find(fast.trace.ledger.order.begin(), fast.trace.ledger.order.begin() + i + 1, j) !=
                            fast.trace.ledger.order.begin() + i + 1;
        CHECK((snap(j) == 0.0) == pruned);
      }
    }
  }
}

TEST_CASE("ledger prefix sums account for the true output error") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = test::random_matrix(rng, 10, 40);
    const Matrix h = compute_hessian(x, 0.0);
    const Vector w = test::random_vector(rng, 10);
    InverseHessianState st(invert_spd(h));
    const auto res = prune_row(w, st, 10, true);
    for (std::size_t j = 0; j < res.trace.snapshots.size(); ++j) {
      const double truth = ((w - res.trace.snapshots[j]).transpose() * x).squaredNorm();
      CHECK(res.trace.ledger.accounted_loss(j + 1) == doctest::Approx(truth).epsilon(1e-6));
      CHECK(res.trace.ledger.deltas[j] >= -1e-9);
    }
  }
}

TEST_CASE("select_global_mask") {
  const std::vector<LossLedger> two{{{0, 1}, {1, 5}}, {{0, 1}, {2, 3}}};
  CHECK(select_global_mask(two, 2) == std::vector<Eigen::Index>{1, 1});
  CHECK(select_global_mask(two, 4) == std::vector<Eigen::Index>{2, 2});
  CHECK(select_global_mask(two, 0) == std::vector<Eigen::Index>{0, 0});
  CHECK_THROWS_AS(select_global_mask(two, 5), InvalidArgument);
}

TEST_CASE("select_global_mask equals exhaustive composition search on sorted deltas") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LossLedger> ledgers(3);
    for (auto& l : ledgers) {
      for (int j = 0; j < 4; ++j) {
        l.order.push_back(j);
        l.deltas.push_back(u(rng));
      }
      std::sort(l.deltas.begin(), l.deltas.end());
    }
    const auto counts = select_global_mask(ledgers, 5);
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a <= 4; ++a)
      for (int b = 0; b <= 4; ++b) {
        const int c = 5 - a - b;
        if (c < 0 || c > 4) continue;
        best = std::min(best, ledgers[0].delta_sum(a) + ledgers[1].delta_sum(b) + ledgers[2].delta_sum(c));
      }
    double got = 0.0;
    for (std::size_t r = 0; r < 3; ++r) got += ledgers[r].delta_sum(static_cast<std::size_t>(counts[r]));
    CHECK(counts[0] + counts[1] + counts[2] == 5);
    CHECK(got == doctest::Approx(best).epsilon(1e-14));
  }
}

TEST_CASE("group_obs_reconstruct") {
  const Matrix hinv = 0.5 * Matrix::Identity(2, 2);
  const std::vector<Eigen::Index> second{1};
  CHECK(group_obs_reconstruct(vec({3, 1}), hinv, second) == vec({3, 0}));
  const std::vector<Eigen::Index> both{0, 1};
  CHECK(group_obs_reconstruct(vec({3, 1}), hinv, both) == vec({0, 0}));

  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix h = test::random_spd(rng, 8);
    const Vector w = test::random_vector(rng, 8);
    std::vector<Eigen::Index> mask{static_cast<Eigen::Index>(trial % 8), static_cast<Eigen::Index>((trial + 3) % 8),
                                   static_cast<Eigen::Index>((trial + 5) % 8)};
    const Vector got = group_obs_reconstruct(w, invert_spd(h), mask);
    const Vector ref = lsq_on_mask(w, h, mask);
    CHECK(test::max_abs(got - ref) < 1e-9 * std::max(1.0, test::max_abs(ref)));
    for (auto i : mask) CHECK(got(i) == 0.0);
    // Normal-equation gradient vanishes on the complement.
    const Vector grad = 2.0 * h * (got - w);
    for (Eigen::Index i = 0; i < 8; ++i)
      if (std::find(mask.begin(), mask.end(), i) == mask.end())
        CHECK(std::abs(grad(i)) < 1e-8 * test::max_abs(h) * w.norm());
  }
  CHECK_THROWS_AS(group_obs_reconstruct(vec({3, 1}), hinv, std::vector<Eigen::Index>{}), InvalidArgument);
}

TEST_CASE("prune_unstructured: closed-form examples") {
  std::mt19937_64 rng(16);
  const auto problem = test::random_problem(rng, 3, 5, 20);
  const auto none = prune_unstructured(problem, SparsityTarget::unstructured(0.0));
  CHECK(none.weights == problem.weights());

  Matrix w(2, 2);
  w << 3, 1, 4, 2;
  const auto res = prune_unstructured(LayerProblem(w, Matrix::Identity(2, 2)), SparsityTarget::unstructured(0.5));
  Matrix expected(2, 2);
  expected << 3, 0, 4, 0;
  CHECK(res.weights == expected);
  CHECK(res.counts == std::vector<Eigen::Index>{1, 1});
  CHECK(res.accounted_loss() == doctest::Approx(5.0));

  const auto by_count = prune_unstructured(LayerProblem(w, Matrix::Identity(2, 2)), SparsityTarget::unstructured_count(1));
  CHECK(by_count.weights(0, 1) == 0.0);
  CHECK(by_count.weights(1, 1) == 2.0);
}

TEST_CASE("prune_unstructured matches the naive full-matrix greedy OBS") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto problem = test::random_problem(rng, 6, 12, 48);
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    const auto fast = prune_unstructured(problem, SparsityTarget::unstructured(0.5));
    const auto naive = oracle::naive_global_obs(problem.weights(), h, 36);
    const double e_fast = output_error(problem.weights(), fast.weights, problem.inputs());
    const double e_naive = output_error(problem.weights(), naive.weights, problem.inputs());
    CHECK(e_fast == doctest::Approx(e_naive).epsilon(1e-6));
    CHECK(test::max_abs(fast.weights - naive.weights) < 1e-8);
    CHECK(fast.accounted_loss() == doctest::Approx(e_fast).epsilon(1e-6));
    CHECK((fast.weights.array() == 0.0).count() == 36);
  }
}

TEST_CASE("trace and recompute materialization agree") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    const auto problem = test::random_problem(rng, 5, 10, 40);
    PruneOptions trace_opts;
    PruneOptions recompute_opts;
    recompute_opts.mode = Materialize::recompute;
    const auto a = prune_unstructured(problem, SparsityTarget::unstructured(0.6), trace_opts);
    const auto b = prune_unstructured(problem, SparsityTarget::unstructured(0.6), recompute_opts);
    CHECK(a.mode_used == Materialize::trace);
    CHECK(b.mode_used == Materialize::recompute);
    CHECK(test::max_abs(a.weights - b.weights) < 1e-7);
  }
}

TEST_CASE("snapshot cap falls back to recompute") {
  std::mt19937_64 rng(19);
  const auto problem = test::random_problem(rng, 4, 8, 32);
  PruneOptions opts;
  opts.snapshot_cap_bytes = 16;
  const auto capped = prune_unstructured(problem, SparsityTarget::unstructured(0.5), opts);
  CHECK(capped.mode_used == Materialize::recompute);
  const auto full = prune_unstructured(problem, SparsityTarget::unstructured(0.5));
  CHECK(test::max_abs(capped.weights - full.weights) < 1e-7);
}

TEST_CASE("levels from one trace pass equal separate runs") {
  std::mt19937_64 rng(20);
  const auto problem = test::random_problem(rng, 4, 8, 32);
  const Matrix h = compute_hessian(problem.inputs(), 0.0);
  const std::vector<double> levels{0.25, 0.5, 0.75};
  const auto many = prune_unstructured_levels(problem.weights(), h, levels);
  REQUIRE(many.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto single = prune_unstructured(problem.weights(), h, SparsityTarget::unstructured(levels[i]));
    CHECK(many[i].weights == single.weights);
  }
}

TEST_CASE("sparse-row fast path equals the dense path") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    auto problem = test::random_problem(rng, 4, 10, 40);
    Matrix w = problem.weights();
    for (Eigen::Index r = 0; r < 4; ++r) w(r, (r * 3 + trial) % 10) = 0.0;
    w(0, 9) = 0.0;
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    PruneOptions fast;
    fast.compact_sparse_rows = true;
    const auto a = prune_unstructured(w, h, SparsityTarget::unstructured(0.5), fast);
    const auto b = prune_unstructured(w, h, SparsityTarget::unstructured(0.5));
    CHECK(test::max_abs(a.weights - b.weights) < 1e-8);
  }
}

TEST_CASE("support optimality of the final weights") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const auto problem = test::random_problem(rng, 4, 10, 40);
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    const auto res = prune_unstructured(problem, SparsityTarget::unstructured(0.5));
    for (Eigen::Index r = 0; r < 4; ++r) {
      const Vector w = problem.weights().row(r).transpose();
      const Vector got = res.weights.row(r).transpose();
      const Vector grad = 2.0 * h * (got - w);
      for (Eigen::Index i = 0; i < 10; ++i)
        if (got(i) != 0.0) CHECK(std::abs(grad(i)) < 1e-6 * test::max_abs(h) * w.norm());
    }
  }
}

TEST_CASE("prune_nm closed-form examples") {
  const Matrix h4 = 2.0 * Matrix::Identity(4, 4);
  Matrix w(1, 4);
  w << 4, 3, 2, 1;
  Matrix expected(1, 4);
  expected << 4, 3, 0, 0;
  CHECK(prune_nm(w, h4, 2, 4).weights == expected);

  Matrix w8(1, 8);
  w8 << 1, 1, 1, 1, 9, 9, 9, 9;
  const Matrix out = prune_nm(w8, 2.0 * Matrix::Identity(8, 8), 2, 4).weights;
  for (int b = 0; b < 2; ++b) {
    int nz = 0;
    for (int j = 0; j < 4; ++j) nz += out(0, b * 4 + j) != 0.0;
    CHECK(nz == 2);
  }
  // Each block keeps its own two entries, with the lowest indices pruned first on ties.
  Matrix expected8(1, 8);
  expected8 << 0, 0, 1, 1, 0, 0, 9, 9;
  CHECK(out == expected8);

  CHECK_THROWS_AS(prune_nm(w, h4, 2, 3), InvalidArgument);
  CHECK_THROWS_AS(prune_nm(w, h4, 4, 4), InvalidArgument);
}

TEST_CASE("prune_nm beats per-block magnitude plus reconstruction") {
  std::mt19937_64 rng(23);
  int wins = 0;
  for (int seed = 0; seed < 100; ++seed) {
    const auto problem = LayerProblem(test::random_matrix(rng, 4, 8), test::correlated_inputs(rng, 8, 32));
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    const Matrix h_inv = invert_spd(h);
    const Matrix ours = prune_nm(problem, 2, 4).weights;
    Matrix base = problem.weights();
    for (Eigen::Index r = 0; r < 4; ++r) {
      std::vector<Eigen::Index> mask;
      for (Eigen::Index b = 0; b < 2; ++b) {
        std::vector<Eigen::Index> idx{b * 4, b * 4 + 1, b * 4 + 2, b * 4 + 3};
        std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) {
          return std::abs(problem.weights()(r, i)) < std::abs(problem.weights()(r, j));
        });
        mask.push_back(idx[0]);
        mask.push_back(idx[1]);
      }
      const Vector w = problem.weights().row(r).transpose();
      base.row(r) = group_obs_reconstruct(w, h_inv, mask).transpose();
    }
    for (Eigen::Index r = 0; r < 4; ++r)
      for (Eigen::Index b = 0; b < 2; ++b) {
        int nz = 0;
        for (Eigen::Index j = 0; j < 4; ++j) nz += ours(r, b * 4 + j) != 0.0;
        CHECK(nz == 2);
      }
    const double e_ours = output_error(problem.weights(), ours, problem.inputs());
    const double e_base = output_error(problem.weights(), base, problem.inputs());
    wins += e_ours <= e_base * (1.0 + 1e-12);
  }
  MESSAGE("N:M wins: " << wins << "/100");
  CHECK(wins >= 90);
}

TEST_CASE("prune_nm matches the naive restricted greedy") {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const auto problem = test::random_problem(rng, 3, 8, 32);
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    const auto fast = prune_nm(problem.weights(), h, 2, 4);
    for (Eigen::Index r = 0; r < 3; ++r) {
      const auto naive = oracle::naive_nm_row(problem.weights().row(r).transpose(), h, 2, 4);
      CHECK(fast.ledgers[static_cast<std::size_t>(r)].order == naive.order);
      CHECK(test::max_abs(fast.weights.row(r).transpose() - naive.w) < 1e-8);
    }
  }
}

TEST_CASE("prune_block closed-form examples") {
  Matrix w(1, 4);
  w << 1, 2, 5, 6;
  const Matrix h = 2.0 * Matrix::Identity(4, 4);
  InverseHessianState st(invert_spd(h));
  const auto row = prune_row_blocks(w.row(0).transpose(), st, 2, 1, false);
  CHECK(row.trace.ledger.order[0] == 0);
  CHECK(row.trace.ledger.deltas[0] == doctest::Approx(10.0));
  CHECK(row.row == vec({0, 0, 5, 6}));

  const auto res = prune_block(w, h, 2, 0.5);
  Matrix expected(1, 4);
  expected << 0, 0, 5, 6;
  CHECK(res.weights == expected);
  CHECK_THROWS_AS(prune_block(w, h, 3, 0.5), InvalidArgument);
}

TEST_CASE("block size 1 equals unstructured pruning") {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    const auto problem = test::random_problem(rng, 4, 8, 32);
    const auto a = prune_block(problem, 1, 0.5);
    const auto b = prune_unstructured(problem, SparsityTarget::unstructured(0.5));
    CHECK(test::max_abs(a.weights - b.weights) < 1e-12);
    CHECK(a.counts == b.counts);
  }
}

TEST_CASE("prune_block matches the naive block OBS") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    const auto problem = test::random_problem(rng, 4, 8, 32);
    const Matrix h = compute_hessian(problem.inputs(), 0.0);
    for (auto mode : {Materialize::trace, Materialize::recompute}) {
      PruneOptions opts;
      opts.mode = mode;
      const auto fast = prune_block(problem.weights(), h, 2, 0.5, opts);
      const auto naive = oracle::naive_global_block(problem.weights(), h, 2, 8);
      CHECK(test::max_abs(fast.weights - naive.weights) < 1e-6);
    }
  }
}

TEST_CASE("target validation") {
  CHECK_THROWS_AS(SparsityTarget::unstructured(1.0).check(4), InvalidArgument);
  CHECK_THROWS_AS(SparsityTarget::unstructured(-0.1).check(4), InvalidArgument);
  CHECK_THROWS_AS(SparsityTarget::nm(0, 4).check(4), InvalidArgument);
  CHECK_THROWS_AS(SparsityTarget::block(3, 0.5).check(4), InvalidArgument);
  CHECK_NOTHROW(SparsityTarget::block(2, 0.5).check(4));
  CHECK_THROWS_AS(prune_unstructured(Matrix::Zero(2, 3), Matrix::Identity(2, 2), SparsityTarget::unstructured(0.5)),
                  InvalidArgument);
}
