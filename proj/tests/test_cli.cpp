#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "obc/allocator.hpp"
#include "obc/correction.hpp"
#include "obc/json_io.hpp"
#include "obc/quant_solver.hpp"
#include "obc/sparse_solver.hpp"
#include "test_util.hpp"

#ifndef OBC_CLI_PATH
#error "OBC_CLI_PATH must point at the obc executable"
#endif

using namespace obc;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = env + " '" + std::string(OBC_CLI_PATH) + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double report_value(const std::string& out, const std::string& key) {
  const auto pos = out.find(key);
  REQUIRE(pos != std::string::npos);
  return std::stod(out.substr(pos + key.size()));
}

struct Dir {
  fs::path path = test::temp_dir("cli");
  ~Dir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("hessian command") {
  Dir d;
  save_matrix(Matrix::Identity(3, 3), d / "eye.npy");
  auto r = run("hessian --inputs " + d / "eye.npy" + " --out " + d / "h.npy", d.path);
  REQUIRE(r.code == 0);
  CHECK(load_matrix(d / "h.npy") == 2.0 * Matrix::Identity(3, 3));

  std::mt19937_64 rng(71);
  const Matrix x = test::random_matrix(rng, 4, 10);
  save_matrix(x, d / "x.npy");
  r = run("hessian --inputs " + d / "x.npy" + "," + d / "x.npy" + " --out " + d / "h2.npy", d.path);
  REQUIRE(r.code == 0);
  CHECK(test::max_abs(load_matrix(d / "h2.npy") - 2.0 * compute_hessian(x, 0.0)) < 1e-12);

  r = run("hessian --inputs " + d / "x.npy" + " --damp auto --out " + d / "h3.npy", d.path);
  REQUIRE(r.code == 0);
  Matrix ref = compute_hessian(x, 0.0);
  ref.diagonal().array() += auto_damp(ref);
  CHECK(test::max_abs(load_matrix(d / "h3.npy") - ref) < 1e-12);
}

TEST_CASE("exit codes") {
  Dir d;
  CHECK(run("", d.path).code == 1);
  CHECK(run("prune --weights x.npy", d.path).code == 1);
  CHECK(run("hessian --inputs " + d / "missing.npy" + " --out " + d / "h.npy", d.path).code == 3);
  CHECK(run("hessian --inputs " + d / "x.npy" + " --damp nope --out " + d / "h.npy", d.path).code == 3);

  std::mt19937_64 rng(72);
  save_matrix(test::random_matrix(rng, 2, 6), d / "w.npy");
  save_matrix(test::random_matrix(rng, 6, 3), d / "x.npy");  // fewer samples than features
  CHECK(run("hessian --inputs " + d / "x.npy" + " --damp nope --out " + d / "h.npy", d.path).code == 1);
  const auto r = run("prune --weights " + d / "w.npy" + " --inputs " + d / "x.npy" + " --damp 0 --sparsity 0.5 --out " +
                         d / "p",
                     d.path);
  CHECK(r.code == 2);
  CHECK(r.out.find("pivot") != std::string::npos);
  CHECK(run("prune --weights " + d / "w.npy" + " --inputs " + d / "x.npy" + " --sparsity 0.5 --out " + d / "p",
            d.path)
            .code == 0);
  CHECK(run("prune --weights " + d / "w.npy" + " --inputs " + d / "x.npy" + " --mode nm --n 2 --m 4 --out " + d / "p",
            d.path)
            .code == 1);
  CHECK(run("prune --weights " + d / "w.npy" + " --inputs " + d / "x.npy" + " --n 2 --m 4 --out " + d / "p", d.path)
            .code == 1);
}

TEST_CASE("prune command") {
  Dir d;
  std::mt19937_64 rng(73);
  const Matrix w = test::random_matrix(rng, 5, 12);
  const Matrix x = test::random_matrix(rng, 12, 48);
  save_matrix(w, d / "w.npy");
  save_matrix(x, d / "x.npy");
  const std::string base = "prune --weights " + d / "w.npy" + " --inputs " + d / "x.npy";

  auto r = run(base + " --sparsity 0 --out " + d / "zero", d.path);
  REQUIRE(r.code == 0);
  CHECK(load_matrix(d / "zero/weights.npy") == w);

  r = run(base + " --sparsity 0.5 --damp 0 --verify --out " + d / "u", d.path);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("verify          ok") != std::string::npos);
  const auto lib = prune_unstructured(LayerProblem(w, x), SparsityTarget::unstructured(0.5));
  CHECK(load_matrix(d / "u/weights.npy") == lib.weights);
  CHECK(report_value(r.out, "squared error") == doctest::Approx(measure_loss(LayerProblem(w, x), lib.weights)));
  const auto ledgers = ledgers_from_json(read_json(d / "u/ledger.json"));
  REQUIRE(ledgers.size() == 5);
  CHECK(ledgers[2].order == lib.ledgers[2].order);

  // Identical flags give byte-identical artifacts.
  REQUIRE(run(base + " --sparsity 0.5 --damp 0 --out " + d / "u2", d.path).code == 0);
  CHECK(slurp(d / "u/weights.npy") == slurp(d / "u2/weights.npy"));
  REQUIRE(run(base + " --sparsity 0.5 --damp 0 --out " + d / "u3", d.path, "OBC_THREADS=3").code == 0);
  CHECK(slurp(d / "u/weights.npy") == slurp(d / "u3/weights.npy"));
  REQUIRE(run(base + " --sparsity 0.5 --damp 0 --threads 2 --materialize recompute --out " + d / "u4", d.path).code ==
          0);
  CHECK(test::max_abs(load_matrix(d / "u4/weights.npy") - lib.weights) < 1e-7);

  r = run(base + " --mode block --block-size 2 --sparsity 0.5 --damp 0 --verify --out " + d / "b", d.path);
  CHECK(r.code == 0);
  r = run(base + " --mode nm --n 2 --m 4 --verify --out " + d / "nm", d.path);
  CHECK(r.code == 0);
  CHECK(r.out.find("sparsity        0.500000") != std::string::npos);

  Matrix row(1, 4);
  row << 4, 3, 2, 1;
  save_matrix(row, d / "row.npy");
  save_matrix(Matrix::Identity(4, 4), d / "eye.npy");
  r = run("prune --weights " + d / "row.npy" + " --inputs " + d / "eye.npy" + " --mode nm --n 2 --m 4 --out " +
              d / "row",
          d.path);
  REQUIRE(r.code == 0);
  Matrix expected(1, 4);
  expected << 4, 3, 0, 0;
  CHECK(load_matrix(d / "row/weights.npy") == expected);
}

TEST_CASE("quantize command") {
  Dir d;
  std::mt19937_64 rng(74);
  const Matrix w = test::random_matrix(rng, 4, 10);
  const Matrix x = test::random_matrix(rng, 10, 40);
  save_matrix(w, d / "w.npy");
  save_matrix(x, d / "x.npy");
  const std::string base = "quantize --weights " + d / "w.npy" + " --inputs " + d / "x.npy";

  auto r = run(base + " --bits 3 --damp 0 --verify --out " + d / "q", d.path);
  REQUIRE(r.code == 0);
  const auto lib = quantize_layer(LayerProblem(w, x), 3, false);
  CHECK(load_matrix(d / "q/weights.npy") == lib.weights);
  const auto grids = grids_from_json(read_json(d / "q/grids.json"));
  REQUIRE(grids.size() == 4);
  CHECK(grids[1].scale == lib.grids[1].scale);
  CHECK(grids[1].zero_point == lib.grids[1].zero_point);

  r = run(base + " --bits 16 --symmetric --out " + d / "q16", d.path);
  REQUIRE(r.code == 0);
  CHECK(report_value(r.out, "relative error") < 1e-8);

  Matrix on_grid(2, 4);
  on_grid << 0.875, -0.25, 0.5, 0.0, -0.875, 0.125, 0.375, -0.5;
  save_matrix(on_grid, d / "g.npy");
  save_matrix(test::random_matrix(rng, 4, 16), d / "gx.npy");
  r = run("quantize --weights " + d / "g.npy" + " --inputs " + d / "gx.npy" + " --bits 4 --symmetric --out " + d / "gq",
          d.path);
  REQUIRE(r.code == 0);
  CHECK(load_matrix(d / "gq/weights.npy") == on_grid);

  CHECK(run(base + " --symmetric --asymmetric --out " + d / "bad", d.path).code == 1);
}

TEST_CASE("database, allocate and stitch commands") {
  Dir d;
  std::mt19937_64 rng(75);
  for (int l = 0; l < 2; ++l) {
    save_matrix(test::random_matrix(rng, 4, 8), d / ("w" + std::to_string(l) + ".npy"));
    save_matrix(test::random_matrix(rng, 8, 32), d / ("x" + std::to_string(l) + ".npy"));
  }
  const Json cfg = {{"layers",
                     {{{"name", "fc0"}, {"weights", "w0.npy"}, {"inputs", {"x0.npy"}}},
                      {{"name", "fc1"}, {"weights", "w1.npy"}, {"inputs", {"x1.npy"}}}}},
                    {"sparsity_delta", 0.8},
                    {"sparsity_stop", 0.7},
                    {"nm", {{2, 4}}},
                    {"bits", {4, 8}}};
  write_json(cfg, d / "cfg.json");
  auto r = run("database --config " + d / "cfg.json" + " --out " + d / "db", d.path);
  REQUIRE(r.code == 0);
  const auto db = load_database(d / "db/db.json");
  REQUIRE(db.layers.size() == 2);

  r = run("allocate --db " + d / "db/db.json" + " --budget-fraction 0.3 --out " + d / "plan.json", d.path);
  REQUIRE(r.code == 0);
  const auto plan = plan_from_json(read_json(d / "plan.json"));
  REQUIRE(plan.choices.size() == 2);
  CHECK(plan.total_loss > 0.0);

  r = run("stitch --db " + d / "db/db.json" + " --plan " + d / "plan.json" + " --out " + d / "model", d.path);
  REQUIRE(r.code == 0);
  const Json manifest = read_json(d / "model/manifest.json");
  REQUIRE(manifest["layers"].size() == 2);
  CHECK(manifest["layers"][0]["label"] == plan.choices[0].label);

  r = run("allocate --db " + d / "db/db.json" + " --budget-fraction 1.0 --out " + d / "dense.json", d.path);
  REQUIRE(r.code == 0);
  CHECK(plan_from_json(read_json(d / "dense.json")).total_loss == 0.0);
  REQUIRE(run("stitch --db " + d / "db/db.json" + " --plan " + d / "dense.json" + " --out " + d / "dense", d.path)
              .code == 0);
  CHECK(load_matrix(d / "dense/fc1.npy") == load_matrix(d / "w1.npy"));

  const Json costs = {{"fc0", {{"dense", 1.0}}}};
  write_json(costs, d / "costs.json");
  CHECK(run("allocate --db " + d / "db/db.json" + " --costs " + d / "costs.json" + " --budget 1e-9 --out " +
                d / "none.json",
            d.path)
            .code == 1);
  CHECK(run("allocate --db " + d / "db/db.json" + " --out " + d / "none.json", d.path).code == 1);

  AllocationPlan bad = plan;
  bad.choices[0].label = "nope";
  write_json(plan_to_json(bad), d / "bad.json");
  CHECK(run("stitch --db " + d / "db/db.json" + " --plan " + d / "bad.json" + " --out " + d / "bad", d.path).code == 1);
}

TEST_CASE("eval command") {
  Dir d;
  std::mt19937_64 rng(76);
  const Matrix w = test::random_matrix(rng, 3, 5);
  save_matrix(w, d / "w.npy");
  save_matrix(Matrix::Zero(3, 5), d / "z.npy");
  save_matrix(Matrix::Identity(5, 5), d / "eye.npy");
  auto r = run("eval --orig " + d / "w.npy" + " --comp " + d / "w.npy" + " --inputs " + d / "eye.npy", d.path);
  REQUIRE(r.code == 0);
  CHECK(report_value(r.out, "squared error") == 0.0);
  r = run("eval --orig " + d / "w.npy" + " --comp " + d / "z.npy" + " --inputs " + d / "eye.npy", d.path);
  REQUIRE(r.code == 0);
  CHECK(report_value(r.out, "squared error") == doctest::Approx(w.squaredNorm()).epsilon(1e-9));
  CHECK(report_value(r.out, "relative error") == doctest::Approx(1.0));

  const Matrix x = test::random_matrix(rng, 5, 9);
  const Matrix c = test::random_matrix(rng, 3, 5);
  save_matrix(x, d / "x.npy");
  save_matrix(c, d / "c.npy");
  r = run("eval --orig " + d / "w.npy" + " --comp " + d / "c.npy" + " --inputs " + d / "x.npy", d.path);
  REQUIRE(r.code == 0);
  CHECK(report_value(r.out, "squared error") == doctest::Approx(((w - c) * x).squaredNorm()).epsilon(1e-9));
}

TEST_CASE("stats and correct commands") {
  Dir d;
  std::mt19937_64 rng(77);
  const Matrix dense = test::random_matrix(rng, 3, 40, 2.0).array() + 1.0;
  const Matrix comp = test::random_matrix(rng, 3, 40, 0.5).array() - 1.0;
  save_matrix(dense, d / "dense.npy");
  save_matrix(comp, d / "comp.npy");
  REQUIRE(run("stats --outputs " + d / "dense.npy" + " --layer fc --out " + d / "dense.json", d.path).code == 0);
  REQUIRE(run("correct --outputs " + d / "comp.npy" + " --dense-stats " + d / "dense.json" + " --out " + d / "p.npy",
              d.path)
              .code == 0);
  REQUIRE(run("correct --outputs " + d / "comp.npy" + " --dense-stats " + d / "dense.json" +
                  " --textbook-correction --out " + d / "t.npy",
              d.path)
              .code == 0);
  const auto ds = collect_stats(dense), cs = collect_stats(comp);
  CHECK(test::max_abs(load_matrix(d / "p.npy") - apply_correction(comp, ds, cs)) < 1e-12);
  CHECK(test::max_abs(load_matrix(d / "t.npy") - apply_correction(comp, ds, cs, CorrectionForm::textbook)) < 1e-12);
  const auto ts = collect_stats(load_matrix(d / "t.npy"));
  CHECK(test::max_abs(ts.mean - ds.mean) < 1e-9);
}

TEST_CASE("random command is seeded") {
  Dir d;
  REQUIRE(run("random --rows 3 --cols 4 --samples 5 --seed 9 --out " + d / "a", d.path).code == 0);
  REQUIRE(run("random --rows 3 --cols 4 --samples 5 --seed 9 --out " + d / "b", d.path).code == 0);
  CHECK(slurp(d / "a/weights.npy") == slurp(d / "b/weights.npy"));
  CHECK(load_matrix(d / "a/inputs.npy").cols() == 5);
}
