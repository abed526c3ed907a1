#include <cstdio>

#include "obc/allocator.hpp"
#include "obc/error.hpp"
#include "obc/hessian.hpp"
#include "obc/json_io.hpp"
#include "obc/sparse_solver.hpp"

namespace obc {

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct LevelWriter {
  const std::filesystem::path& out_dir;
  const LayerProblem& problem;
  DatabaseLayer& layer;
  const std::string stem;

  void add(const std::string& label, const Matrix& weights, double cost,
           const std::vector<QuantGrid>* grids = nullptr) {
    std::string file = stem + "." + label;
    for (char& ch : file)
      if (ch == ':' || ch == '+' || ch == '/') ch = '_';
    CompressionLevel lvl;
    lvl.label = label;
    lvl.weights = file + ".npy";
    save_matrix(weights, out_dir / lvl.weights);
    lvl.loss = label == "dense" ? 0.0 : measure_loss(problem, weights);
    lvl.cost = cost;
    if (grids) {
      lvl.grid = file + ".grid.json";
      write_json(grids_to_json(*grids), out_dir / *lvl.grid);
    }
    layer.levels.push_back(std::move(lvl));
  }
};

}  // namespace

CompressionDatabase build_database(const std::vector<LayerSource>& layers, const DatabaseConfig& config,
                                   const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  CompressionDatabase db;
  db.root = out_dir;
  for (const auto& src : layers) {
    if (src.inputs.empty()) throw InvalidArgument("layer '" + src.name + "' has no calibration inputs");
    std::vector<Matrix> batches;
    for (const auto& p : src.inputs) batches.push_back(load_matrix(p));
    const LayerProblem problem(load_matrix(src.weights), batches.front(), src.name);
    Matrix hessian = compute_hessian(batches, 0.0);
    hessian.diagonal().array() += config.damp_auto ? auto_damp(hessian) : config.damp;

    const Eigen::Index d_row = problem.rows();
    const Eigen::Index d_col = problem.cols();
    auto bops = [&](int bits, double sparsity) {
      return bop_cost(d_row, d_col, src.spatial, bits, bits, sparsity);
    };

    DatabaseLayer layer;
    layer.name = src.name;
    std::string stem = src.name;
    for (char& ch : stem)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
    LevelWriter writer{out_dir, problem, layer, stem};

    PruneOptions popts;
    popts.threads = config.threads;
    popts.mode = Materialize::recompute;
    QuantizeOptions qopts;
    qopts.threads = config.threads;

    writer.add("dense", problem.weights(), bops(32, 0.0));

    if (config.sparsity_delta) {
      const auto grid = sparsity_grid(*config.sparsity_delta, config.sparsity_stop);
      const auto results = prune_unstructured_levels(problem.weights(), hessian, grid, popts);
      for (std::size_t i = 0; i < grid.size(); ++i)
        writer.add("unstr" + fixed4(grid[i]), results[i].weights, bops(32, grid[i]));
      if (config.block_size > 0) {
        for (double s : sparsity_grid(*config.sparsity_delta, config.block_stop)) {
          const auto res = prune_block(problem.weights(), hessian, config.block_size, s, popts);
          writer.add("block" + std::to_string(config.block_size) + "_" + fixed4(s), res.weights, bops(32, s));
        }
      }
    }

    std::vector<std::pair<Matrix, double>> nm_weights;
    for (const auto& [n, m] : config.nm) {
      const auto res = prune_nm(problem.weights(), hessian, n, m, popts);
      const double s = 1.0 - static_cast<double>(n) / m;
      writer.add("nm" + std::to_string(n) + ":" + std::to_string(m), res.weights, bops(32, s));
      nm_weights.emplace_back(res.weights, s);
    }

    for (int bits : config.bits) {
      const std::string tag = "w" + std::to_string(bits) + "a" + std::to_string(bits);
      const auto q = quantize_layer(problem.weights(), hessian, bits, config.symmetric, qopts);
      writer.add(tag, q.weights, bops(bits, 0.0), &q.grids);
      for (std::size_t i = 0; i < config.nm.size(); ++i) {
        QuantizeOptions frozen = qopts;
        frozen.freeze_zeros = true;
        const auto qn = quantize_layer(nm_weights[i].first, hessian, bits, config.symmetric, frozen);
        const auto& [n, m] = config.nm[i];
        writer.add("nm" + std::to_string(n) + ":" + std::to_string(m) + "+" + tag, qn.weights,
                   bops(bits, nm_weights[i].second), &qn.grids);
      }
    }

    if (config.activation_bits > 0) {
      const Matrix& x = batches.front();
      const Vector flat = Eigen::Map<const Vector>(x.data(), x.size());
      layer.activation_grid = fit_grid(flat, config.activation_bits, false);
    }
    db.layers.push_back(std::move(layer));
  }
  db.validate();
  save_database(db, out_dir / "db.json");
  return db;
}

}  // namespace obc
