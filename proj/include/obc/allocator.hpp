#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "obc/quant_solver.hpp"
#include "obc/tensor_io.hpp"

namespace obc {

struct CompressionLevel {
  std::string label;
  std::filesystem::path weights;  // relative paths resolve against the database root
  double loss = 0.0;
  double cost = 0.0;
  std::optional<std::filesystem::path> grid;
};

struct DatabaseLayer {
  std::string name;
  std::vector<CompressionLevel> levels;
  // Tensor-level activation grid fitted on one calibration batch, if any.
  std::optional<QuantGrid> activation_grid;
};

// Per-layer menu of compression levels. Every layer carries an identity
// (uncompressed, zero-loss) level.
struct CompressionDatabase {
  std::vector<DatabaseLayer> layers;
  std::filesystem::path root;

  // Throws InvalidArgument on empty layers, duplicate labels, negative or
  // non-finite loss/cost, or a layer without a zero-loss level.
  void validate() const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

struct AllocationPlan {
  struct Choice {
    std::string layer;
    std::string label;
    std::size_t level = 0;
  };
  std::vector<Choice> choices;
  double total_cost = 0.0;
  double total_loss = 0.0;
};

// s_i = 1 - delta^i for i = 1, 2, ... while s_i <= stop. delta is the
// fraction of remaining weights each step keeps (0.9 prunes 10% per step).
std::vector<double> sparsity_grid(double delta, double stop);

// ||W X - What X||_F^2.
double measure_loss(const LayerProblem& original, const Matrix& compressed);

// Bit operations of a linear layer: 2 * d_row * d_col * spatial FLOPs times
// weight bits times activation bits times density. Bits must be 4/8/16/32.
double bop_cost(Eigen::Index d_row, Eigen::Index d_col, double spatial, int weight_bits, int activation_bits,
                double sparsity);

// Budget-discretized knapsack: costs are rounded up to multiples of
// budget/resolution and summed losses are minimized exactly for those costs.
AllocationPlan dp_allocate(const CompressionDatabase& db, double budget, int resolution = 10000);

// Copies each chosen level (weights, and grid if present) into out_dir and
// writes out_dir/manifest.json. Returns the written weight files in layer
// order.
std::vector<std::filesystem::path> stitch(const CompressionDatabase& db, const AllocationPlan& plan,
                                          const std::filesystem::path& out_dir);

// Recomputes the plan totals and level indices from labels. Throws on a
// label or layer missing from the database.
AllocationPlan resolve_plan(const CompressionDatabase& db, const AllocationPlan& plan);

// {layer -> {label -> cost}} overrides.
void apply_costs(CompressionDatabase& db, const nlohmann::json& costs);

// --- database generation ---

struct LayerSource {
  std::string name;
  std::filesystem::path weights;
  std::vector<std::filesystem::path> inputs;  // first batch is the loss-measurement batch
  double spatial = 1.0;
};

struct DatabaseConfig {
  std::optional<double> sparsity_delta;  // unstructured grid
  double sparsity_stop = 0.99;
  int block_size = 0;                    // > 0 enables block levels on the same grid
  double block_stop = 0.95;
  std::vector<std::pair<int, int>> nm;   // N:M patterns
  std::vector<int> bits;                 // quantization levels (weights and activations)
  bool symmetric = false;
  int activation_bits = 0;               // > 0 stores a tensor-level activation grid
  double damp = 0.0;
  bool damp_auto = true;
  unsigned threads = 0;
};

// Runs the solvers for every (layer, level), measures calibration losses and
// BOP costs, writes weights/grids under out_dir and out_dir/db.json.
CompressionDatabase build_database(const std::vector<LayerSource>& layers, const DatabaseConfig& config,
                                   const std::filesystem::path& out_dir);

}  // namespace obc
