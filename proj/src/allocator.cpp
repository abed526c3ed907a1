#include "obc/allocator.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "obc/error.hpp"
#include "obc/json_io.hpp"

namespace obc {

void CompressionDatabase::validate() const {
  for (const auto& layer : layers) {
    if (layer.levels.empty()) throw InvalidArgument("layer '" + layer.name + "' has no compression levels");
    std::set<std::string> labels;
    bool identity = false;
    for (const auto& lvl : layer.levels) {
      if (!labels.insert(lvl.label).second)
        throw InvalidArgument("layer '" + layer.name + "' repeats level label '" + lvl.label + "'");
      if (!std::isfinite(lvl.loss) || !std::isfinite(lvl.cost) || lvl.loss < 0.0 || lvl.cost < 0.0)
        throw InvalidArgument("layer '" + layer.name + "' level '" + lvl.label +
                              "' needs finite nonnegative loss and cost");
      identity = identity || lvl.loss == 0.0;
    }
    if (!identity) throw InvalidArgument("layer '" + layer.name + "' has no identity (zero-loss) level");
  }
}

std::filesystem::path CompressionDatabase::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : root / p;
}

std::vector<double> sparsity_grid(double delta, double stop) {
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidArgument("sparsity grid step must lie in (0, 1)");
  if (!(stop > 0.0 && stop < 1.0)) throw InvalidArgument("sparsity grid stop must lie in (0, 1)");
  std::vector<double> out;
  double keep = delta;
  for (;;) {
    const double s = 1.0 - keep;
    if (s > stop) break;
    out.push_back(s);
    keep *= delta;
  }
  return out;
}

double measure_loss(const LayerProblem& original, const Matrix& compressed) {
  if (compressed.rows() != original.rows() || compressed.cols() != original.cols())
    throw InvalidArgument("compressed weights do not match the layer shape");
  const Matrix diff = original.weights() - compressed;
  return (diff * original.inputs()).squaredNorm();
}

double bop_cost(Eigen::Index d_row, Eigen::Index d_col, double spatial, int weight_bits, int activation_bits,
                double sparsity) {
  auto valid = [](int b) { return b == 4 || b == 8 || b == 16 || b == 32; };
  if (!valid(weight_bits) || !valid(activation_bits)) throw InvalidArgument("BOP bit widths must be 4, 8, 16 or 32");
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw InvalidArgument("sparsity must lie in [0, 1)");
  if (!(spatial > 0.0)) throw InvalidArgument("spatial multiplier must be positive");
  const double flops = 2.0 * static_cast<double>(d_row) * static_cast<double>(d_col) * spatial;
  return flops * weight_bits * activation_bits * (1.0 - sparsity);
}

AllocationPlan dp_allocate(const CompressionDatabase& db, double budget, int resolution) {
  db.validate();
  if (resolution < 100) throw InvalidArgument("DP resolution must be at least 100");
  if (!(budget > 0.0) || !std::isfinite(budget)) throw InvalidArgument("budget must be positive and finite");
  const double width = budget / resolution;
  const std::size_t buckets = static_cast<std::size_t>(resolution) + 1;
  const std::size_t n = db.layers.size();
  constexpr double kInf = std::numeric_limits<double>::infinity();

  auto discretize = [&](double cost) -> long long {
    // Relative slack so costs that are exact bucket multiples are not bumped
    // up by division round-off.
    return static_cast<long long>(std::ceil(cost / width * (1.0 - 1e-12)));
  };

  // best[l][b]: minimal loss of layers [0, l) using at most b buckets.
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(buckets, kInf));
  std::vector<std::vector<int>> pick(n, std::vector<int>(buckets, -1));
  std::fill(best[0].begin(), best[0].end(), 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    const auto& levels = db.layers[l].levels;
    std::vector<long long> cost(levels.size());
    for (std::size_t j = 0; j < levels.size(); ++j) cost[j] = discretize(levels[j].cost);
    for (std::size_t b = 0; b < buckets; ++b) {
      for (std::size_t j = 0; j < levels.size(); ++j) {
        if (cost[j] > static_cast<long long>(b)) continue;
        const double prev = best[l][b - static_cast<std::size_t>(cost[j])];
        if (prev == kInf) continue;
        const double cand = prev + levels[j].loss;
        if (cand < best[l + 1][b]) {
          best[l + 1][b] = cand;
          pick[l][b] = static_cast<int>(j);
        }
      }
    }
  }
  if (best[n][buckets - 1] == kInf) {
    std::ostringstream msg;
    msg << "infeasible budget " << budget << ": no level assignment fits";
    throw InvalidArgument(msg.str());
  }

  AllocationPlan plan;
  plan.choices.resize(n);
  std::size_t b = buckets - 1;
  for (std::size_t l = n; l-- > 0;) {
    const int j = pick[l][b];
    const auto& lvl = db.layers[l].levels[static_cast<std::size_t>(j)];
    plan.choices[l] = {db.layers[l].name, lvl.label, static_cast<std::size_t>(j)};
    plan.total_cost += lvl.cost;
    plan.total_loss += lvl.loss;
    b -= static_cast<std::size_t>(discretize(lvl.cost));
  }
  return plan;
}

AllocationPlan resolve_plan(const CompressionDatabase& db, const AllocationPlan& plan) {
  AllocationPlan out;
  for (const auto& choice : plan.choices) {
    const DatabaseLayer* layer = nullptr;
    for (const auto& l : db.layers)
      if (l.name == choice.layer) layer = &l;
    if (!layer) throw InvalidArgument("plan references unknown layer '" + choice.layer + "'");
    bool found = false;
    for (std::size_t j = 0; j < layer->levels.size(); ++j) {
      if (layer->levels[j].label != choice.label) continue;
      out.choices.push_back({choice.layer, choice.label, j});
      out.total_cost += layer->levels[j].cost;
      out.total_loss += layer->levels[j].loss;
      found = true;
      break;
    }
    if (!found)
      throw InvalidArgument("plan references unknown level '" + choice.label + "' of layer '" + choice.layer + "'");
  }
  return out;
}

namespace {

std::string file_stem(const std::string& name) {
  std::string out = name;
  for (char& ch : out)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return out;
}

void copy_level_file(const std::filesystem::path& from, const std::filesystem::path& to) {
  if (!std::filesystem::exists(from)) throw IoError("missing database file " + from.string());
  std::error_code ec;
  std::filesystem::copy_file(from, to, std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw IoError("cannot copy " + from.string() + " to " + to.string() + ": " + ec.message());
}

}  // namespace

std::vector<std::filesystem::path> stitch(const CompressionDatabase& db, const AllocationPlan& plan,
                                          const std::filesystem::path& out_dir) {
  const AllocationPlan resolved = resolve_plan(db, plan);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  Json layers = Json::array();
  for (const auto& choice : resolved.choices) {
    const DatabaseLayer* layer = nullptr;
    for (const auto& l : db.layers)
      if (l.name == choice.layer) layer = &l;
    const auto& lvl = layer->levels[choice.level];
    const std::string stem = file_stem(layer->name);
    const std::filesystem::path weights = out_dir / (stem + ".npy");
    copy_level_file(db.resolve(lvl.weights), weights);
    written.push_back(weights);
    Json entry{{"name", layer->name}, {"label", lvl.label}, {"weights", weights.filename().string()}};
    if (lvl.grid) {
      const std::filesystem::path grid = out_dir / (stem + ".grid.json");
      copy_level_file(db.resolve(*lvl.grid), grid);
      entry["grid"] = grid.filename().string();
    }
    if (layer->activation_grid) entry["activation_grid"] = grid_to_json(*layer->activation_grid);
    layers.push_back(std::move(entry));
  }
  write_json(Json{{"layers", std::move(layers)},
                  {"total_cost", resolved.total_cost},
                  {"total_loss", resolved.total_loss}},
             out_dir / "manifest.json");
  return written;
}

void apply_costs(CompressionDatabase& db, const Json& costs) {
  if (!costs.is_object()) throw FormatError("costs JSON must map layer -> {label -> cost}");
  for (auto it = costs.begin(); it != costs.end(); ++it) {
    DatabaseLayer* layer = nullptr;
    for (auto& l : db.layers)
      if (l.name == it.key()) layer = &l;
    if (!layer) throw InvalidArgument("costs reference unknown layer '" + it.key() + "'");
    for (auto lv = it->begin(); lv != it->end(); ++lv) {
      bool found = false;
      for (auto& lvl : layer->levels) {
        if (lvl.label != lv.key()) continue;
        if (!lv->is_number()) throw FormatError("cost for '" + lv.key() + "' is not a number");
        lvl.cost = lv->get<double>();
        found = true;
      }
      if (!found) throw InvalidArgument("costs reference unknown level '" + lv.key() + "' of layer '" + it.key() + "'");
    }
  }
  db.validate();
}

}  // namespace obc
