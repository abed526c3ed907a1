#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "json.hpp"

#include "obc/allocator.hpp"
#include "obc/correction.hpp"
#include "obc/ledger.hpp"
#include "obc/quant_solver.hpp"

namespace obc {

using Json = nlohmann::json;

// {"rows": [{"row": i, "order": [...], "deltas": [...], "pruned": k?}]}
Json ledgers_to_json(std::span<const LossLedger> ledgers, std::span<const Eigen::Index> counts = {});
std::vector<LossLedger> ledgers_from_json(const Json& j);

// {"bits": b, "symmetric": s, "rows": {"0": {"scale": .., "zero_point": ..}, ...}}
Json grids_to_json(std::span<const QuantGrid> grids);
std::vector<QuantGrid> grids_from_json(const Json& j);

Json grid_to_json(const QuantGrid& g);
QuantGrid grid_from_json(const Json& j);

// {"layers": [{"name", "levels": [{"label", "weights", "loss", "cost", "grid"?}], "activation_grid"?}]}
Json database_to_json(const CompressionDatabase& db);
CompressionDatabase database_from_json(const Json& j, const std::filesystem::path& root);
CompressionDatabase load_database(const std::filesystem::path& path);
void save_database(const CompressionDatabase& db, const std::filesystem::path& path);

// {"layers": [{"name", "label"}], "total_cost", "total_loss"}
Json plan_to_json(const AllocationPlan& plan);
AllocationPlan plan_from_json(const Json& j);

// {"layer": name, "channels": {"0": {"mean", "std"}, ...}}
Json stats_to_json(const ChannelStats& stats, const std::string& layer);
ChannelStats stats_from_json(const Json& j);

Json read_json(const std::filesystem::path& path);
void write_json(const Json& j, const std::filesystem::path& path);

}  // namespace obc
