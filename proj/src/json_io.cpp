#include "obc/json_io.hpp"

#include <fstream>

#include "obc/error.hpp"

namespace obc {

namespace {

template <class F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed ") + what + " JSON: " + e.what());
  }
}

}  // namespace

Json ledgers_to_json(std::span<const LossLedger> ledgers, std::span<const Eigen::Index> counts) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < ledgers.size(); ++r) {
    Json row{{"row", r}, {"order", ledgers[r].order}, {"deltas", ledgers[r].deltas}};
    if (r < counts.size()) row["pruned"] = counts[r];
    rows.push_back(std::move(row));
  }
  return Json{{"rows", std::move(rows)}};
}

std::vector<LossLedger> ledgers_from_json(const Json& j) {
  return guarded("ledger", [&] {
    std::vector<LossLedger> out;
    for (const auto& row : j.at("rows")) {
      LossLedger l;
      l.order = row.at("order").get<std::vector<Eigen::Index>>();
      l.deltas = row.at("deltas").get<std::vector<double>>();
      if (l.order.size() != l.deltas.size()) throw FormatError("ledger order and deltas differ in length");
      out.push_back(std::move(l));
    }
    return out;
  });
}

Json grid_to_json(const QuantGrid& g) {
  return Json{{"scale", g.scale}, {"zero_point", g.zero_point}, {"bits", g.bits}, {"symmetric", g.symmetric}};
}

QuantGrid grid_from_json(const Json& j) {
  return guarded("grid", [&] {
    QuantGrid g;
    g.scale = j.at("scale").get<double>();
    g.zero_point = j.at("zero_point").get<long long>();
    g.bits = j.at("bits").get<int>();
    g.symmetric = j.at("symmetric").get<bool>();
    if (!(g.scale > 0.0)) throw FormatError("grid scale must be positive");
    return g;
  });
}

Json grids_to_json(std::span<const QuantGrid> grids) {
  Json rows = Json::object();
  for (std::size_t r = 0; r < grids.size(); ++r)
    rows[std::to_string(r)] = Json{{"scale", grids[r].scale}, {"zero_point", grids[r].zero_point}};
  Json out{{"rows", std::move(rows)}};
  out["bits"] = grids.empty() ? 0 : grids.front().bits;
  out["symmetric"] = !grids.empty() && grids.front().symmetric;
  return out;
}

std::vector<QuantGrid> grids_from_json(const Json& j) {
  return guarded("grid", [&] {
    const int bits = j.at("bits").get<int>();
    const bool symmetric = j.at("symmetric").get<bool>();
    const auto& rows = j.at("rows");
    std::vector<QuantGrid> out(rows.size());
    for (auto it = rows.begin(); it != rows.end(); ++it) {
      const auto r = std::stoul(it.key());
      if (r >= out.size()) throw FormatError("grid row index out of range");
      out[r] = QuantGrid{it->at("scale").get<double>(), it->at("zero_point").get<long long>(), bits, symmetric};
    }
    return out;
  });
}

Json database_to_json(const CompressionDatabase& db) {
  Json layers = Json::array();
  for (const auto& layer : db.layers) {
    Json levels = Json::array();
    for (const auto& lvl : layer.levels) {
      Json l{{"label", lvl.label}, {"weights", lvl.weights.generic_string()}, {"loss", lvl.loss}, {"cost", lvl.cost}};
      if (lvl.grid) l["grid"] = lvl.grid->generic_string();
      levels.push_back(std::move(l));
    }
    Json entry{{"name", layer.name}, {"levels", std::move(levels)}};
    if (layer.activation_grid) entry["activation_grid"] = grid_to_json(*layer.activation_grid);
    layers.push_back(std::move(entry));
  }
  return Json{{"layers", std::move(layers)}};
}

CompressionDatabase database_from_json(const Json& j, const std::filesystem::path& root) {
  return guarded("database", [&] {
    CompressionDatabase db;
    db.root = root;
    for (const auto& entry : j.at("layers")) {
      DatabaseLayer layer;
      layer.name = entry.at("name").get<std::string>();
      for (const auto& l : entry.at("levels")) {
        CompressionLevel lvl;
        lvl.label = l.at("label").get<std::string>();
        lvl.weights = l.at("weights").get<std::string>();
        lvl.loss = l.at("loss").get<double>();
        lvl.cost = l.at("cost").get<double>();
        if (l.contains("grid") && !l.at("grid").is_null()) lvl.grid = l.at("grid").get<std::string>();
        layer.levels.push_back(std::move(lvl));
      }
      if (entry.contains("activation_grid")) layer.activation_grid = grid_from_json(entry.at("activation_grid"));
      db.layers.push_back(std::move(layer));
    }
    db.validate();
    return db;
  });
}

CompressionDatabase load_database(const std::filesystem::path& path) {
  return database_from_json(read_json(path), path.parent_path());
}

void save_database(const CompressionDatabase& db, const std::filesystem::path& path) {
  write_json(database_to_json(db), path);
}

Json plan_to_json(const AllocationPlan& plan) {
  Json layers = Json::array();
  for (const auto& c : plan.choices) layers.push_back(Json{{"name", c.layer}, {"label", c.label}});
  return Json{{"layers", std::move(layers)}, {"total_cost", plan.total_cost}, {"total_loss", plan.total_loss}};
}

AllocationPlan plan_from_json(const Json& j) {
  return guarded("plan", [&] {
    AllocationPlan plan;
    for (const auto& l : j.at("layers"))
      plan.choices.push_back({l.at("name").get<std::string>(), l.at("label").get<std::string>(), 0});
    plan.total_cost = j.value("total_cost", 0.0);
    plan.total_loss = j.value("total_loss", 0.0);
    return plan;
  });
}

Json stats_to_json(const ChannelStats& stats, const std::string& layer) {
  Json channels = Json::object();
  for (Eigen::Index i = 0; i < stats.channels(); ++i)
    channels[std::to_string(i)] = Json{{"mean", stats.mean(i)}, {"std", stats.std(i)}};
  return Json{{"layer", layer}, {"channels", std::move(channels)}};
}

ChannelStats stats_from_json(const Json& j) {
  return guarded("stats", [&] {
    const auto& channels = j.at("channels");
    const auto c = static_cast<Eigen::Index>(channels.size());
    ChannelStats s{Vector(c), Vector(c)};
    for (auto it = channels.begin(); it != channels.end(); ++it) {
      const auto i = static_cast<Eigen::Index>(std::stol(it.key()));
      if (i < 0 || i >= c) throw FormatError("stats channel index out of range");
      s.mean(i) = it->at("mean").get<double>();
      s.std(i) = it->at("std").get<double>();
    }
    return s;
  });
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const Json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace obc
