// obc: command-line front end for the layer-wise compression toolkit.
//
// Exit codes: 0 ok, 1 usage or invalid argument, 2 numerical failure
// (including a failed --verify), 3 file or format error.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "obc/allocator.hpp"
#include "obc/correction.hpp"
#include "obc/error.hpp"
#include "obc/hessian.hpp"
#include "obc/json_io.hpp"
#include "obc/oracle.hpp"
#include "obc/parallel.hpp"
#include "obc/quant_solver.hpp"
#include "obc/sparse_solver.hpp"
#include "obc/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace obc;

namespace {

constexpr Eigen::Index kVerifyMaxCols = 16;

struct Damp {
  std::string text = "auto";
  bool is_auto() const { return text == "auto"; }
  double value() const {
    if (is_auto()) return 0.0;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != text.size() || !(v >= 0.0) || !std::isfinite(v))
      throw InvalidArgument("--damp must be 'auto' or a nonnegative number, got '" + text + "'");
    return v;
  }
};

Matrix load_inputs(const std::vector<std::string>& paths, std::vector<Matrix>* batches = nullptr) {
  std::vector<Matrix> all;
  for (const auto& p : paths) all.push_back(load_matrix(p));
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].rows() != all[0].rows()) throw InvalidArgument("input batches disagree on the feature count");
  if (batches) *batches = all;
  return all.front();
}

Matrix hessian_for(const std::vector<Matrix>& batches, const Damp& damp) {
  Matrix h = compute_hessian(std::span<const Matrix>(batches), damp.value());
  if (damp.is_auto()) h.diagonal().array() += auto_damp(h);
  return h;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void verify_failed(const std::string& what, double diff) {
  std::ostringstream msg;
  msg << "--verify: " << what << " differs from the naive oracle (max abs diff " << diff << ")";
  throw NumericalError(msg.str());
}

bool verify_applicable(bool requested, Eigen::Index d_col) {
  if (!requested) return false;
  if (d_col > kVerifyMaxCols) {
    std::cerr << "note: --verify skipped, the oracle only runs for at most " << kVerifyMaxCols << " columns\n";
    return false;
  }
  return true;
}

void print_loss_report(const LayerProblem& problem, const Matrix& compressed, double accounted) {
  const double loss = measure_loss(problem, compressed);
  const double base = (problem.weights() * problem.inputs()).squaredNorm();
  std::printf("squared error   %.10g\n", loss);
  std::printf("relative error  %.10g\n", base > 0.0 ? loss / base : 0.0);
  std::printf("ledger loss     %.10g\n", accounted);
}

// --- hessian ---

struct HessianArgs {
  std::vector<std::string> inputs;
  Damp damp{"0"};
  std::string out;
};

void run_hessian(const HessianArgs& a) {
  std::vector<Matrix> batches;
  load_inputs(a.inputs, &batches);
  const Matrix h = hessian_for(batches, a.damp);
  save_matrix(h, a.out);
  std::printf("wrote %s (%lld x %lld)\n", a.out.c_str(), static_cast<long long>(h.rows()),
              static_cast<long long>(h.cols()));
}

// --- prune ---

struct PruneArgs {
  std::string weights;
  std::vector<std::string> inputs;
  std::string mode = "unstructured";
  double sparsity = 0.0;
  int n = 0, m = 0, block_size = 0;
  Damp damp;
  std::string materialize = "trace";
  bool compact = false;
  bool verify = false;
  unsigned threads = 0;
  std::string out;
};

void run_prune(const PruneArgs& a, CLI::App& cmd) {
  const bool nm = a.mode == "nm";
  const bool block = a.mode == "block";
  if ((cmd.count("--n") || cmd.count("--m")) && !nm) throw InvalidArgument("--n/--m only apply to --mode nm");
  if (cmd.count("--block-size") && !block) throw InvalidArgument("--block-size only applies to --mode block");
  if (cmd.count("--sparsity") && nm) throw InvalidArgument("--sparsity does not apply to --mode nm");
  if (nm && (!cmd.count("--n") || !cmd.count("--m"))) throw InvalidArgument("--mode nm needs --n and --m");
  if (block && !cmd.count("--block-size")) throw InvalidArgument("--mode block needs --block-size");

  const Matrix w = load_matrix(a.weights);
  std::vector<Matrix> batches;
  load_inputs(a.inputs, &batches);
  const LayerProblem problem(w, batches.front());
  for (const auto& b : batches)
    if (b.rows() != w.cols()) throw InvalidArgument("input feature count does not match the weight columns");
  const Matrix h = hessian_for(batches, a.damp);

  PruneOptions opts;
  opts.threads = a.threads;
  opts.mode = a.materialize == "recompute" ? Materialize::recompute : Materialize::trace;
  opts.compact_sparse_rows = a.compact;

  PruneResult res;
  if (nm) {
    res = prune_nm(w, h, a.n, a.m, opts);
  } else if (block) {
    res = prune_block(w, h, a.block_size, a.sparsity, opts);
  } else {
    res = prune_unstructured(w, h, SparsityTarget::unstructured(a.sparsity), opts);
  }

  if (verify_applicable(a.verify, w.cols())) {
    double diff = 0.0;
    Eigen::Index total = 0;
    for (auto c : res.counts) total += c;
    if (nm) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const auto naive = oracle::naive_nm_row(w.row(r).transpose(), h, a.n, a.m);
        diff = std::max(diff, (naive.w - res.weights.row(r).transpose()).cwiseAbs().maxCoeff());
      }
    } else if (block) {
      diff = (oracle::naive_global_block(w, h, a.block_size, total).weights - res.weights).cwiseAbs().maxCoeff();
    } else {
      diff = (oracle::naive_global_obs(w, h, total).weights - res.weights).cwiseAbs().maxCoeff();
    }
    if (!(diff <= 1e-8 * std::max(1.0, w.cwiseAbs().maxCoeff()))) verify_failed("pruned weights", diff);
    std::printf("verify          ok (max diff %.3g)\n", diff);
  }

  make_dir(a.out);
  save_matrix(res.weights, fs::path(a.out) / "weights.npy");
  write_json(ledgers_to_json(res.ledgers, res.counts), fs::path(a.out) / "ledger.json");
  const Eigen::Index zeros = (res.weights.array() == 0.0).count();
  std::printf("mode            %s\n", a.mode.c_str());
  std::printf("materialized    %s\n", res.mode_used == Materialize::trace ? "trace" : "recompute");
  std::printf("sparsity        %.6f\n", static_cast<double>(zeros) / static_cast<double>(w.size()));
  print_loss_report(problem, res.weights, res.accounted_loss());
}

// --- quantize ---

struct QuantArgs {
  std::string weights;
  std::vector<std::string> inputs;
  int bits = 4;
  bool symmetric = false;
  bool asymmetric = false;
  bool no_outlier_rule = false;
  bool freeze_zeros = false;
  Damp damp;
  bool verify = false;
  unsigned threads = 0;
  std::string out;
};

void run_quantize(const QuantArgs& a) {
  const Matrix w = load_matrix(a.weights);
  std::vector<Matrix> batches;
  load_inputs(a.inputs, &batches);
  const LayerProblem problem(w, batches.front());
  const Matrix h = hessian_for(batches, a.damp);

  QuantizeOptions opts;
  opts.threads = a.threads;
  opts.outlier_rule = !a.no_outlier_rule;
  opts.freeze_zeros = a.freeze_zeros;
  const auto res = quantize_layer(w, h, a.bits, a.symmetric, opts);

  if (verify_applicable(a.verify, w.cols())) {
    if (a.freeze_zeros) throw InvalidArgument("--verify does not support --freeze-zeros");
    double diff = 0.0;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const auto& g = res.grids[static_cast<std::size_t>(r)];
      const auto naive = oracle::naive_quantize_row(w.row(r).transpose(), h, {g.scale, g.zero_point, g.bits, g.symmetric},
                                                    opts.outlier_rule);
      diff = std::max(diff, (naive.w - res.weights.row(r).transpose()).cwiseAbs().maxCoeff());
    }
    if (!(diff <= 1e-8 * std::max(1.0, w.cwiseAbs().maxCoeff()))) verify_failed("quantized weights", diff);
    std::printf("verify          ok (max diff %.3g)\n", diff);
  }

  make_dir(a.out);
  save_matrix(res.weights, fs::path(a.out) / "weights.npy");
  write_json(grids_to_json(res.grids), fs::path(a.out) / "grids.json");
  write_json(ledgers_to_json(res.ledgers), fs::path(a.out) / "ledger.json");
  std::printf("bits            %d (%s)\n", a.bits, a.symmetric ? "symmetric" : "asymmetric");
  print_loss_report(problem, res.weights, res.accounted_loss());
}

// --- database ---

struct DatabaseArgs {
  std::string config;
  unsigned threads = 0;
  std::string out;
};

void run_database(const DatabaseArgs& a) {
  const Json cfg = read_json(a.config);
  const fs::path base = fs::path(a.config).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  try {
    std::vector<LayerSource> layers;
    for (const auto& l : cfg.at("layers")) {
      LayerSource src;
      src.name = l.at("name").get<std::string>();
      src.weights = resolve(l.at("weights").get<std::string>());
      for (const auto& x : l.at("inputs")) src.inputs.push_back(resolve(x.get<std::string>()));
      src.spatial = l.value("spatial", 1.0);
      layers.push_back(std::move(src));
    }
    DatabaseConfig dc;
    if (cfg.contains("sparsity_delta")) dc.sparsity_delta = cfg["sparsity_delta"].get<double>();
    dc.sparsity_stop = cfg.value("sparsity_stop", dc.sparsity_stop);
    dc.block_size = cfg.value("block_size", 0);
    dc.block_stop = cfg.value("block_stop", dc.block_stop);
    for (const auto& p : cfg.value("nm", Json::array())) dc.nm.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    dc.bits = cfg.value("bits", std::vector<int>{});
    dc.symmetric = cfg.value("symmetric", false);
    dc.activation_bits = cfg.value("activation_bits", 0);
    const Json damp = cfg.value("damp", Json("auto"));
    dc.damp_auto = damp.is_string() && damp.get<std::string>() == "auto";
    if (!dc.damp_auto) {
      if (!damp.is_number()) throw FormatError("config 'damp' must be \"auto\" or a number");
      dc.damp = damp.get<double>();
    }
    dc.threads = a.threads;
    const auto db = build_database(layers, dc, a.out);
    std::size_t levels = 0;
    for (const auto& l : db.layers) levels += l.levels.size();
    std::printf("wrote %s (%zu layers, %zu levels)\n", (fs::path(a.out) / "db.json").c_str(), db.layers.size(), levels);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("database config: ") + e.what());
  }
}

// --- allocate / stitch ---

struct AllocateArgs {
  std::string db;
  double budget = 0.0;
  double budget_fraction = 0.0;
  std::string costs;
  int resolution = 10000;
  std::string out;
};

void run_allocate(const AllocateArgs& a, CLI::App& cmd) {
  auto db = load_database(a.db);
  if (!a.costs.empty()) apply_costs(db, read_json(a.costs));
  const bool has_budget = cmd.count("--budget") > 0, has_fraction = cmd.count("--budget-fraction") > 0;
  if (has_budget == has_fraction) throw InvalidArgument("give exactly one of --budget and --budget-fraction");
  double budget = a.budget;
  if (has_fraction) {
    double dense = 0.0;
    for (const auto& l : db.layers) {
      double top = 0.0;
      for (const auto& lvl : l.levels)
        if (lvl.loss == 0.0) top = std::max(top, lvl.cost);
      dense += top;
    }
    budget = a.budget_fraction * dense;
  }
  const auto plan = dp_allocate(db, budget, a.resolution);
  write_json(plan_to_json(plan), a.out);
  for (const auto& c : plan.choices) std::printf("%-24s %s\n", c.layer.c_str(), c.label.c_str());
  std::printf("budget          %.10g\n", budget);
  std::printf("total cost      %.10g\n", plan.total_cost);
  std::printf("total loss      %.10g\n", plan.total_loss);
}

struct StitchArgs {
  std::string db;
  std::string plan;
  std::string out;
};

void run_stitch(const StitchArgs& a) {
  const auto db = load_database(a.db);
  const auto plan = plan_from_json(read_json(a.plan));
  const auto files = stitch(db, plan, a.out);
  for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
}

// --- eval ---

struct EvalArgs {
  std::string orig;
  std::string comp;
  std::string inputs;
};

void run_eval(const EvalArgs& a) {
  const LayerProblem problem(load_matrix(a.orig), load_matrix(a.inputs));
  const Matrix comp = load_matrix(a.comp);
  const double loss = measure_loss(problem, comp);
  const double base = (problem.weights() * problem.inputs()).squaredNorm();
  std::printf("squared error   %.10g\n", loss);
  std::printf("relative error  %.10g\n", base > 0.0 ? loss / base : 0.0);
}

// --- stats / correct ---

struct StatsArgs {
  std::string outputs;
  std::string layer = "layer";
  std::string out;
};

void run_stats(const StatsArgs& a) {
  const auto stats = collect_stats(load_matrix(a.outputs));
  write_json(stats_to_json(stats, a.layer), a.out);
  std::printf("wrote %s (%lld channels)\n", a.out.c_str(), static_cast<long long>(stats.channels()));
}

struct CorrectArgs {
  std::string outputs;
  std::string dense;
  std::string comp;
  bool textbook = false;
  std::string out;
};

void run_correct(const CorrectArgs& a) {
  const Matrix y = load_matrix(a.outputs);
  const auto dense = stats_from_json(read_json(a.dense));
  const auto comp = a.comp.empty() ? collect_stats(y) : stats_from_json(read_json(a.comp));
  const Matrix fixed = apply_correction(y, dense, comp, a.textbook ? CorrectionForm::textbook : CorrectionForm::paper);
  save_matrix(fixed, a.out);
  std::printf("wrote %s (%s form)\n", a.out.c_str(), a.textbook ? "textbook" : "paper");
}

// --- random ---

struct RandomArgs {
  long long rows = 16, cols = 32, samples = 128;
  std::uint64_t seed = 0;
  std::string out;
};

void run_random(const RandomArgs& a) {
  if (a.rows < 1 || a.cols < 1 || a.samples < 1) throw InvalidArgument("shapes must be positive");
  std::mt19937_64 rng(a.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix w(a.rows, a.cols), x(a.cols, a.samples);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
  make_dir(a.out);
  save_matrix(w, fs::path(a.out) / "weights.npy");
  save_matrix(x, fs::path(a.out) / "inputs.npy");
  std::printf("wrote %s and %s\n", (fs::path(a.out) / "weights.npy").c_str(), (fs::path(a.out) / "inputs.npy").c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise optimal brain compression: pruning, quantization and budgeted allocation"};
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  app.add_option("--threads", threads, "Row-parallel workers (default: OBC_THREADS or all cores)");

  HessianArgs hes;
  auto* c_hes = app.add_subcommand("hessian", "Accumulate H = 2 X X^T (+ damp I) over input batches");
  c_hes->add_option("--inputs", hes.inputs, "Input batches (d_col x N .npy), comma separated or repeated")
      ->required()
      ->delimiter(',');
  c_hes->add_option("--damp", hes.damp.text, "Dampening: 'auto' (1% of mean diagonal) or a number")
      ->capture_default_str();
  c_hes->add_option("--out", hes.out, "Output .npy")->required();

  PruneArgs pr;
  auto* c_pr = app.add_subcommand("prune", "ExactOBS pruning of one layer");
  c_pr->add_option("--weights", pr.weights, "Weights (d_row x d_col .npy)")->required();
  c_pr->add_option("--inputs", pr.inputs, "Calibration inputs, comma separated or repeated")->required()->delimiter(',');
  c_pr->add_option("--mode", pr.mode, "unstructured | nm | block")
      ->check(CLI::IsMember({"unstructured", "nm", "block"}))
      ->capture_default_str();
  c_pr->add_option("--sparsity", pr.sparsity, "Target sparsity in [0, 1)");
  c_pr->add_option("--n", pr.n, "N of N:M");
  c_pr->add_option("--m", pr.m, "M of N:M");
  c_pr->add_option("--block-size", pr.block_size, "Block size c");
  c_pr->add_option("--damp", pr.damp.text, "Dampening: 'auto' or a number")->capture_default_str();
  c_pr->add_option("--materialize", pr.materialize, "trace | recompute")
      ->check(CLI::IsMember({"trace", "recompute"}))
      ->capture_default_str();
  c_pr->add_flag("--compact", pr.compact, "Solve already-sparse rows on their nonzero support");
  c_pr->add_flag("--verify", pr.verify, "Check against the naive oracle (at most 16 columns)");
  c_pr->add_option("--out", pr.out, "Output directory")->required();

  QuantArgs qu;
  auto* c_qu = app.add_subcommand("quantize", "OBQ quantization of one layer with per-row grids");
  c_qu->add_option("--weights", qu.weights, "Weights (.npy)")->required();
  c_qu->add_option("--inputs", qu.inputs, "Calibration inputs")->required()->delimiter(',');
  c_qu->add_option("--bits", qu.bits, "Bit width")->capture_default_str();
  auto* sym = c_qu->add_flag("--symmetric", qu.symmetric, "Symmetric grids");
  auto* asym = c_qu->add_flag("--asymmetric", qu.asymmetric, "Asymmetric grids (default)");
  sym->excludes(asym);
  c_qu->add_flag("--no-outlier-rule", qu.no_outlier_rule, "Disable immediate quantization of outliers");
  c_qu->add_flag("--freeze-zeros", qu.freeze_zeros, "Keep zero weights at zero (quantize a pruned layer)");
  c_qu->add_option("--damp", qu.damp.text, "Dampening: 'auto' or a number")->capture_default_str();
  c_qu->add_flag("--verify", qu.verify, "Check against the naive oracle (at most 16 columns)");
  c_qu->add_option("--out", qu.out, "Output directory")->required();

  DatabaseArgs dbs;
  auto* c_db = app.add_subcommand("database", "Build a per-layer compression database from a JSON config");
  c_db->add_option("--config", dbs.config, "Config JSON")->required()->check(CLI::ExistingFile);
  c_db->add_option("--out", dbs.out, "Output directory")->required();

  AllocateArgs al;
  auto* c_al = app.add_subcommand("allocate", "Pick one level per layer under a cost budget");
  c_al->add_option("--db", al.db, "Database JSON")->required();
  c_al->add_option("--budget", al.budget, "Absolute cost budget");
  c_al->add_option("--budget-fraction", al.budget_fraction, "Budget as a fraction of the dense cost");
  c_al->add_option("--costs", al.costs, "Cost overrides {layer: {label: cost}}");
  c_al->add_option("--resolution", al.resolution, "DP buckets")->capture_default_str();
  c_al->add_option("--out", al.out, "Plan JSON")->required();

  StitchArgs st;
  auto* c_st = app.add_subcommand("stitch", "Copy the planned levels into an output directory");
  c_st->add_option("--db", st.db, "Database JSON")->required();
  c_st->add_option("--plan", st.plan, "Plan JSON")->required();
  c_st->add_option("--out", st.out, "Output directory")->required();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Squared output error of compressed weights");
  c_ev->add_option("--orig", ev.orig, "Original weights")->required();
  c_ev->add_option("--comp", ev.comp, "Compressed weights")->required();
  c_ev->add_option("--inputs", ev.inputs, "Inputs")->required();

  StatsArgs sa;
  auto* c_sa = app.add_subcommand("stats", "Per-channel mean/std of layer outputs (channels x samples)");
  c_sa->add_option("--outputs", sa.outputs, "Outputs (.npy)")->required();
  c_sa->add_option("--layer", sa.layer, "Layer name stored in the JSON")->capture_default_str();
  c_sa->add_option("--out", sa.out, "Stats JSON")->required();

  CorrectArgs co;
  auto* c_co = app.add_subcommand("correct", "Mean/variance correction of compressed-layer outputs");
  c_co->add_option("--outputs", co.outputs, "Compressed outputs (.npy)")->required();
  c_co->add_option("--dense-stats", co.dense, "Dense stats JSON")->required();
  c_co->add_option("--comp-stats", co.comp, "Compressed stats JSON (default: measured on --outputs)");
  c_co->add_flag("--textbook-correction", co.textbook, "Use (sd/sc)(x - mc) + md instead of (sd/sc)(x - mc + md)");
  c_co->add_option("--out", co.out, "Output .npy")->required();

  RandomArgs ra;
  auto* c_ra = app.add_subcommand("random", "Write a random Gaussian layer problem");
  c_ra->add_option("--rows", ra.rows)->capture_default_str();
  c_ra->add_option("--cols", ra.cols)->capture_default_str();
  c_ra->add_option("--samples", ra.samples)->capture_default_str();
  c_ra->add_option("--seed", ra.seed)->capture_default_str();
  c_ra->add_option("--out", ra.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  pr.threads = qu.threads = dbs.threads = threads;
  try {
    if (*c_hes) run_hessian(hes);
    if (*c_pr) run_prune(pr, *c_pr);
    if (*c_qu) run_quantize(qu);
    if (*c_db) run_database(dbs);
    if (*c_al) run_allocate(al, *c_al);
    if (*c_st) run_stitch(st);
    if (*c_ev) run_eval(ev);
    if (*c_sa) run_stats(sa);
    if (*c_co) run_correct(co);
    if (*c_ra) run_random(ra);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
