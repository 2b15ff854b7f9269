#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fips/costmodel.hpp"
#include "fips/experiments.hpp"
#include "fips/model.hpp"
#include "fips/optim.hpp"
#include "fips/sharing.hpp"
#include "fips/sparsifiers.hpp"

namespace fs = std::filesystem;
using namespace fips;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitDivergence = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand; a JSON --config fills whatever the
// command line left unset.
struct Common {
  std::string config_path;
  bool force = false;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  Json file = Json::object();
};

template <typename T>
struct is_optional : std::false_type {};
template <typename T>
struct is_optional<std::optional<T>> : std::true_type {};

struct Binder {
  CLI::App* app;
  std::vector<std::function<void(const Json&)>> fills;

  template <typename T>
  CLI::Option* add(const std::string& flag, const std::string& key, T& target, const std::string& help) {
    CLI::Option* opt = app->add_option(flag, target, help)->capture_default_str();
    fills.push_back([opt, key, &target](const Json& cfg) {
      if (opt->count() != 0 || !cfg.contains(key)) return;
      if constexpr (is_optional<T>::value) {
        target = cfg[key].get<typename T::value_type>();
      } else {
        target = cfg[key].get<T>();
      }
    });
    return opt;
  }

  CLI::Option* flag(const std::string& flag, const std::string& key, bool& target, const std::string& help) {
    CLI::Option* opt = app->add_flag(flag, target, help);
    fills.push_back([opt, key, &target](const Json& cfg) {
      if (opt->count() == 0 && cfg.contains(key)) target = cfg[key].get<bool>();
    });
    return opt;
  }

  void apply(const Json& cfg) const {
    for (const auto& f : fills) f(cfg);
  }
};

void add_common(Binder& b, Common& c) {
  b.app->add_option("--config", c.config_path, "JSON configuration file; flags override its values");
  b.flag("--force", "force", c.force, "Overwrite existing output paths");
  b.add("--threads", "threads", c.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  b.add("--seed", "seed", c.seed, "Random seed");
}

void load_config(Binder& b, Common& c) {
  if (c.config_path.empty()) return;
  std::ifstream f(c.config_path);
  if (!f) throw UsageError("cannot read config " + c.config_path);
  try {
    c.file = Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw UsageError("config " + c.config_path + ": " + e.what());
  }
  const auto errors = validate_json(c.file, config_schema());
  if (!errors.empty()) {
    std::string msg = "config " + c.config_path + " is invalid:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw UsageError(msg);
  }
  b.apply(c.file);
}

void require_fresh(const fs::path& path, bool force) {
  if (!path.empty() && fs::exists(path) && !force) {
    throw UsageError("output " + path.string() + " exists (use --force to overwrite)");
  }
}

template <typename Fn>
auto parse_value(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw UsageError(what + ": " + e.what());
  }
}

ToyModel load_toy(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("input model " + path.string() + " does not exist");
  AnyModel any = load_model(path);
  if (!std::holds_alternative<ToyModel>(any)) throw UsageError(path.string() + " holds a compressed model");
  return std::get<ToyModel>(std::move(any));
}

// --- gen-toy ---------------------------------------------------------------

struct GenToyArgs {
  Common common;
  std::size_t d = 32, p = 128, blocks = 4;
  std::string spectrum = "decaying:0.9";
  std::string out;
};

void setup_gen_toy(CLI::App& app, GenToyArgs& a, Binder& b, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("gen-toy", "Generate a synthetic residual MLP stack");
  b.app = cmd;
  add_common(b, a.common);
  a.common.seed = default_seed("gen-toy");
  b.add("--d", "d", a.d, "Model width")->check(CLI::PositiveNumber);
  b.add("--p", "p", a.p, "Hidden width")->check(CLI::PositiveNumber);
  b.add("--blocks", "blocks", a.blocks, "Number of MLP blocks")->check(CLI::PositiveNumber);
  b.add("--spectrum", "spectrum", a.spectrum, "flat | decaying:<gamma> | shared:<k>");
  b.add("--out", "out", a.out, "Output model file");
  cmd->callback([&] {
    run = [&]() -> int {
      load_config(b, a.common);
      if (a.out.empty()) throw UsageError("--out is required");
      const Spectrum spectrum = parse_value("--spectrum", [&] { return parse_spectrum(a.spectrum); });
      require_fresh(a.out, a.common.force);
      const ToyModel model =
          parse_value("gen-toy", [&] { return gen_toy_model(a.common.seed, a.d, a.p, a.blocks, spectrum); });
      save_model(a.out, model);
      std::cout << "wrote " << a.out << " (d=" << a.d << ", p=" << a.p << ", blocks=" << a.blocks
                << ", spectrum=" << to_string(spectrum) << ")\n";
      return kExitOk;
    };
  });
}

// --- compress --------------------------------------------------------------

struct CompressArgs {
  Common common;
  std::string in, out, report;
  double budget = 0.25, density = 0.25, tau = 2.0;
  std::string groups = "auto", sparsifier = "gmp", scope = "local", growth = "hybrid";
  std::size_t steps = 0, epochs = 20, delta_t = 50, calib_batches = 30, finetune_steps = 200;
  std::optional<double> lr;
  std::optional<std::size_t> rank;
  std::string loss = "mlp", optimizer = "adamw", accounting = "paper_formula";
  bool scaling = false, finetune = false;
};

GroupLayout resolve_groups(const std::string& spec, std::size_t n_blocks) {
  if (spec == "auto") {
    if (n_blocks == 12) return group_layout_deit12();
    return parse_group_layout("uniform:4", n_blocks);
  }
  return parse_group_layout(spec, n_blocks);
}

Json compress_config_snapshot(const CompressArgs& a) {
  Json j = {{"in", a.in},
            {"out", a.out},
            {"seed", a.common.seed},
            {"budget", a.budget},
            {"density", a.density},
            {"groups", a.groups},
            {"sparsifier", a.sparsifier},
            {"scope", a.scope},
            {"tau", a.tau},
            {"growth", a.growth},
            {"steps", a.steps},
            {"epochs", a.epochs},
            {"lr", a.lr ? Json(*a.lr) : Json(nullptr)},
            {"loss", a.loss},
            {"optimizer", a.optimizer},
            {"delta_t", a.delta_t},
            {"scaling", a.scaling},
            {"accounting", a.accounting},
            {"calib_batches", a.calib_batches},
            {"rank", a.rank ? Json(*a.rank) : Json(nullptr)},
            {"finetune", a.finetune},
            {"finetune_steps", a.finetune_steps}};
  return j;
}

int run_compress(CompressArgs& a) {
  if (a.in.empty() || a.out.empty()) throw UsageError("--in and --out are required");
  const auto kind = parse_value("--sparsifier", [&] { return parse_sparsifier_kind(a.sparsifier); });
  const auto scope = parse_value("--scope", [&] { return parse_sparsity_scope(a.scope); });
  const auto growth = parse_value("--growth", [&] { return parse_growth_strategy(a.growth); });
  const auto loss = parse_value("--loss", [&] { return parse_loss_mode(a.loss); });
  const auto optimizer = parse_value("--optimizer", [&] { return parse_optimizer_kind(a.optimizer); });
  const auto accounting = parse_value("--accounting", [&] { return parse_rank_accounting(a.accounting); });
  require_fresh(a.out, a.common.force);
  require_fresh(a.report, a.common.force);

  const ToyModel model = load_toy(a.in);
  const GroupLayout layout = parse_value("--groups", [&] { return resolve_groups(a.groups, model.n_blocks()); });

  SparsifierConfig sc;
  sc.kind = kind;
  sc.scope = scope;
  sc.target_density = kind == SparsifierKind::Dense ? 1.0 : a.density;
  sc.delta_t = a.delta_t;
  sc.gmp_initial_sparsity = std::min(sc.gmp_initial_sparsity, sc.final_sparsity());
  parse_value("sparsifier", [&] { sc.validate(); return 0; });

  std::vector<std::size_t> ranks;
  for (auto size : layout.group_sizes) {
    if (a.rank) {
      ranks.push_back(*a.rank);
      continue;
    }
    BudgetSpec spec{a.budget, sc.target_density, model.d(), model.p(), 2 * size};
    parse_value("budget", [&] { spec.validate(); return 0; });
    ranks.push_back(required_rank(spec, accounting));
  }

  SharedInitOptions init;
  init.use_scaling = a.scaling;
  init.growth.strategy = growth;
  init.growth.tau = a.tau;
  init.growth.seed = a.common.seed;
  CompressedModel cm = compress_init(model, layout, ranks, init);
  for (auto& g : cm.groups) g.tau = a.tau;

  const DenseMatrix calib_inputs = make_calibration_inputs(a.common.seed, a.calib_batches, 128, model.d());
  const CalibrationSet calib = collect_calibration(model, calib_inputs, 128);

  TrainPlan plan;
  plan.steps = a.steps;
  plan.epochs = a.epochs;
  plan.learning_rate = a.lr;
  plan.loss_mode = loss;
  plan.optimizer = optimizer;
  plan.threads = a.common.threads;
  const bool local = a.steps > 0 || a.epochs > 0;

  ExperimentReport report;
  report.id = "compress";
  report.config = compress_config_snapshot(a);
  report.config["model"] = {{"d", model.d()}, {"p", model.p()}, {"blocks", model.n_blocks()}};
  report.provenance = make_provenance(a.common.seed);
  report.notes.push_back("loss mode: " + to_string(loss));

  try {
    LocalReport lr;
    if (local) {
      lr = local_error_minimize(cm, model, calib, plan, sc);
    } else {
      lr.init_block_mse = lr.pruned_init_block_mse = lr.final_block_mse = block_activation_mses(cm, calib);
      for (auto* f : cm.all_factors()) lr.final_densities.push_back(f->density());
      for (std::size_t b = 0; b < cm.n_blocks(); ++b) {
        const auto [g, j] = cm.locate(b);
        lr.block_densities.push_back(0.5 * (cm.groups[g].factors[2 * j].density() + cm.groups[g].factors[2 * j + 1].density()));
      }
      report.notes.push_back("local error minimization skipped (steps = epochs = 0)");
    }
    MetricTable& blocks =
        report.add_table("blocks", {"init_mse", "pruned_init_mse", "final_mse", "density"});
    for (std::size_t b = 0; b < cm.n_blocks(); ++b) {
      blocks.add_row("block_" + std::to_string(b),
                     {lr.init_block_mse[b], lr.pruned_init_block_mse[b], lr.final_block_mse[b], lr.block_densities[b]});
    }
    MetricTable& summary = report.add_table("summary", {"value"});
    summary.add_row("steps", {static_cast<double>(lr.steps)});
    summary.add_row("learning_rate", {lr.learning_rate});
    summary.add_row("mean_init_mse", {LocalReport::mean(lr.init_block_mse)});
    summary.add_row("mean_pruned_init_mse", {LocalReport::mean(lr.pruned_init_block_mse)});
    summary.add_row("mean_final_mse", {LocalReport::mean(lr.final_block_mse)});
    summary.add_row("mean_density", {LocalReport::mean(lr.final_densities)});
    summary.add_row("parameter_count", {static_cast<double>(cm.parameter_count())});
    std::size_t original = 0;
    for (const auto& blk : model.blocks) original += blk.w_fc1.size() + blk.w_fc2.size();
    summary.add_row("parameter_fraction", {static_cast<double>(cm.parameter_count()) / static_cast<double>(original)});

    MetricTable& groups = report.add_table("groups", {"blocks", "rank", "u_params", "active_v"});
    for (std::size_t g = 0; g < cm.groups.size(); ++g) {
      std::size_t active = 0;
      for (const auto& f : cm.groups[g].factors) active += f.active_count();
      groups.add_row("group_" + std::to_string(g),
                     {static_cast<double>(layout.group_sizes[g]), static_cast<double>(cm.groups[g].rank()),
                      static_cast<double>(cm.groups[g].u.size()), static_cast<double>(active)});
    }
    if (!lr.loss_trajectory.empty()) {
      MetricTable& traj = report.add_table("trajectory", {"mean_batch_loss"});
      for (std::size_t t = 0; t < lr.loss_trajectory.size(); ++t) {
        traj.add_row(std::to_string(t + 1), {LocalReport::mean(lr.loss_trajectory[t])});
      }
    }
    if (a.finetune) {
      Rng rng = seeded_rng(a.common.seed + 1);
      const DenseMatrix inputs = gaussian_matrix(rng, 1024, model.d(), 1.0);
      const DenseMatrix targets = model.forward(inputs);
      TrainPlan fp;
      fp.steps = a.finetune_steps;
      fp.learning_rate = a.lr.value_or(1e-4);
      fp.optimizer = optimizer;
      fp.threads = a.common.threads;
      SparsifierConfig rigl = sc;
      rigl.kind = kind == SparsifierKind::Dense ? SparsifierKind::Dense : SparsifierKind::RigL;
      const FinetuneReport fr = fp.steps > 0 ? global_finetune(cm, inputs, targets, fp, rigl) : FinetuneReport{};
      MetricTable& ft = report.add_table("finetune", {"value"});
      ft.add_row("initial_loss", {fr.initial_loss});
      ft.add_row("final_loss", {fr.final_loss});
      for (std::size_t w = 0; w < fr.window_means.size(); ++w) ft.add_row("window_" + std::to_string(w), {fr.window_means[w]});
    }
  } catch (const DivergenceError& e) {
    const fs::path dump = a.out + ".last_good";
    save_model(dump, e.last_good());
    std::cerr << "error: " << e.what() << "\nlast good checkpoint (step " << e.step() - 1 << ") written to " << dump
              << "\n";
    return kExitDivergence;
  }

  save_model(a.out, cm);
  std::cout << "wrote " << a.out << "\n";
  for (const auto& row : {"mean_init_mse", "mean_pruned_init_mse", "mean_final_mse", "mean_density", "parameter_fraction"}) {
    const auto& t = report.table("summary");
    for (std::size_t i = 0; i < t.rows.size(); ++i)
      if (t.row_labels[i] == row) std::printf("  %-22s %.6g\n", row, *t.rows[i][0]);
  }
  if (!a.report.empty()) {
    const Json j = report_to_json(report);
    std::ofstream f(a.report, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + a.report);
    f << j.dump(2) << "\n";
    std::cout << "report " << a.report << "\n";
  }
  return kExitOk;
}

void setup_compress(CLI::App& app, CompressArgs& a, Binder& b, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("compress", "Compress a toy model with shared bases and sparse factors");
  b.app = cmd;
  add_common(b, a.common);
  a.common.seed = default_seed("compress");
  b.add("--in", "in", a.in, "Input toy model");
  b.add("--out", "out", a.out, "Output compressed model");
  b.add("--report", "report", a.report, "Output JSON report");
  b.add("--budget", "budget", a.budget, "Parameter budget F");
  b.add("--density", "density", a.density, "Sparse factor density D");
  b.add("--groups", "groups", a.groups, "auto | deit12 | swin:<stages> | uniform:<g> | <size list>");
  b.add("--sparsifier", "sparsifier", a.sparsifier, "dense | static | gmp | rigl");
  b.add("--scope", "scope", a.scope, "local | global");
  b.add("--tau", "tau", a.tau, "Hybrid growth divisor");
  b.add("--growth", "growth", a.growth, "random | splitting | hybrid");
  b.add("--steps", "steps", a.steps, "Local steps (0: epochs x calibration batches)");
  b.add("--epochs", "epochs", a.epochs, "Local epochs when --steps is 0");
  b.add("--lr", "lr", a.lr, "Learning rate (default per sparsifier)");
  b.add("--loss", "loss", a.loss, "eq1 | mlp");
  b.add("--optimizer", "optimizer", a.optimizer, "adamw | sgd");
  b.add("--delta-t", "delta_t", a.delta_t, "Mask update interval")->check(CLI::PositiveNumber);
  b.flag("--scaling", "scaling", a.scaling, "Use per-column scaling vectors");
  b.add("--accounting", "accounting", a.accounting, "paper_formula | exact_count");
  b.add("--calib-batches", "calib_batches", a.calib_batches, "Calibration batches of 128 rows")
      ->check(CLI::PositiveNumber);
  b.add("--rank", "rank", a.rank, "Fixed rank for every group (overrides the budget)");
  b.flag("--finetune", "finetune", a.finetune, "Run global fine-tuning after the local stage");
  b.add("--finetune-steps", "finetune_steps", a.finetune_steps, "Global fine-tuning steps");
  cmd->callback([&] {
    run = [&]() -> int {
      load_config(b, a.common);
      return run_compress(a);
    };
  });
}

// --- experiment ------------------------------------------------------------

const std::vector<std::string> kExperiments = {"sparsity-sweep", "concat", "pairwise", "group-size",
                                               "density-correlation"};

struct ExperimentArgs {
  Common common;
  bool seed_given = false;
  std::string name, in, out;
  std::size_t d = 32, p = 128, blocks = 4, layer = 0, steps = 0, calib_batches = 8;
  std::string spectrum;
  double budget = 0.25, density = 0.25;
  std::vector<double> sparsities;
  std::vector<std::size_t> group_sizes;
  std::optional<std::size_t> rank;
};

int run_experiment(ExperimentArgs& a, CLI::Option* seed_opt) {
  if (std::find(kExperiments.begin(), kExperiments.end(), a.name) == kExperiments.end()) {
    std::string names;
    for (const auto& n : kExperiments) names += (names.empty() ? "" : ", ") + n;
    throw UsageError("unknown experiment '" + a.name + "'; valid names: " + names);
  }
  if (a.out.empty()) throw UsageError("--out is required");
  if (seed_opt->count() == 0 && !a.common.file.contains("seed")) a.common.seed = default_seed(a.name);
  if (a.spectrum.empty()) a.spectrum = a.name == "sparsity-sweep" ? "decaying:0.9" : "shared:8";
  require_fresh(a.out, a.common.force);

  Json model_cfg;
  ToyModel model;
  if (!a.in.empty()) {
    model = load_toy(a.in);
    model_cfg = {{"in", a.in}};
  } else {
    const Spectrum spectrum = parse_value("--spectrum", [&] { return parse_spectrum(a.spectrum); });
    model = parse_value("model", [&] { return gen_toy_model(a.common.seed, a.d, a.p, a.blocks, spectrum); });
    model_cfg = {{"d", a.d}, {"p", a.p}, {"blocks", a.blocks}, {"spectrum", to_string(spectrum)}};
  }
  const std::size_t threads = a.common.threads;

  ExperimentReport report;
  if (a.name == "sparsity-sweep") {
    SweepOptions o;
    o.budget = a.budget;
    if (!a.sparsities.empty()) o.sparsities = a.sparsities;
    o.threads = threads;
    if (a.layer >= 2 * model.n_blocks()) throw UsageError("--layer outside the model's FC layers");
    const auto& blk = model.blocks[a.layer / 2];
    const DenseMatrix layer = a.layer % 2 == 0 ? blk.w_fc1 : transpose(blk.w_fc2);
    report = parse_value("sparsity-sweep", [&] { return exp_factor_sparsity_sweep(layer, o); });
    report.config["layer"] = a.layer;
  } else if (a.name == "concat") {
    ConcatOptions o;
    o.budget = a.budget;
    if (!a.sparsities.empty()) o.sparsities = a.sparsities;
    o.fixed_rank = a.rank;
    o.threads = threads;
    const auto pairs = model.fc_pairs();
    report = parse_value("concat", [&] { return exp_concat_comparison(pairs, o); });
  } else if (a.name == "pairwise") {
    const auto pairs = model.fc_pairs();
    std::vector<LayerStack> stacks;
    for (std::size_t b = 0; b < pairs.size(); ++b) {
      stacks.push_back(LayerStack::from_modules(std::span<const FcPair>(&pairs[b], 1), b));
    }
    const std::size_t rank = a.rank.value_or(std::max<std::size_t>(1, model.d() / 2));
    report = parse_value("pairwise", [&] { return exp_pairwise_heatmap(stacks, rank); });
  } else {
    const CalibrationSet calib =
        collect_calibration(model, make_calibration_inputs(a.common.seed, a.calib_batches, 128, model.d()), 128);
    if (a.name == "group-size") {
      GroupSizeOptions o;
      o.budget = a.budget;
      o.density = a.density;
      if (!a.group_sizes.empty()) {
        o.group_sizes = a.group_sizes;
      } else {
        o.group_sizes.clear();
        for (std::size_t g = 1; g <= model.n_blocks(); ++g) o.group_sizes.push_back(g);
      }
      o.local_steps = a.steps;
      o.threads = threads;
      report = parse_value("group-size", [&] { return exp_group_size(model, calib, o); });
    } else {
      const DensityMseInputs in = parse_value("density-correlation", [&] {
        return density_mse_inputs(model, calib, a.budget, a.density, a.steps == 0 ? 200 : a.steps, threads);
      });
      report = exp_density_mse_correlation(in.densities, in.solo_mse);
      report.config["budget"] = a.budget;
      report.config["density"] = a.density;
      report.config["steps"] = a.steps == 0 ? 200 : a.steps;
    }
    report.config["calib_batches"] = a.calib_batches;
  }
  report.config["model"] = model_cfg;
  report.config["seed"] = a.common.seed;
  report.provenance = make_provenance(a.common.seed);
  for (const auto& path : write_report(report, a.out)) std::cout << "wrote " << path.string() << "\n";
  return kExitOk;
}

void setup_experiment(CLI::App& app, ExperimentArgs& a, Binder& b, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("experiment", "Run an analysis experiment and write JSON and CSV reports");
  b.app = cmd;
  add_common(b, a.common);
  cmd->add_option("name", a.name, "sparsity-sweep | concat | pairwise | group-size | density-correlation")->required();
  b.add("--in", "in", a.in, "Input toy model (default: generate one)");
  b.add("--out", "out", a.out, "Output report directory");
  b.add("--d", "d", a.d, "Generated model width")->check(CLI::PositiveNumber);
  b.add("--p", "p", a.p, "Generated hidden width")->check(CLI::PositiveNumber);
  b.add("--blocks", "blocks", a.blocks, "Generated block count")->check(CLI::PositiveNumber);
  b.add("--spectrum", "spectrum", a.spectrum, "Generated spectrum (default per experiment)");
  b.add("--budget", "budget", a.budget, "Parameter budget F");
  b.add("--density", "density", a.density, "Sparse factor density D");
  b.add("--sparsities", "sparsities", a.sparsities, "Sparsity grid")->delimiter(',');
  b.add("--group-sizes", "group_sizes", a.group_sizes, "Group sizes")->delimiter(',');
  b.add("--rank", "rank", a.rank, "Fixed rank");
  b.add("--layer", "layer", a.layer, "FC layer index for the sparsity sweep");
  b.add("--steps", "steps", a.steps, "Local steps where an experiment trains");
  b.add("--calib-batches", "calib_batches", a.calib_batches, "Calibration batches of 128 rows")
      ->check(CLI::PositiveNumber);
  CLI::Option* seed_opt = cmd->get_option("--seed");
  cmd->callback([&, seed_opt] {
    run = [&, seed_opt]() -> int {
      load_config(b, a.common);
      return run_experiment(a, seed_opt);
    };
  });
}

// --- cost ------------------------------------------------------------------

struct CostArgs {
  Common common;
  double budget = 0.25, density = 0.25, tokens = 197;
  std::size_t d = 768, p = 3072, layers = 1;
  int bits = 16;
};

int run_cost(const CostArgs& a) {
  BudgetSpec spec{a.budget, a.density, a.d, a.p, a.layers, a.bits};
  parse_value("cost", [&] { spec.validate(); return 0; });
  const std::size_t rank = required_rank(spec, RankAccounting::PaperFormula);
  std::optional<std::size_t> exact_rank;
  try {
    exact_rank = required_rank(spec, RankAccounting::ExactCount);
  } catch (const InfeasibleBudget&) {
  }
  const double f_sparse = storage_fraction(a.budget, a.density, a.bits);
  const StorageCount count = exact_count(spec, rank);
  const double n = a.tokens, d = static_cast<double>(a.d), p = static_cast<double>(a.p), r = static_cast<double>(rank);

  std::printf("F=%g D=%g d=%zu p=%zu N=%zu bits=%d\n", a.budget, a.density, a.d, a.p, a.layers, a.bits);
  std::printf("%-34s %zu\n", "required rank (closed form)", rank);
  if (exact_rank) {
    std::printf("%-34s %zu\n", "required rank (exact count)", *exact_rank);
  } else {
    std::printf("%-34s infeasible\n", "required rank (exact count)");
  }
  std::printf("%-34s %.10g\n", "F_sparse (closed form)", f_sparse);
  std::printf("%-34s %.10g\n", "storage fraction (exact count)", count.storage_fraction);
  std::printf("%-34s %.10g\n", "parameter fraction (exact count)", count.param_fraction);
  std::printf("savings: %s\n", f_sparse < 1.0 ? "yes" : "no");
  std::printf("%-34s %.10g (F/D < %d/%d)\n", "breakeven F/D", storage_breakeven_ratio(a.bits), a.bits, a.bits + 1);
  std::printf("%-34s %.10g\n", "MACs dense", dense_macs(n, d, p));
  std::printf("%-34s %.10g\n", "MACs low-rank (U then V)", mac_estimate(MacStrategy::LowRank, n, d, p, r));
  std::printf("%-34s %.10g\n", "MACs full-rank (materialize once)", mac_estimate(MacStrategy::FullRank, n, d, p, r));
  std::printf("%-34s %.10g\n", "low-rank MAC breakeven rank", mac_breakeven_rank(d, p));
  return kExitOk;
}

void setup_cost(CLI::App& app, CostArgs& a, Binder& b, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("cost", "Print rank, storage and MAC estimates for a budget");
  b.app = cmd;
  add_common(b, a.common);
  b.add("--F,--budget", "F", a.budget, "Parameter budget F");
  b.add("--D,--density", "D", a.density, "Sparse factor density D");
  b.add("--d", "d", a.d, "Input width")->check(CLI::PositiveNumber);
  b.add("--p", "p", a.p, "Output width")->check(CLI::PositiveNumber);
  b.add("--layers", "blocks", a.layers, "Layers sharing one basis")->check(CLI::PositiveNumber);
  b.add("--bits", "bits", a.bits, "Bits per stored parameter")->check(CLI::PositiveNumber);
  b.add("--tokens", "tokens", a.tokens, "Tokens per forward pass for MAC estimates");
  cmd->callback([&] {
    run = [&]() -> int {
      load_config(b, a.common);
      return run_cost(a);
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-basis sparse compression of MLP stacks"};
  app.require_subcommand(1);

  GenToyArgs gen;
  CompressArgs comp;
  ExperimentArgs exp;
  CostArgs cost;
  Binder bg{nullptr, {}}, bc{nullptr, {}}, be{nullptr, {}}, bk{nullptr, {}};
  std::function<int()> run;
  setup_gen_toy(app, gen, bg, run);
  setup_compress(app, comp, bc, run);
  setup_experiment(app, exp, be, run);
  setup_cost(app, cost, bk, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    return run ? run() : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Json::exception& e) {
    std::cerr << "usage error: config value: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InfeasibleBudget& e) {
    std::cerr << "error: " << e.what()
              << "\n  rank = F*N*d*p / (D*(d + N*p)); raise F or D, or lower the group size\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
