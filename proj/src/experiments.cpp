#include "fips/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fips/parallel.hpp"
#include "fips/schemas.hpp"
#include "fips/sparsifiers.hpp"

#ifndef FIPS_GIT_DESCRIBE
#define FIPS_GIT_DESCRIBE "unknown"
#endif

namespace fips {

void MetricTable::add_row(std::string label, std::vector<std::optional<double>> values) {
  if (values.size() != columns.size()) {
    throw std::invalid_argument("table '" + name + "': row has " + std::to_string(values.size()) + " values, expected " +
                                std::to_string(columns.size()));
  }
  row_labels.push_back(std::move(label));
  rows.push_back(std::move(values));
}

std::size_t MetricTable::column_index(const std::string& column) const {
  const auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw std::out_of_range("table '" + name + "' has no column '" + column + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

std::optional<double> MetricTable::at(std::size_t row, const std::string& column) const {
  return rows.at(row).at(column_index(column));
}

const MetricTable& ExperimentReport::table(const std::string& name) const {
  for (const auto& t : tables)
    if (t.name == name) return t;
  throw std::out_of_range("report '" + id + "' has no table '" + name + "'");
}

MetricTable& ExperimentReport::add_table(std::string name, std::vector<std::string> columns) {
  tables.push_back({std::move(name), std::move(columns), {}, {}});
  return tables.back();
}

bool ExperimentReport::all_finite() const {
  for (const auto& t : tables)
    for (const auto& row : t.rows)
      for (const auto& v : row)
        if (v && !std::isfinite(*v)) return false;
  return true;
}

std::string git_describe() { return FIPS_GIT_DESCRIBE; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Provenance make_provenance(std::uint64_t seed) { return {seed, git_describe(), utc_timestamp()}; }

Json report_to_json(const ExperimentReport& report) {
  if (!report.all_finite()) throw std::invalid_argument("report '" + report.id + "' holds a non-finite metric");
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  j["id"] = report.id;
  j["config"] = report.config;
  j["provenance"] = {{"seed", report.provenance.seed},
                     {"git_describe", report.provenance.git_describe},
                     {"timestamp", report.provenance.timestamp}};
  Json tables = Json::array();
  for (const auto& t : report.tables) {
    Json rows = Json::array();
    for (const auto& row : t.rows) {
      Json r = Json::array();
      for (const auto& v : row) r.push_back(v ? Json(*v) : Json(nullptr));
      rows.push_back(std::move(r));
    }
    tables.push_back({{"name", t.name}, {"columns", t.columns}, {"row_labels", t.row_labels}, {"rows", rows}});
  }
  j["tables"] = std::move(tables);
  j["notes"] = report.notes;
  return j;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string table_to_csv(const MetricTable& table) {
  std::string out = "row";
  for (const auto& c : table.columns) out += "," + csv_field(c);
  out += "\n";
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    out += csv_field(table.row_labels[r]);
    for (const auto& v : table.rows[r]) out += "," + (v ? format_double(*v) : std::string());
    out += "\n";
  }
  return out;
}

std::vector<std::filesystem::path> write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    written.push_back(path);
  };
  put(dir / (report.id + ".json"), report_to_json(report).dump(2) + "\n");
  for (const auto& t : report.tables) put(dir / (report.id + "." + t.name + ".csv"), table_to_csv(t));
  return written;
}

namespace {

bool type_matches(const Json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (type == "number") return v.is_number();
  return false;
}

void validate_at(const Json& v, const Json& schema, const std::string& path, std::vector<std::string>& errors) {
  if (!schema.is_object()) return;
  if (auto it = schema.find("type"); it != schema.end()) {
    bool ok = false;
    if (it->is_string()) {
      ok = type_matches(v, it->get<std::string>());
    } else {
      for (const auto& t : *it) ok = ok || type_matches(v, t.get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": expected type " + it->dump());
      return;
    }
  }
  if (auto it = schema.find("const"); it != schema.end() && v != *it) errors.push_back(path + ": expected " + it->dump());
  if (auto it = schema.find("enum"); it != schema.end()) {
    if (std::find(it->begin(), it->end(), v) == it->end()) errors.push_back(path + ": value not in " + it->dump());
  }
  if (auto it = schema.find("minimum"); it != schema.end() && v.is_number() && v.get<double>() < it->get<double>()) {
    errors.push_back(path + ": below minimum " + it->dump());
  }
  if (v.is_array()) {
    if (auto it = schema.find("minItems"); it != schema.end() && v.size() < it->get<std::size_t>()) {
      errors.push_back(path + ": fewer than " + it->dump() + " items");
    }
    if (auto it = schema.find("items"); it != schema.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) validate_at(v[i], *it, path + "/" + std::to_string(i), errors);
    }
  }
  if (v.is_object()) {
    if (auto it = schema.find("required"); it != schema.end()) {
      for (const auto& key : *it)
        if (!v.contains(key.get<std::string>())) errors.push_back(path + ": missing required key '" + key.get<std::string>() + "'");
    }
    const Json* props = schema.contains("properties") ? &schema["properties"] : nullptr;
    const Json* extra = schema.contains("additionalProperties") ? &schema["additionalProperties"] : nullptr;
    for (const auto& [key, value] : v.items()) {
      if (props && props->contains(key)) {
        validate_at(value, (*props)[key], path + "/" + key, errors);
      } else if (extra) {
        if (extra->is_boolean() && !extra->get<bool>()) {
          errors.push_back(path + ": unknown key '" + key + "'");
        } else if (extra->is_object()) {
          validate_at(value, *extra, path + "/" + key, errors);
        }
      }
    }
  }
}

}  // namespace

std::vector<std::string> validate_json(const Json& instance, const Json& schema) {
  std::vector<std::string> errors;
  validate_at(instance, schema, "", errors);
  for (auto& e : errors)
    if (e.empty() || e.front() == ':') e = "/" + e;
  return errors;
}

const Json& report_schema() {
  static const Json schema = Json::parse(detail::kReportSchemaText);
  return schema;
}

const Json& config_schema() {
  static const Json schema = Json::parse(detail::kConfigSchemaText);
  return schema;
}

std::vector<std::string> validate_report(const Json& report) { return validate_json(report, report_schema()); }

std::uint64_t default_seed(const std::string& experiment_id) {
  static const std::map<std::string, std::uint64_t> seeds = {
      {"sparsity-sweep", 11}, {"concat", 12}, {"pairwise", 13}, {"group-size", 14},
      {"density-correlation", 15}, {"compress", 16}, {"gen-toy", 17}};
  const auto it = seeds.find(experiment_id);
  return it == seeds.end() ? 1 : it->second;
}

std::string to_string(FactorTarget t) {
  switch (t) {
    case FactorTarget::UOnly: return "u_only";
    case FactorTarget::VOnly: return "v_only";
    case FactorTarget::Both: return "both";
  }
  return "?";
}

FactorTarget parse_factor_target(const std::string& s) {
  if (s == "u_only" || s == "u") return FactorTarget::UOnly;
  if (s == "v_only" || s == "v") return FactorTarget::VOnly;
  if (s == "both") return FactorTarget::Both;
  throw std::invalid_argument("unknown factor target '" + s + "'");
}

namespace {

constexpr double kRankSlack = 1.0 + 1e-12;

std::size_t floor_rank(double r) { return r < 1.0 ? 0 : static_cast<std::size_t>(std::floor(r * kRankSlack)); }

void check_grid(const std::vector<double>& sparsities) {
  for (double s : sparsities)
    if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("sparsity grid values must lie in [0, 1)");
}

std::optional<double> opt_size(std::size_t v, bool present = true) {
  return present ? std::optional<double>(static_cast<double>(v)) : std::nullopt;
}

// Leading `rank` components: U (rows x rank) and diag(sigma) Vᵀ (rank x cols).
std::pair<DenseMatrix, DenseMatrix> leading_factors(const SvdResult& svd, std::size_t rank) {
  DenseMatrix u = svd.u.col_block(0, rank);
  DenseMatrix v = svd.v_t.row_block(0, rank);
  for (std::size_t j = 0; j < rank; ++j)
    for (double& x : v.row(j)) x *= svd.singular_values[j];
  return {std::move(u), std::move(v)};
}

DenseMatrix prune(const DenseMatrix& m, double sparsity) {
  if (sparsity <= 0.0) return m;
  return apply_mask(MaskedMatrix(m, topk_mask_local(m, 1.0 - sparsity))).values();
}

std::size_t nonzeros(const DenseMatrix& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(), [](double x) { return x != 0.0; }));
}

std::string grid_label(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

}  // namespace

std::size_t sweep_rank(std::size_t d, std::size_t p, double budget, double sparsity, FactorTarget target) {
  const double keep = 1.0 - sparsity;
  const double dd = static_cast<double>(d), pp = static_cast<double>(p);
  double per_rank = 0.0;
  switch (target) {
    case FactorTarget::UOnly: per_rank = keep * dd + pp; break;
    case FactorTarget::VOnly: per_rank = dd + keep * pp; break;
    case FactorTarget::Both: per_rank = keep * (dd + pp); break;
  }
  return floor_rank(budget * dd * pp / per_rank);
}

ExperimentReport exp_factor_sparsity_sweep(const DenseMatrix& layer, const SweepOptions& opts) {
  check_grid(opts.sparsities);
  if (layer.empty()) throw ShapeError("sparsity sweep: empty layer");
  if (!(opts.budget > 0.0)) throw std::invalid_argument("sparsity sweep: budget must be positive");
  const std::size_t d = layer.rows(), p = layer.cols();
  const std::size_t full = std::min(d, p);
  const SvdResult svd = truncated_svd(layer, full);

  ExperimentReport report;
  report.id = "sparsity-sweep";
  report.config = {{"d", d},
                   {"p", p},
                   {"budget", opts.budget},
                   {"sparsities", opts.sparsities},
                   {"targets", Json::array()}};
  for (auto t : opts.targets) report.config["targets"].push_back(to_string(t));
  report.notes.push_back("rank chosen so that nonzeros of U and V stay at budget * d * p; rank capped at min(d, p)");
  report.notes.push_back("infeasible grid points (rank < 1) have null rank, nonzeros and mse");
  report.notes.push_back("points whose budget rank exceeds min(d, p) spend fewer nonzeros than the budget");

  const std::size_t n_points = opts.sparsities.size();
  for (auto target : opts.targets) {
    std::vector<std::vector<std::optional<double>>> rows(n_points);
    parallel_for(n_points, opts.threads, [&](std::size_t i) {
      const double s = opts.sparsities[i];
      const std::size_t rank = std::min(sweep_rank(d, p, opts.budget, s, target), full);
      if (rank == 0) {
        rows[i] = {s, std::nullopt, std::nullopt, std::nullopt};
        return;
      }
      auto [u, v] = leading_factors(svd, rank);
      if (target != FactorTarget::VOnly) u = prune(u, s);
      if (target != FactorTarget::UOnly) v = prune(v, s);
      const double mse = frobenius_mse(matmul(u, v), layer);
      rows[i] = {s, opt_size(rank), opt_size(nonzeros(u) + nonzeros(v)), mse};
    });
    MetricTable& table = report.add_table(to_string(target), {"sparsity", "rank", "nonzeros", "mse"});
    for (std::size_t i = 0; i < n_points; ++i) table.add_row(grid_label(opts.sparsities[i]), std::move(rows[i]));
  }
  return report;
}

std::size_t concat_rank(std::size_t rows, std::size_t cols, double budget, double sparsity) {
  const double r = static_cast<double>(rows), c = static_cast<double>(cols);
  return floor_rank(budget * r * c / (r + (1.0 - sparsity) * c));
}

ExperimentReport exp_concat_comparison(std::span<const FcPair> modules, const ConcatOptions& opts) {
  check_grid(opts.sparsities);
  if (modules.empty()) throw std::invalid_argument("concat comparison: no modules");
  const ConcatStrategy strategies[] = {ConcatStrategy::I, ConcatStrategy::II, ConcatStrategy::III, ConcatStrategy::IV};

  ExperimentReport report;
  report.id = "concat";
  report.config = {{"d", modules.front().fc1.rows()},
                   {"p", modules.front().fc1.cols()},
                   {"n_modules", modules.size()},
                   {"budget", opts.budget},
                   {"sparsities", opts.sparsities},
                   {"fixed_rank", opts.fixed_rank ? Json(*opts.fixed_rank) : Json(nullptr)}};
  report.notes.push_back("U dense, V magnitude-pruned to 1 - sparsity; mse is the mean over all FC layers");

  std::vector<ConcatResult> concats;
  std::vector<SvdResult> svds;
  for (auto s : strategies) {
    concats.push_back(concat_strategy(s, modules));
    const auto& m = concats.back().matrix;
    svds.push_back(truncated_svd(m, std::min(m.rows(), m.cols())));
  }
  const std::size_t n_grid = opts.sparsities.size();
  std::vector<std::vector<std::optional<double>>> rows(4 * n_grid);
  parallel_for(rows.size(), opts.threads, [&](std::size_t k) {
    const std::size_t si = k / n_grid;
    const double s = opts.sparsities[k % n_grid];
    const ConcatResult& concat = concats[si];
    const std::size_t R = concat.matrix.rows(), C = concat.matrix.cols();
    const std::size_t cap = std::min(R, C);
    const std::size_t rank = std::min(opts.fixed_rank.value_or(concat_rank(R, C, opts.budget, s)), cap);
    std::vector<std::optional<double>> row = {static_cast<double>(si + 1), s, opt_size(R), opt_size(C)};
    if (rank == 0) {
      row.insert(row.end(), {std::nullopt, std::nullopt});
    } else {
      auto [u, v] = leading_factors(svds[si], rank);
      const auto approx = slice_strategy(concat, matmul(u, prune(v, s)));
      double acc = 0.0;
      for (std::size_t m = 0; m < modules.size(); ++m) {
        acc += frobenius_mse(approx[m].fc1, modules[m].fc1);
        acc += frobenius_mse(approx[m].fc2, modules[m].fc2);
      }
      row.insert(row.end(), {opt_size(rank), acc / static_cast<double>(2 * modules.size())});
    }
    rows[k] = std::move(row);
  });
  MetricTable& table = report.add_table("mse", {"strategy", "sparsity", "rows", "cols", "rank", "mse"});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    table.add_row(to_string(strategies[k / n_grid]) + "@" + grid_label(opts.sparsities[k % n_grid]), std::move(rows[k]));
  }
  return report;
}

ExperimentReport exp_pairwise_heatmap(std::span<const LayerStack> blocks, std::size_t rank) {
  const PairwiseShareMse r = pairwise_share_mse(blocks, rank);
  ExperimentReport report;
  report.id = "pairwise";
  report.config = {{"n_blocks", blocks.size()}, {"rank", rank}};
  if (!blocks.empty()) {
    report.config["d"] = blocks.front().d;
    report.config["p"] = blocks.front().p;
  }
  report.notes.push_back("solo and pairwise decompositions use dense factors");
  report.notes.push_back("increase[i][j] = (solo[i] - shared[i][j] + solo[j] - shared[j][i]) / 2, signed as computed");
  const std::size_t n = blocks.size();
  std::vector<std::string> cols;
  for (std::size_t j = 0; j < n; ++j) cols.push_back("block_" + std::to_string(j));
  MetricTable solo{"solo", {"mse"}, {}, {}};
  MetricTable shared{"shared", cols, {}, {}};
  MetricTable increase{"increase", cols, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::string label = "block_" + std::to_string(i);
    solo.add_row(label, {r.mse_solo[i]});
    shared.add_row(label, {r.mse_shared[i].begin(), r.mse_shared[i].end()});
    increase.add_row(label, {r.mse_increase[i].begin(), r.mse_increase[i].end()});
  }
  report.tables = {std::move(solo), std::move(shared), std::move(increase)};
  return report;
}

std::size_t group_rank(std::size_t d, std::size_t p, std::size_t g, double budget, double density) {
  try {
    return required_rank(BudgetSpec{budget, density, d, p, 2 * g});
  } catch (const InfeasibleBudget&) {
    return 0;
  }
}

ExperimentReport exp_group_size(const ToyModel& model, const CalibrationSet& calib, const GroupSizeOptions& opts) {
  model.validate();
  const std::size_t d = model.d(), p = model.p(), n = model.n_blocks();
  ExperimentReport report;
  report.id = "group-size";
  report.config = {{"d", d},
                   {"p", p},
                   {"n_blocks", n},
                   {"budget", opts.budget},
                   {"density", opts.density},
                   {"group_sizes", opts.group_sizes},
                   {"local_steps", opts.local_steps}};
  report.notes.push_back("a group of g MLP modules shares one basis over 2g FC layers");
  report.notes.push_back("metric: mean per-block activation MSE on the calibration set after magnitude pruning");

  const std::size_t n_points = opts.group_sizes.size();
  std::vector<std::vector<std::optional<double>>> rank_rows(n_points), metric_rows(n_points);
  parallel_for(n_points, opts.threads, [&](std::size_t i) {
    const std::size_t g = opts.group_sizes[i];
    if (g == 0 || g > n) throw std::invalid_argument("group size " + std::to_string(g) + " outside [1, n_blocks]");
    const std::size_t r_sparse = group_rank(d, p, g, opts.budget, opts.density);
    const std::size_t r_dense = group_rank(d, p, g, opts.budget, 1.0);
    rank_rows[i] = {static_cast<double>(g), opt_size(r_sparse, r_sparse > 0), opt_size(r_dense, r_dense > 0)};

    const GroupLayout layout = parse_group_layout("uniform:" + std::to_string(g), n);
    std::vector<std::size_t> ranks;
    for (auto size : layout.group_sizes) ranks.push_back(group_rank(d, p, size, opts.budget, opts.density));
    if (std::find(ranks.begin(), ranks.end(), 0) != ranks.end()) {
      metric_rows[i] = {static_cast<double>(g), std::nullopt, std::nullopt};
      return;
    }
    CompressedModel cm = compress_init(model, layout, ranks);
    SparsifierConfig sc;
    sc.target_density = opts.density;
    if (opts.local_steps > 0) {
      sc.kind = opts.density < 1.0 ? SparsifierKind::GMP : SparsifierKind::Dense;
      sc.gmp_initial_sparsity = std::min(sc.gmp_initial_sparsity, sc.final_sparsity());
      TrainPlan plan;
      plan.steps = opts.local_steps;
      local_error_minimize(cm, model, calib, plan, sc);
    } else if (opts.density < 1.0) {
      sc.kind = SparsifierKind::Static;
      static_init(cm.all_factors(), sc);
    }
    metric_rows[i] = {static_cast<double>(g), static_cast<double>(r_sparse),
                      LocalReport::mean(block_activation_mses(cm, calib))};
  });
  MetricTable& ranks = report.add_table("ranks", {"group_size", "rank_sparse", "rank_dense"});
  for (std::size_t i = 0; i < n_points; ++i) ranks.add_row("g" + std::to_string(opts.group_sizes[i]), std::move(rank_rows[i]));
  MetricTable& metric = report.add_table("metric", {"group_size", "rank", "block_mse"});
  for (std::size_t i = 0; i < n_points; ++i) metric.add_row("g" + std::to_string(opts.group_sizes[i]), std::move(metric_rows[i]));
  return report;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: inputs differ in length");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = x[i] - mx, b = y[i] - my;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

ExperimentReport exp_density_mse_correlation(std::span<const double> densities, std::span<const double> solo_mse) {
  ExperimentReport report;
  report.id = "density-correlation";
  report.config = {{"n_modules", densities.size()}};
  report.notes.push_back("sample Pearson correlation over modules; null when either column is constant");
  MetricTable& pairs = report.add_table("pairs", {"density", "solo_mse"});
  if (densities.size() != solo_mse.size()) throw std::invalid_argument("density correlation: inputs differ in length");
  for (std::size_t i = 0; i < densities.size(); ++i) pairs.add_row("block_" + std::to_string(i), {densities[i], solo_mse[i]});
  report.add_table("correlation", {"pearson"}).add_row("density_vs_solo_mse", {pearson(densities, solo_mse)});
  return report;
}

DensityMseInputs density_mse_inputs(const ToyModel& model, const CalibrationSet& calib, double budget, double density,
                                    std::size_t steps, std::size_t threads) {
  model.validate();
  const std::size_t n = model.n_blocks(), d = model.d(), p = model.p();
  const GroupLayout layout = group_layout_custom({n}, n);
  const std::size_t rank = group_rank(d, p, n, budget, density);
  if (rank == 0) throw InfeasibleBudget("density correlation: budget leaves no rank");
  CompressedModel cm = compress_init(model, layout, rank);
  SparsifierConfig sc;
  sc.kind = SparsifierKind::GMP;
  sc.scope = SparsityScope::Global;
  sc.target_density = density;
  sc.gmp_initial_sparsity = std::min(sc.gmp_initial_sparsity, sc.final_sparsity());
  TrainPlan plan;
  plan.steps = std::max<std::size_t>(steps, 1);
  plan.threads = threads;
  const LocalReport rep = local_error_minimize(cm, model, calib, plan, sc);

  DensityMseInputs out;
  out.densities = rep.block_densities;
  const auto pairs = model.fc_pairs();
  const std::size_t solo_rank = std::min(rank, std::min(d, 2 * p));
  out.solo_mse.resize(n);
  parallel_for(n, threads, [&](std::size_t b) {
    const LayerStack stack = LayerStack::from_modules(std::span<const FcPair>(&pairs[b], 1), b);
    out.solo_mse[b] = stack_mse(stack, shared_init(stack, solo_rank));
  });
  return out;
}

}  // namespace fips
