#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fips/costmodel.hpp"
#include "fips/model.hpp"
#include "fips/optim.hpp"
#include "fips/sharing.hpp"

namespace fips {

using Json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

// Named rows x columns of floats; a missing value (infeasible grid point,
// undefined statistic) is stored as nullopt and written as null.
struct MetricTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  std::vector<std::vector<std::optional<double>>> rows;

  void add_row(std::string label, std::vector<std::optional<double>> values);
  std::optional<double> at(std::size_t row, const std::string& column) const;
  std::size_t column_index(const std::string& column) const;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string git_describe;
  std::string timestamp;  // ISO-8601 UTC
};

struct ExperimentReport {
  std::string id;
  Json config = Json::object();
  std::vector<MetricTable> tables;
  std::vector<std::string> notes;
  Provenance provenance;

  const MetricTable& table(const std::string& name) const;
  MetricTable& add_table(std::string name, std::vector<std::string> columns);
  // Every stored value is finite.
  bool all_finite() const;
};

std::string git_describe();
std::string utc_timestamp();
Provenance make_provenance(std::uint64_t seed);

Json report_to_json(const ExperimentReport& report);
std::string table_to_csv(const MetricTable& table);
// Writes <dir>/<id>.json and <dir>/<id>.<table>.csv; returns the written paths.
std::vector<std::filesystem::path> write_report(const ExperimentReport& report, const std::filesystem::path& dir);

// JSON-schema subset: type (string or list), required, properties,
// additionalProperties (bool or schema), items, enum, const, minItems,
// minimum. Returns one message per violation, empty when valid.
std::vector<std::string> validate_json(const Json& instance, const Json& schema);
const Json& report_schema();
const Json& config_schema();
std::vector<std::string> validate_report(const Json& report);

// Fixed default seed per experiment id.
std::uint64_t default_seed(const std::string& experiment_id);

enum class FactorTarget { UOnly, VOnly, Both };
std::string to_string(FactorTarget t);
FactorTarget parse_factor_target(const std::string& s);

// Rank that keeps U and V nonzeros at budget * d * p when `target` is pruned
// to `sparsity`; 0 when not even rank 1 fits.
std::size_t sweep_rank(std::size_t d, std::size_t p, double budget, double sparsity, FactorTarget target);

struct SweepOptions {
  double budget = 0.25;
  std::vector<double> sparsities = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<FactorTarget> targets = {FactorTarget::UOnly, FactorTarget::VOnly, FactorTarget::Both};
  std::size_t threads = 1;
};

// One table per target with columns sparsity, rank, nonzeros, mse. The
// decomposition is U = left singular vectors, V = diag(sigma) Vᵀ.
ExperimentReport exp_factor_sparsity_sweep(const DenseMatrix& layer, const SweepOptions& opts);

struct ConcatOptions {
  double budget = 0.25;
  std::vector<double> sparsities = {0.0, 0.25, 0.5, 0.75};
  std::optional<std::size_t> fixed_rank;  // overrides the budget-derived rank
  std::size_t threads = 1;
};

// Rank of an R x C concatenation with V at `sparsity` under `budget`.
std::size_t concat_rank(std::size_t rows, std::size_t cols, double budget, double sparsity);

// Table "mse" with one row per (strategy, sparsity): columns strategy,
// sparsity, rows, cols, rank, mse (mean over the 2N FC layers).
ExperimentReport exp_concat_comparison(std::span<const FcPair> modules, const ConcatOptions& opts);

// Tables "solo" (N x 1), "shared" and "increase" (N x N).
ExperimentReport exp_pairwise_heatmap(std::span<const LayerStack> blocks, std::size_t rank);

struct GroupSizeOptions {
  double budget = 0.25;
  double density = 0.25;
  std::vector<std::size_t> group_sizes = {1, 2, 3, 4, 6, 12};
  std::size_t local_steps = 0;  // local error minimization steps per point (0: init only)
  std::size_t threads = 1;
};

// Rank of a group of g MLP modules (2g FC layers) under (budget, density).
std::size_t group_rank(std::size_t d, std::size_t p, std::size_t g, double budget, double density);

// Table "ranks" (group_size, rank_sparse, rank_dense) and table "metric"
// (group_size, rank, block_mse): the toy metric is the mean activation MSE
// of the compressed model, magnitude-pruned to `density`.
ExperimentReport exp_group_size(const ToyModel& model, const CalibrationSet& calib, const GroupSizeOptions& opts);

// Sample Pearson correlation; nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// Table "pairs" (density, solo_mse per module) and table "correlation".
ExperimentReport exp_density_mse_correlation(std::span<const double> densities, std::span<const double> solo_mse);

// Per-module inputs for the correlation: solo MSE at `rank` and per-block
// densities after local error minimization with Global-scope GMP.
struct DensityMseInputs {
  std::vector<double> densities;
  std::vector<double> solo_mse;
};
DensityMseInputs density_mse_inputs(const ToyModel& model, const CalibrationSet& calib, double budget, double density,
                                    std::size_t steps, std::size_t threads = 1);

}  // namespace fips
