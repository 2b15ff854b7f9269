#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "../oracles.hpp"
#include "fips/experiments.hpp"

using namespace fips;

namespace {

Json strip_timestamp(Json j) {
  j["provenance"].erase("timestamp");
  return j;
}

double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

}  // namespace

TEST_CASE("factor sparsity sweep: degenerate point, budget and sparse advantage") {
  const ToyModel model = gen_toy_model(11, 32, 128, 1, Spectrum::decaying(0.9));
  SweepOptions opts;
  opts.sparsities = {0.0, 0.25, 0.5, 0.6, 0.7, 0.75, 0.8};
  const ExperimentReport rep = exp_factor_sparsity_sweep(model.blocks[0].w_fc1, opts);
  REQUIRE(rep.tables.size() == 3);

  const double s0 = *rep.table("u_only").at(0, "mse");
  CHECK(*rep.table("v_only").at(0, "mse") == s0);
  CHECK(*rep.table("both").at(0, "mse") == s0);

  const double budget = 0.25 * 32 * 128;
  for (const auto& t : rep.tables)
    for (std::size_t i = 0; i < opts.sparsities.size(); ++i) {
      const auto nz = t.at(i, "nonzeros");
      REQUIRE(nz.has_value());
      CHECK(*nz <= budget + 2);  // per-factor ceiling
      if (*t.at(i, "rank") < 32) CHECK(budget - *nz <= 32 + 128);
    }

  const auto& v = rep.table("v_only");
  CHECK(*v.at(5, "mse") < s0);
  CHECK(sweep_rank(32, 128, 0.25, 0.0, FactorTarget::Both) == 6);
  CHECK(sweep_rank(32, 128, 0.001, 0.0, FactorTarget::Both) == 0);
  CHECK(parse_factor_target("v_only") == FactorTarget::VOnly);
}

TEST_CASE("concat comparison: row count and full-rank reconstruction") {
  const ToyModel model = gen_toy_model(12, 4, 16, 2, Spectrum::decaying(0.9));
  const auto pairs = model.fc_pairs();
  ConcatOptions opts;
  const ExperimentReport rep = exp_concat_comparison(pairs, opts);
  CHECK(rep.table("mse").rows.size() == 4 * opts.sparsities.size());
  CHECK(rep.table("mse").row_labels[0] == "I@0");

  opts.fixed_rank = 64;
  opts.sparsities = {0.0};
  const ExperimentReport full = exp_concat_comparison(pairs, opts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(*full.table("mse").at(i, "mse") < 1e-20);
  CHECK(*full.table("mse").at(1, "rows") == 8);
  CHECK(*full.table("mse").at(2, "cols") == 32);
  CHECK(concat_rank(4, 64, 0.25, 0.0) == 0);
  CHECK(concat_rank(4, 64, 0.25, 0.75) == 3);
}

TEST_CASE("pairwise heatmap: diagonal, symmetry and exact solo fits") {
  const ToyModel model = gen_toy_model(13, 16, 64, 3, Spectrum::shared_subspace(4));
  const auto pairs = model.fc_pairs();
  std::vector<LayerStack> blocks;
  for (std::size_t b = 0; b < 3; ++b) blocks.push_back(LayerStack::from_modules(std::span<const FcPair>(&pairs[b], 1), b));
  const ExperimentReport rep = exp_pairwise_heatmap(blocks, 6);
  const auto& inc = rep.table("increase");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(*inc.at(i, "block_" + std::to_string(i)) == 0.0);
    CHECK(*rep.table("solo").at(i, "mse") < 1e-20);
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(*inc.at(i, "block_" + std::to_string(j)) == *inc.at(j, "block_" + std::to_string(i)));
  }
}

TEST_CASE("group size: ranks and metric") {
  CHECK(group_rank(32, 128, 1, 0.25, 0.25) == required_rank(BudgetSpec{0.25, 0.25, 32, 128, 2}));
  const ToyModel model = gen_toy_model(14, 16, 64, 4, Spectrum::decaying(0.9));
  const CalibrationSet calib = collect_calibration(model, make_calibration_inputs(15, 2, 32, 16), 32);
  GroupSizeOptions opts;
  opts.group_sizes = {1, 2, 4};
  const ExperimentReport rep = exp_group_size(model, calib, opts);
  const auto& ranks = rep.table("ranks");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(*ranks.at(i, "rank_dense") < *ranks.at(i, "rank_sparse"));
    if (i > 0) CHECK(*ranks.at(i, "rank_sparse") >= *ranks.at(i - 1, "rank_sparse"));
    CHECK(std::isfinite(*rep.table("metric").at(i, "block_mse")));
  }
  CHECK(*ranks.at(0, "rank_sparse") == group_rank(16, 64, 1, 0.25, 0.25));
  opts.group_sizes = {5};
  CHECK_THROWS_AS(exp_group_size(model, calib, opts), std::invalid_argument);
}

TEST_CASE("pearson: undefined, perfect and oracle") {
  const std::vector<double> flat = {1, 1, 1}, x = {1, 2, 3, 4}, y = {3, 5, 7, 9};
  CHECK_FALSE(pearson(flat, std::vector<double>{1, 2, 3}).has_value());
  CHECK_FALSE(pearson(std::vector<double>{1}, std::vector<double>{2}).has_value());
  CHECK(*pearson(x, y) == doctest::Approx(1.0).epsilon(1e-15));
  std::mt19937_64 gen(16);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> a(12), b(12);
    for (std::size_t i = 0; i < 12; ++i) {
      a[i] = n(gen);
      b[i] = 0.5 * a[i] + n(gen);
    }
    CHECK(std::abs(*pearson(a, b) - oracle_pearson(a, b)) < 1e-12);
  }
  const ExperimentReport rep = exp_density_mse_correlation(flat, std::vector<double>{1, 2, 3});
  CHECK_FALSE(rep.table("correlation").at(0, "pearson").has_value());
  CHECK(validate_report(report_to_json(rep)).empty());
}

TEST_CASE("density correlation inputs") {
  const ToyModel model = gen_toy_model(17, 16, 64, 3, Spectrum::decaying(0.9));
  const CalibrationSet calib = collect_calibration(model, make_calibration_inputs(18, 2, 32, 16), 32);
  const DensityMseInputs in = density_mse_inputs(model, calib, 0.25, 0.25, 10);
  REQUIRE(in.densities.size() == 3);
  double mean = 0.0;
  for (double d : in.densities) mean += d / 3.0;
  CHECK(std::abs(mean - 0.25) < 0.01);
  for (double m : in.solo_mse) CHECK(m > 0.0);
}

TEST_CASE("reports: schema validation, csv and determinism") {
  const ToyModel model = gen_toy_model(19, 8, 32, 2, Spectrum::decaying(0.9));
  const auto pairs = model.fc_pairs();
  ExperimentReport a = exp_concat_comparison(pairs, {});
  a.provenance = make_provenance(default_seed("concat"));
  ExperimentReport b = exp_concat_comparison(pairs, {});
  b.provenance = make_provenance(default_seed("concat"));
  const Json ja = report_to_json(a), jb = report_to_json(b);
  CHECK(validate_report(ja).empty());
  CHECK(strip_timestamp(ja) == strip_timestamp(jb));
  CHECK(ja["provenance"]["seed"] == 12);

  Json broken = ja;
  broken.erase("notes");
  CHECK_FALSE(validate_report(broken).empty());
  broken = ja;
  broken["extra"] = 1;
  CHECK_FALSE(validate_report(broken).empty());
  broken = ja;
  broken["tables"][0]["rows"][0][0] = "x";
  CHECK_FALSE(validate_report(broken).empty());

  ExperimentReport bad = a;
  bad.tables[0].rows[0][5] = std::nan("");
  CHECK_THROWS_AS(report_to_json(bad), std::invalid_argument);

  MetricTable t{"t", {"a", "b"}, {}, {}};
  t.add_row("r,1", {0.1, std::nullopt});
  CHECK(table_to_csv(t) == "row,a,b\n\"r,1\",0.10000000000000001,\n");
  CHECK_THROWS_AS(t.add_row("short", {1.0}), std::invalid_argument);

  const auto dir = std::filesystem::temp_directory_path() / "fips_unit_reports";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto paths = write_report(a, dir);
  CHECK(paths.size() == 2);
  CHECK(std::filesystem::exists(dir / "concat.json"));
  CHECK(std::filesystem::exists(dir / "concat.mse.csv"));
  std::ifstream in(dir / "concat.json");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(validate_report(Json::parse(ss.str())).empty());
  std::filesystem::remove_all(dir);

  Json cfg = {{"d", 8}, {"sparsifier", "gmp"}};
  CHECK(validate_json(cfg, config_schema()).empty());
  cfg["sparsifier"] = "nope";
  CHECK_FALSE(validate_json(cfg, config_schema()).empty());
  cfg = {{"unknown_key", 1}};
  CHECK_FALSE(validate_json(cfg, config_schema()).empty());
}
