#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fips/costmodel.hpp"
#include "fips/experiments.hpp"
#include "fips/model.hpp"
#include "fips/optim.hpp"
#include "fips/sharing.hpp"
#include "fips/sparsifiers.hpp"

namespace py = pybind11;
using namespace fips;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return DenseMatrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const DenseMatrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_array(const Bitmask& m) {
  py::array_t<bool> out({m.rows(), m.cols()});
  bool* dst = out.mutable_data();
  for (std::size_t i = 0; i < m.size(); ++i) dst[i] = m[i];
  return out;
}

py::object parse_json(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

ToyModel load_toy(const std::filesystem::path& path) {
  AnyModel m = load_model(path);
  if (!std::holds_alternative<ToyModel>(m)) throw std::invalid_argument(path.string() + " is not an uncompressed model");
  return std::get<ToyModel>(std::move(m));
}

py::dict compress_toy(const std::filesystem::path& in, const std::filesystem::path& out, double budget, double density,
                      const std::string& sparsifier, const std::string& groups, std::size_t steps,
                      std::size_t calib_batches, std::uint64_t seed, std::size_t threads) {
  const ToyModel model = load_toy(in);
  const GroupLayout layout = groups == "auto" && model.n_blocks() == 12 ? group_layout_deit12()
                             : groups == "auto"                        ? parse_group_layout("uniform:4", model.n_blocks())
                                                                       : parse_group_layout(groups, model.n_blocks());
  SparsifierConfig sc;
  sc.kind = parse_sparsifier_kind(sparsifier);
  sc.target_density = sc.kind == SparsifierKind::Dense ? 1.0 : density;
  sc.gmp_initial_sparsity = std::min(sc.gmp_initial_sparsity, sc.final_sparsity());
  std::vector<std::size_t> ranks;
  for (auto size : layout.group_sizes)
    ranks.push_back(required_rank(BudgetSpec{budget, sc.target_density, model.d(), model.p(), 2 * size}));
  CompressedModel cm = compress_init(model, layout, ranks);
  const CalibrationSet calib =
      collect_calibration(model, make_calibration_inputs(seed, calib_batches, 128, model.d()), 128);
  TrainPlan plan;
  plan.steps = steps;
  plan.threads = threads;
  LocalReport rep;
  {
    py::gil_scoped_release release;
    rep = local_error_minimize(cm, model, calib, plan, sc);
  }
  save_model(out, cm);
  py::dict d;
  d["ranks"] = ranks;
  d["init_mse"] = rep.init_block_mse;
  d["pruned_init_mse"] = rep.pruned_init_block_mse;
  d["final_mse"] = rep.final_block_mse;
  d["block_densities"] = rep.block_densities;
  d["parameter_count"] = cm.parameter_count();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Shared-basis sparse compression of MLP stacks";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<InfeasibleBudget>(m, "InfeasibleBudget", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "truncated_svd",
      [](const Array& a, std::size_t rank) {
        const SvdResult r = truncated_svd(to_matrix(a), rank);
        return py::make_tuple(to_array(r.u), r.singular_values, to_array(r.v_t));
      },
      py::arg("matrix"), py::arg("rank"), "Rank-k SVD: (U, singular values, Vt).");

  m.def(
      "topk_mask_local", [](const Array& a, double density) { return mask_array(topk_mask_local(to_matrix(a), density)); },
      py::arg("matrix"), py::arg("density"));
  m.def(
      "topk_mask_global",
      [](const std::vector<Array>& arrays, double density) {
        std::vector<DenseMatrix> ms;
        for (const auto& a : arrays) ms.push_back(to_matrix(a));
        std::vector<py::array_t<bool>> out;
        for (const auto& mask : topk_mask_global(ms, density)) out.push_back(mask_array(mask));
        return out;
      },
      py::arg("matrices"), py::arg("density"));

  m.def(
      "required_rank",
      [](double budget, double density, std::size_t d, std::size_t p, std::size_t n_layers, const std::string& accounting) {
        return required_rank(BudgetSpec{budget, density, d, p, n_layers}, parse_rank_accounting(accounting));
      },
      py::arg("budget"), py::arg("density"), py::arg("d"), py::arg("p"), py::arg("n_layers") = 1,
      py::arg("accounting") = "paper_formula");
  m.def("storage_fraction", &storage_fraction, py::arg("budget"), py::arg("density"), py::arg("bits") = 16);
  m.def(
      "mac_estimate",
      [](const std::string& strategy, double n, double d, double p, double r, double reuse) {
        if (strategy != "low_rank" && strategy != "full_rank") throw std::invalid_argument("strategy: low_rank | full_rank");
        return mac_estimate(strategy == "low_rank" ? MacStrategy::LowRank : MacStrategy::FullRank, n, d, p, r, reuse);
      },
      py::arg("strategy"), py::arg("n_tokens"), py::arg("d"), py::arg("p"), py::arg("rank"), py::arg("reuse_count") = 1.0);
  m.def("gmp_target_sparsity", &gmp_target_sparsity, py::arg("t"), py::arg("total_steps"),
        py::arg("initial_sparsity") = 0.25, py::arg("final_sparsity") = 0.75);
  m.def(
      "group_layout", [](const std::string& spec, std::size_t n) { return parse_group_layout(spec, n).group_sizes; },
      py::arg("spec"), py::arg("n_blocks"));

  m.def(
      "gen_toy",
      [](const std::filesystem::path& path, std::uint64_t seed, std::size_t d, std::size_t p, std::size_t blocks,
         const std::string& spectrum) { save_model(path, gen_toy_model(seed, d, p, blocks, parse_spectrum(spectrum))); },
      py::arg("path"), py::arg("seed") = 17, py::arg("d") = 32, py::arg("p") = 128, py::arg("blocks") = 4,
      py::arg("spectrum") = "decaying:0.9");
  m.def(
      "forward",
      [](const std::filesystem::path& path, const Array& x) {
        const AnyModel model = load_model(path);
        return to_array(std::visit([&](const auto& mm) { return mm.forward(to_matrix(x)); }, model));
      },
      py::arg("path"), py::arg("x"), "Forward pass of a saved toy or compressed model.");
  m.def("compress_toy", &compress_toy, py::arg("in_path"), py::arg("out_path"), py::arg("budget") = 0.25,
        py::arg("density") = 0.25, py::arg("sparsifier") = "gmp", py::arg("groups") = "auto", py::arg("steps") = 100,
        py::arg("calib_batches") = 4, py::arg("seed") = 0, py::arg("threads") = 1);

  m.def(
      "sparsity_sweep",
      [](const Array& layer, double budget, std::vector<double> sparsities) {
        SweepOptions opts;
        opts.budget = budget;
        opts.sparsities = std::move(sparsities);
        ExperimentReport rep = exp_factor_sparsity_sweep(to_matrix(layer), opts);
        rep.provenance = make_provenance(default_seed(rep.id));
        return parse_json(report_to_json(rep));
      },
      py::arg("layer"), py::arg("budget") = 0.25,
      py::arg("sparsities") = std::vector<double>{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
  m.def(
      "validate_report",
      [](const py::object& report) {
        const std::string text = py::module_::import("json").attr("dumps")(report).cast<std::string>();
        return validate_report(Json::parse(text));
      },
      py::arg("report"), "Schema violations of a report dict; empty when valid.");
}
