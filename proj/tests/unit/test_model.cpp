#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "../oracles.hpp"
#include "fips/model.hpp"

using namespace fips;

namespace {

MlpModule random_module(std::mt19937_64& gen, std::size_t d, std::size_t p) {
  MlpModule m{oracle::random_matrix(gen, d, p, 0.3), std::vector<double>(p), oracle::random_matrix(gen, p, d, 0.3),
              std::vector<double>(d)};
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& b : m.b1) b = n(gen);
  for (auto& b : m.b2) b = n(gen);
  return m;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fips_unit_" + name);
}

}  // namespace

TEST_CASE("mlp_forward: zero module, 1x1 case and naive oracle") {
  const MlpModule zero{DenseMatrix(3, 5), std::vector<double>(5), DenseMatrix(5, 3), std::vector<double>(3)};
  std::mt19937_64 gen(61);
  const DenseMatrix zout = mlp_forward(zero, oracle::random_matrix(gen, 4, 3));
  for (double x : zout.data()) CHECK(x == 0.0);

  const MlpModule one{DenseMatrix{{1}}, {0}, DenseMatrix{{1}}, {0}};
  CHECK(mlp_forward(one, DenseMatrix{{1}})(0, 0) == doctest::Approx(0.84119).epsilon(1e-5));
  CHECK(std::abs(gelu(1.0) - oracle::gelu(1.0)) < 1e-15);

  for (int trial = 0; trial < 5; ++trial) {
    const MlpModule m = random_module(gen, 2 + trial, 3 + 2 * trial);
    const DenseMatrix x = oracle::random_matrix(gen, 7, 2 + trial);
    CHECK(oracle::max_abs_diff(mlp_forward(m, x), oracle::mlp(x, m.w_fc1, m.b1, m.w_fc2, m.b2)) < 1e-12);
  }
  CHECK_THROWS_AS(mlp_forward(one, DenseMatrix(2, 3)), ShapeError);
}

TEST_CASE("gelu derivative matches finite differences") {
  for (auto act : {Activation::GeluTanh, Activation::GeluErf})
    for (double z = -4.0; z <= 4.0; z += 0.37) {
      const double fd = (gelu(z + 1e-6, act) - gelu(z - 1e-6, act)) / 2e-6;
      CHECK(std::abs(gelu_derivative(z, act) - fd) < 1e-7);
    }
}

TEST_CASE("collect_calibration: one block, manual residual forward, sizes") {
  const ToyModel one = gen_toy_model(1, 8, 32, 1, Spectrum::decaying(0.9));
  const DenseMatrix x = make_calibration_inputs(2, 2, 16, 8);
  const CalibrationSet c1 = collect_calibration(one, x, 16);
  CHECK(c1.inputs_per_block[0] == x);

  const ToyModel model = gen_toy_model(3, 8, 32, 3, Spectrum::decaying(0.9));
  const CalibrationSet c = collect_calibration(model, x, 16);
  DenseMatrix h = x;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto& blk = model.blocks[b];
    CHECK(oracle::max_abs_diff(c.inputs_per_block[b], h) < 1e-12);
    const DenseMatrix out = oracle::mlp(h, blk.w_fc1, blk.b1, blk.w_fc2, blk.b2);
    CHECK(oracle::max_abs_diff(c.outputs_per_block[b], out) < 1e-12);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += out.data()[i];
  }
  CHECK(oracle::max_abs_diff(model.forward(x), h) < 1e-12);
  CHECK(c.num_batches == 2);

  const CalibrationSet full = collect_calibration(model, make_calibration_inputs(4, 30, 128, 8));
  CHECK(full.tokens() == 3840);
  CHECK(full.num_batches == 30);
  CHECK(full.hidden_per_block[2].cols() == 32);
}

TEST_CASE("gen_toy_model: determinism, shared subspace and decaying energy") {
  const ToyModel a = gen_toy_model(9, 16, 64, 3, Spectrum::shared_subspace(4));
  const ToyModel b = gen_toy_model(9, 16, 64, 3, Spectrum::shared_subspace(4));
  CHECK(encode_fpsh(to_records(a)) == encode_fpsh(to_records(b)));
  CHECK(encode_fpsh(to_records(a)) != encode_fpsh(to_records(gen_toy_model(10, 16, 64, 3, Spectrum::shared_subspace(4)))));

  const auto pairs = a.fc_pairs();
  const LayerStack stack = LayerStack::from_modules(pairs);
  const SharedGroup g = shared_init(stack, 4);
  CHECK(stack_mse(stack, g) < 1e-10);

  const ToyModel dec = gen_toy_model(11, 32, 128, 1, Spectrum::decaying(0.5));
  const SvdResult svd = truncated_svd(dec.blocks[0].w_fc1, 32);
  double total = 0.0;
  for (double s : svd.singular_values) total += s * s;
  std::size_t r = 0;
  for (double acc = 0.0; acc < 0.99 * total; ++r) acc += svd.singular_values[r] * svd.singular_values[r];
  // 1 - 0.25^r >= 0.99 first holds at r = 4
  CHECK(r == 4);
  CHECK(svd.singular_values[1] / svd.singular_values[0] == doctest::Approx(0.5).epsilon(1e-9));

  CHECK_THROWS_AS(gen_toy_model(1, 8, 32, 1, Spectrum::decaying(1.5)), std::invalid_argument);
  CHECK_THROWS_AS(gen_toy_model(1, 8, 32, 1, Spectrum::shared_subspace(9)), std::invalid_argument);
  CHECK_THROWS_AS(parse_spectrum("decaying:x"), std::invalid_argument);
  CHECK(to_string(parse_spectrum("shared:8")) == "shared:8");
}

TEST_CASE("compress_init at full rank reproduces the model") {
  const ToyModel model = gen_toy_model(12, 8, 32, 4, Spectrum::decaying(0.9));
  const CompressedModel cm = compress_init(model, parse_group_layout("uniform:2", 4), 8);
  const DenseMatrix x = make_calibration_inputs(13, 1, 32, 8);
  CHECK(oracle::max_abs_diff(cm.forward(x), model.forward(x)) < 1e-9);
  CHECK(oracle::max_abs_diff(cm.materialize().forward(x), model.forward(x)) < 1e-9);
  CHECK(cm.parameter_count() == 2 * (8 * 8 + 4 * 8 * 32));
  CHECK(cm.locate(3) == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK_THROWS_AS(compress_init(model, parse_group_layout("uniform:2", 4), std::vector<std::size_t>{8}),
                  std::invalid_argument);
}

TEST_CASE("FPSH: save, load, save is byte-identical") {
  const ToyModel model = gen_toy_model(14, 8, 16, 2, Spectrum::flat());
  const auto path = temp_file("toy.fpsh");
  save_model(path, model);
  const auto first = read_file_bytes(path);
  const AnyModel back = load_model(path);
  REQUIRE(std::holds_alternative<ToyModel>(back));
  save_model(path, std::get<ToyModel>(back));
  CHECK(read_file_bytes(path) == first);

  CompressedModel cm = compress_init(model, parse_group_layout("2", 2), 6);
  for (auto* f : cm.all_factors()) f->set_mask(topk_mask_local(f->values(), 0.3));
  save_model(path, cm);
  const auto cfirst = read_file_bytes(path);
  const AnyModel cback = load_model(path);
  REQUIRE(std::holds_alternative<CompressedModel>(cback));
  CHECK(std::get<CompressedModel>(cback).groups[0].factors[1] == cm.groups[0].factors[1]);
  save_model(path, std::get<CompressedModel>(cback));
  CHECK(read_file_bytes(path) == cfirst);
  std::filesystem::remove(path);
}

TEST_CASE("FPSH: zero tensor payload and malformed inputs") {
  const auto bytes = encode_fpsh({TensorRecord::matrix("z", DenseMatrix(3, 5))});
  // magic, version, count, name length, name, dtype, rank, dims
  const std::size_t header = 4 + 2 + 4 + 4 + 1 + 1 + 1 + 2 * 8;
  REQUIRE(bytes.size() == header + 8 * 15);
  for (std::size_t i = header; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
  CHECK(std::memcmp(bytes.data(), "FPSH", 4) == 0);

  const auto rec = decode_fpsh(bytes);
  REQUIRE(rec.size() == 1);
  CHECK(rec[0].as_matrix() == DenseMatrix(3, 5));

  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_fpsh(bad);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::BadMagic);
  }
  auto ver = bytes;
  ver[4] = 99;
  try {
    decode_fpsh(ver);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::VersionMismatch);
  }
  try {
    decode_fpsh(std::span<const std::uint8_t>(bytes.data(), bytes.size() - 3));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::Truncated);
  }
  CHECK_THROWS_AS(from_records(rec), FormatError);
}
