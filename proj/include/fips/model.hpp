#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fips/linalg.hpp"
#include "fips/sharing.hpp"
#include "fips/sparse.hpp"

namespace fips {

enum class Activation : std::uint8_t { GeluTanh = 0, GeluErf = 1 };

double gelu(double z, Activation act = Activation::GeluTanh);
double gelu_derivative(double z, Activation act = Activation::GeluTanh);

struct MlpModule {
  DenseMatrix w_fc1;       // d x p
  std::vector<double> b1;  // p
  DenseMatrix w_fc2;       // p x d
  std::vector<double> b2;  // d

  std::size_t d() const noexcept { return w_fc1.rows(); }
  std::size_t p() const noexcept { return w_fc1.cols(); }
  void validate() const;
};

// GELU(x W1 + b1) W2 + b2 for x of shape tokens x d.
DenseMatrix mlp_forward(const MlpModule& module, const DenseMatrix& x, Activation act = Activation::GeluTanh);

// Residual stack x <- x + MLP_i(x), optionally followed by a linear head.
struct ToyModel {
  std::vector<MlpModule> blocks;
  std::optional<DenseMatrix> head;  // d x classes
  Activation activation = Activation::GeluTanh;

  std::size_t d() const noexcept { return blocks.empty() ? 0 : blocks.front().d(); }
  std::size_t p() const noexcept { return blocks.empty() ? 0 : blocks.front().p(); }
  std::size_t n_blocks() const noexcept { return blocks.size(); }
  void validate() const;

  DenseMatrix forward(const DenseMatrix& x) const;
  std::vector<FcPair> fc_pairs() const;
};

enum class SpectrumKind { Flat, Decaying, SharedSubspace };

struct Spectrum {
  SpectrumKind kind = SpectrumKind::Decaying;
  double gamma = 0.9;      // Decaying: sigma_j proportional to gamma^j
  std::size_t k = 8;       // SharedSubspace: common d x k basis

  static Spectrum flat() { return {SpectrumKind::Flat, 0.0, 0}; }
  static Spectrum decaying(double gamma) { return {SpectrumKind::Decaying, gamma, 0}; }
  static Spectrum shared_subspace(std::size_t k) { return {SpectrumKind::SharedSubspace, 0.0, k}; }
};

std::string to_string(const Spectrum& s);
// "flat", "decaying:0.9", "shared:8"
Spectrum parse_spectrum(const std::string& s);

// Synthetic residual MLP stack. Flat and Decaying draw every weight as
// Q1 diag(sigma) Q2ᵀ with random orthonormal Q1, Q2; SharedSubspace draws
// every fc1 and fc2ᵀ as U0 R_i with one d x k orthonormal U0. fc1 is scaled
// to squared Frobenius norm p and fc2 to d, so pre-activations have roughly
// unit variance; biases have std 0.01.
ToyModel gen_toy_model(std::uint64_t seed, std::size_t d, std::size_t p, std::size_t n_blocks,
                       const Spectrum& spectrum);

// Teacher activations of the original model, captured once.
struct CalibrationSet {
  std::vector<DenseMatrix> inputs_per_block;   // X_i, tokens x d
  std::vector<DenseMatrix> hidden_per_block;   // GELU(X_i W1 + b1), tokens x p
  std::vector<DenseMatrix> outputs_per_block;  // MLP_i(X_i), tokens x d
  std::size_t batch_size = 128;
  std::size_t num_batches = 30;

  std::size_t tokens() const noexcept { return inputs_per_block.empty() ? 0 : inputs_per_block.front().rows(); }
};

// Gaussian model inputs, num_batches * batch_size rows of width d.
DenseMatrix make_calibration_inputs(std::uint64_t seed, std::size_t num_batches, std::size_t batch_size, std::size_t d);

CalibrationSet collect_calibration(const ToyModel& model, const DenseMatrix& inputs, std::size_t batch_size = 128);

// A toy model whose MLP weights are replaced by shared groups. Layer order
// inside a group is fc1, fc2ᵀ per block; biases stay dense.
struct CompressedModel {
  std::size_t d = 0;
  std::size_t p = 0;
  Activation activation = Activation::GeluTanh;
  GroupLayout layout;
  std::vector<SharedGroup> groups;
  std::vector<std::vector<double>> b1;  // per block
  std::vector<std::vector<double>> b2;
  std::optional<DenseMatrix> head;

  std::size_t n_blocks() const noexcept { return b1.size(); }
  // (group index, position of the block inside the group)
  std::pair<std::size_t, std::size_t> locate(std::size_t block) const;
  MlpModule block_module(std::size_t block) const;
  ToyModel materialize() const;
  DenseMatrix forward(const DenseMatrix& x) const;

  std::size_t parameter_count() const;  // U entries + active V entries
  std::vector<MaskedMatrix*> all_factors();
  void validate() const;
};

// Shared initialization for every group of `layout` at `rank`.
CompressedModel compress_init(const ToyModel& model, const GroupLayout& layout, std::size_t rank,
                              const SharedInitOptions& opts = {});
CompressedModel compress_init(const ToyModel& model, const GroupLayout& layout, std::span<const std::size_t> ranks,
                              const SharedInitOptions& opts = {});

// FPSH container:
//   "FPSH" | u16 version | u32 record count | records
//   record: u32 name length | UTF-8 name | u8 dtype | u8 rank | rank x u64 dims | payload
// dtype 1 = f64, 2 = f32 (row-major little-endian), 3 = bitmask (serialize_bitmask bytes).
inline constexpr std::uint16_t kFpshVersion = 1;

enum class DType : std::uint8_t { F64 = 1, F32 = 2, Mask = 3 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // F64/F32 payload, converted to double on read
  Bitmask mask;                // DType::Mask

  static TensorRecord matrix(std::string name, const DenseMatrix& m);
  static TensorRecord vector(std::string name, const std::vector<double>& v);
  static TensorRecord bitmask(std::string name, const Bitmask& m);
  DenseMatrix as_matrix() const;
};

std::vector<std::uint8_t> encode_fpsh(const std::vector<TensorRecord>& records);
std::vector<TensorRecord> decode_fpsh(std::span<const std::uint8_t> bytes);

using AnyModel = std::variant<ToyModel, CompressedModel>;

std::vector<TensorRecord> to_records(const ToyModel& model);
std::vector<TensorRecord> to_records(const CompressedModel& model);
AnyModel from_records(const std::vector<TensorRecord>& records);

void save_model(const std::filesystem::path& path, const ToyModel& model);
void save_model(const std::filesystem::path& path, const CompressedModel& model);
AnyModel load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fips
