#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fips/linalg.hpp"
#include "fips/sparse.hpp"

namespace fips {

// Weights of one MLP module as stored by the model: fc1 is d x p, fc2 is p x d.
struct FcPair {
  DenseMatrix fc1;
  DenseMatrix fc2;
};

// Layers oriented to a common d x p shape. fc2 weights enter transposed and
// are flagged so reconstruction can restore them.
struct LayerStack {
  std::vector<DenseMatrix> layers;
  std::vector<bool> transposed;
  std::vector<std::size_t> ids;  // original layer indices
  std::size_t d = 0;
  std::size_t p = 0;

  std::size_t size() const noexcept { return layers.size(); }

  // Adds one layer in its stored orientation; p x d layers are transposed.
  void push(const DenseMatrix& w, std::size_t id);
  // fc1, fc2ᵀ for every module, ids 2m and 2m + 1.
  static LayerStack from_modules(std::span<const FcPair> modules, std::size_t first_module = 0);
  void validate() const;
};

// One shared basis U and per-layer sparse projections V_i with
// W'_i = (U V_i) diag(s_i).
struct SharedGroup {
  DenseMatrix u;
  std::vector<MaskedMatrix> factors;
  std::vector<std::vector<double>> scaling;  // empty, or one length-p vector per layer
  std::vector<std::size_t> member_ids;
  std::vector<bool> transposed;
  double tau = 2.0;

  std::size_t size() const noexcept { return factors.size(); }
  std::size_t rank() const noexcept { return u.cols(); }
  std::size_t d() const noexcept { return u.rows(); }
  std::size_t p() const noexcept { return factors.empty() ? 0 : factors.front().cols(); }
  bool has_scaling() const noexcept { return !scaling.empty(); }

  // Dense U entries plus active V entries (scaling vectors excluded).
  std::size_t parameter_count() const;
  void validate() const;
};

// d x p reconstruction (U V_i) diag(s_i).
DenseMatrix reconstruct_oriented(const SharedGroup& group, std::size_t i);
// Reconstruction in the layer's stored orientation.
DenseMatrix reconstruct(const SharedGroup& group, std::size_t i);

enum class ConcatStrategy { I, II, III, IV };

std::string to_string(ConcatStrategy s);
ConcatStrategy parse_concat_strategy(const std::string& s);

// A concatenated weight matrix and the metadata needed to slice it back.
//   I:   [fc1_1, fc2ᵀ_1, fc1_2, fc2ᵀ_2, ...] along p        -> d x 2Np
//   II:  per module [fc1, fc2ᵀ] along p, modules along d   -> Nd x 2p
//   III: all fc1 along p, all fc2ᵀ along p, stacked on d   -> 2d x Np
//   IV:  every layer stacked along d                       -> 2Nd x p
// For two modules with p = 4d these are d x 16d, 2d x 8d, 2d x 8d, 4d x 4d.
struct ConcatResult {
  ConcatStrategy strategy = ConcatStrategy::I;
  DenseMatrix matrix;
  std::size_t d = 0;
  std::size_t p = 0;
  std::size_t n_modules = 0;
};

ConcatResult concat_strategy(ConcatStrategy strategy, std::span<const FcPair> modules);
// Inverse of concat_strategy; also accepts an approximation of the matrix.
std::vector<FcPair> slice_strategy(const ConcatResult& concat);
std::vector<FcPair> slice_strategy(const ConcatResult& layout, const DenseMatrix& matrix);

struct GroupLayout {
  std::vector<std::size_t> group_sizes;

  std::size_t total() const noexcept;
  // Index of the first block of every group.
  std::vector<std::size_t> offsets() const;
};

GroupLayout group_layout_deit12();
// Stages of up to six blocks are kept whole; longer stages split into
// ceil(n / 6) near-equal consecutive groups.
GroupLayout group_layout_swin(std::span<const std::size_t> stages);
GroupLayout group_layout_custom(std::vector<std::size_t> sizes, std::size_t n_blocks);
// Parses "deit12", "swin:2,2,18,2", "uniform:4" or "4,4,4".
GroupLayout parse_group_layout(const std::string& spec, std::size_t n_blocks);

enum class GrowthStrategy { RandomGrowth, NeuronSplitting, Hybrid };

std::string to_string(GrowthStrategy g);
GrowthStrategy parse_growth_strategy(const std::string& s);

struct GrowthOptions {
  GrowthStrategy strategy = GrowthStrategy::Hybrid;
  double tau = 2.0;
  std::optional<double> random_std;  // RandomGrowth; He init on the grown rank by default
  std::uint64_t seed = 0;
};

struct GrownFactors {
  DenseMatrix u;  // d x (r + k)
  DenseMatrix v;  // (r + k) x M
};

// Adds k basis neurons. "Top" neurons are the rows of v with the largest L2
// norm, which after V = ΣV̂ are the largest singular values.
GrownFactors grow_basis(const DenseMatrix& u, const DenseMatrix& v, std::size_t k, const GrowthOptions& opts);

struct SharedInitOptions {
  bool use_scaling = false;
  bool allow_growth = true;
  GrowthOptions growth;
};

// Truncated SVD of the stack concatenated along p. Ranks above
// min(d, N·p) are reached through grow_basis.
SharedGroup shared_init(const LayerStack& stack, std::size_t rank, const SharedInitOptions& opts = {});

struct PairwiseShareMse {
  std::vector<double> mse_solo;
  std::vector<std::vector<double>> mse_shared;    // [i][j] = MSE of block i when sharing with j
  std::vector<std::vector<double>> mse_increase;  // verbatim (MSE_i - MSE_ij + MSE_j - MSE_ji) / 2
};

// Dense rank-`rank` decompositions of each block alone and of every pair
// sharing one basis.
PairwiseShareMse pairwise_share_mse(std::span<const LayerStack> blocks, std::size_t rank);

// Mean squared reconstruction error over all layers of a stack.
double stack_mse(const LayerStack& stack, const SharedGroup& group);

}  // namespace fips
