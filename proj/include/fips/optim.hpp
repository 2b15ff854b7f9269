#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fips/linalg.hpp"
#include "fips/model.hpp"
#include "fips/sharing.hpp"
#include "fips/sparse.hpp"
#include "fips/sparsifiers.hpp"

namespace fips {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// Decoupled-weight-decay Adam with bias correction. With a mask, inactive
// coordinates are held at 0 and their moments cleared, so a coordinate that
// becomes active again starts from fresh moments.
void adamw_step(AdamWState& state, const AdamWConfig& config, std::span<double> param, std::span<const double> grad,
                const Bitmask* mask = nullptr);

enum class OptimizerKind { AdamW, Sgd };
enum class LossMode { LinearEq1, MlpActivation };

std::string to_string(OptimizerKind k);
std::string to_string(LossMode m);
OptimizerKind parse_optimizer_kind(const std::string& s);
LossMode parse_loss_mode(const std::string& s);

// One parameter tensor's optimizer. Sgd applies param -= lr * grad.
class ParamOptimizer {
 public:
  ParamOptimizer() = default;
  ParamOptimizer(OptimizerKind kind, AdamWConfig config) : kind_(kind), config_(config) {}

  void step(std::span<double> param, std::span<const double> grad, const Bitmask* mask = nullptr);
  const AdamWState& state() const noexcept { return state_; }

 private:
  OptimizerKind kind_ = OptimizerKind::AdamW;
  AdamWConfig config_;
  AdamWState state_;
};

// W' = (U V) diag(s) in d x p orientation; `scaling` may be null.
struct FactorizedLayer {
  const DenseMatrix* u = nullptr;
  const DenseMatrix* v = nullptr;
  const std::vector<double>* scaling = nullptr;

  DenseMatrix materialize() const;
};

struct FactorGradient {
  DenseMatrix u;                // d x r
  DenseMatrix v;                // r x p, dense over all coordinates
  std::vector<double> scaling;  // empty without scaling
};

// Pulls dLoss/dW' back onto U, V and s.
FactorGradient chain_factor(const FactorizedLayer& layer, const DenseMatrix& grad_w);

struct LinearGradient {
  double loss = 0.0;
  FactorGradient grad;
};

// Mean over output entries of (x·W' - x·W)^2 for a layer stored as d x p
// (transposed = false, x is tokens x d) or as the transpose of a p x d layer
// (transposed = true, x is tokens x p and outputs are x·W'ᵀ).
LinearGradient grad_linear(const FactorizedLayer& layer, const DenseMatrix& target_w, const DenseMatrix& x,
                           bool transposed);

struct MlpGradient {
  double loss = 0.0;
  FactorGradient fc1;
  FactorGradient fc2;
  DenseMatrix input;  // dLoss/dx, tokens x d

  // dLoss/dU summed over both layers.
  DenseMatrix u_total() const { return fc1.u + fc2.u; }
};

// Mean over tokens x d of (f(W', x) - target)^2 with f the two-layer GELU MLP
// whose fc1 and fc2ᵀ are the factorized layers and biases come from `biases`.
// `target` defaults to the output of `original` on x.
MlpGradient grad_mlp(const MlpModule& original, const FactorizedLayer& fc1, const FactorizedLayer& fc2,
                     const DenseMatrix& x, Activation act = Activation::GeluTanh, const DenseMatrix* target = nullptr);

// Same as grad_mlp for an upstream gradient dLoss/dy instead of a target.
MlpGradient backprop_mlp(const std::vector<double>& b1, const std::vector<double>& b2, const FactorizedLayer& fc1,
                         const FactorizedLayer& fc2, const DenseMatrix& x, const DenseMatrix& grad_out, Activation act);

// Learning rates of the local stage per sparsifier.
double default_learning_rate(SparsifierKind kind);

struct TrainPlan {
  std::size_t steps = 0;  // 0: epochs * calibration batches
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::optional<double> learning_rate;  // default_learning_rate(sparsifier) when unset
  LossMode loss_mode = LossMode::MlpActivation;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double weight_decay = 0.0;
  bool train_scaling = true;
  std::size_t threads = 1;
  // Called after every completed step with the step number and the model.
  std::function<void(std::size_t, const CompressedModel&)> on_step;

  void validate() const;
  std::size_t resolved_steps(std::size_t num_batches) const;
  double resolved_learning_rate(SparsifierKind kind) const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step, CompressedModel last_good)
      : std::runtime_error(what), step_(step), last_good_(std::move(last_good)) {}
  std::size_t step() const noexcept { return step_; }
  const CompressedModel& last_good() const noexcept { return last_good_; }

 private:
  std::size_t step_;
  CompressedModel last_good_;
};

struct LocalReport {
  std::size_t steps = 0;
  double learning_rate = 0.0;
  LossMode loss_mode = LossMode::MlpActivation;
  std::vector<double> init_block_mse;         // dense SVD initialization
  std::vector<double> pruned_init_block_mse;  // SVD init pruned once to the target density
  std::vector<double> final_block_mse;
  std::vector<std::vector<double>> loss_trajectory;  // [step][block], batch losses
  std::vector<double> final_densities;               // per factor, model order
  std::vector<double> block_densities;               // per block, mean of its two factors

  static double mean(const std::vector<double>& v);
};

// Activation MSE of one block of the compressed model against the teacher
// output on the full calibration set.
double block_activation_mse(const CompressedModel& model, std::size_t block, const CalibrationSet& calib);
std::vector<double> block_activation_mses(const CompressedModel& model, const CalibrationSet& calib);

// Local error minimization over every group of `model`. Per step: the
// sparsifier fires (GMP every delta_t steps and at the last step; RigL every
// delta_t steps before the last), then for each group every block's V slices
// are updated from its own loss while dLoss/dU is accumulated in block order;
// U is updated once per step with the accumulator divided by the group's
// block count. Global scope ranks all factors of all groups together.
LocalReport local_error_minimize(CompressedModel& model, const ToyModel& original, const CalibrationSet& calib,
                                 const TrainPlan& plan, const SparsifierConfig& sparsifier);

// Single-group form; the group's blocks are derived from its member ids.
LocalReport local_error_minimize(SharedGroup& group, const ToyModel& original, const CalibrationSet& calib,
                                 const TrainPlan& plan, const SparsifierConfig& sparsifier);

struct FinetuneReport {
  std::vector<double> loss_trajectory;
  std::vector<double> window_means;  // mean loss per 100-step window
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::size_t> active_counts_before;
  std::vector<std::size_t> active_counts_after;
};

// End-to-end regression of the compressed stack's output onto `targets`,
// with RigL mask updates (per factor) every delta_t steps.
FinetuneReport global_finetune(CompressedModel& model, const DenseMatrix& inputs, const DenseMatrix& targets,
                               const TrainPlan& plan, const SparsifierConfig& rigl);

double model_mse(const CompressedModel& model, const DenseMatrix& inputs, const DenseMatrix& targets);

}  // namespace fips
