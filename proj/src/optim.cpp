#include "fips/optim.hpp"

#include "fips/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fips {

void adamw_step(AdamWState& state, const AdamWConfig& config, std::span<double> param, std::span<const double> grad,
                const Bitmask* mask) {
  if (param.size() != grad.size()) throw ShapeError("adamw_step: parameter and gradient sizes differ");
  if (mask && mask->size() != param.size()) throw ShapeError("adamw_step: mask size differs from parameter");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  } else if (state.m.size() != param.size()) {
    throw ShapeError("adamw_step: optimizer state shaped for a different parameter");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double lr = config.learning_rate;
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (mask && !(*mask)[i]) {
      param[i] = 0.0;
      state.m[i] = 0.0;
      state.v[i] = 0.0;
      continue;
    }
    const double g = grad[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= lr * config.weight_decay * param[i];
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }
std::string to_string(LossMode m) { return m == LossMode::LinearEq1 ? "eq1" : "mlp"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

LossMode parse_loss_mode(const std::string& s) {
  if (s == "eq1" || s == "linear") return LossMode::LinearEq1;
  if (s == "mlp") return LossMode::MlpActivation;
  throw std::invalid_argument("unknown loss mode '" + s + "'");
}

void ParamOptimizer::step(std::span<double> param, std::span<const double> grad, const Bitmask* mask) {
  if (kind_ == OptimizerKind::AdamW) {
    adamw_step(state_, config_, param, grad, mask);
    return;
  }
  if (param.size() != grad.size()) throw ShapeError("sgd step: parameter and gradient sizes differ");
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (mask && !(*mask)[i]) {
      param[i] = 0.0;
      continue;
    }
    param[i] -= config_.learning_rate * (grad[i] + config_.weight_decay * param[i]);
  }
}

DenseMatrix FactorizedLayer::materialize() const {
  DenseMatrix w = matmul(*u, *v);
  if (scaling) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      auto row = w.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] *= (*scaling)[c];
    }
  }
  return w;
}

FactorGradient chain_factor(const FactorizedLayer& layer, const DenseMatrix& grad_w) {
  const DenseMatrix& u = *layer.u;
  const DenseMatrix& v = *layer.v;
  if (grad_w.rows() != u.rows() || grad_w.cols() != v.cols()) {
    throw ShapeError("chain_factor: gradient " + shape_str(grad_w) + " vs layer " + std::to_string(u.rows()) + "x" +
                     std::to_string(v.cols()));
  }
  FactorGradient g;
  DenseMatrix grad_m = grad_w;
  if (layer.scaling) {
    const auto& s = *layer.scaling;
    const DenseMatrix m = matmul(u, v);
    g.scaling.assign(s.size(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        g.scaling[c] += m(r, c) * grad_w(r, c);
        grad_m(r, c) *= s[c];
      }
    }
  }
  g.u = matmul_nt(grad_m, v);
  g.v = matmul_tn(u, grad_m);
  return g;
}

LinearGradient grad_linear(const FactorizedLayer& layer, const DenseMatrix& target_w, const DenseMatrix& x,
                           bool transposed) {
  const DenseMatrix w = layer.materialize();
  require_same_shape(w, target_w, "grad_linear");
  const std::size_t width = transposed ? w.cols() : w.rows();
  if (x.cols() != width) throw ShapeError("grad_linear: input " + shape_str(x) + " vs layer " + shape_str(w));
  DenseMatrix residual = transposed ? matmul_nt(x, w - target_w) : matmul(x, w - target_w);
  LinearGradient out;
  const double count = static_cast<double>(residual.size());
  double acc = 0.0;
  for (double r : residual.data()) acc += r * r;
  out.loss = acc / count;
  residual *= 2.0 / count;
  const DenseMatrix grad_w = transposed ? matmul_tn(residual, x) : matmul_tn(x, residual);
  out.grad = chain_factor(layer, grad_w);
  return out;
}

MlpGradient backprop_mlp(const std::vector<double>& b1, const std::vector<double>& b2, const FactorizedLayer& fc1,
                         const FactorizedLayer& fc2, const DenseMatrix& x, const DenseMatrix& grad_out, Activation act) {
  const DenseMatrix w1 = fc1.materialize();
  const DenseMatrix w2t = fc2.materialize();
  if (x.cols() != w1.rows()) throw ShapeError("backprop_mlp: input " + shape_str(x) + " vs fc1 " + shape_str(w1));
  DenseMatrix pre = matmul(x, w1);
  DenseMatrix hidden(pre.rows(), pre.cols());
  for (std::size_t r = 0; r < pre.rows(); ++r) {
    for (std::size_t c = 0; c < pre.cols(); ++c) {
      pre(r, c) += b1[c];
      hidden(r, c) = gelu(pre(r, c), act);
    }
  }
  (void)b2;
  MlpGradient out;
  DenseMatrix grad_hidden = matmul(grad_out, w2t);
  for (std::size_t r = 0; r < pre.rows(); ++r)
    for (std::size_t c = 0; c < pre.cols(); ++c) grad_hidden(r, c) *= gelu_derivative(pre(r, c), act);
  out.fc2 = chain_factor(fc2, matmul_tn(grad_out, hidden));
  out.fc1 = chain_factor(fc1, matmul_tn(x, grad_hidden));
  out.input = matmul_nt(grad_hidden, w1);
  return out;
}

namespace {

DenseMatrix compressed_block_forward(const std::vector<double>& b1, const std::vector<double>& b2, const DenseMatrix& w1,
                                     const DenseMatrix& w2t, const DenseMatrix& x, Activation act) {
  DenseMatrix h = matmul(x, w1);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto row = h.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = gelu(row[c] + b1[c], act);
  }
  DenseMatrix y = matmul_nt(h, w2t);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b2[c];
  }
  return y;
}

}  // namespace

MlpGradient grad_mlp(const MlpModule& original, const FactorizedLayer& fc1, const FactorizedLayer& fc2,
                     const DenseMatrix& x, Activation act, const DenseMatrix* target) {
  original.validate();
  DenseMatrix reference;
  if (!target) {
    reference = mlp_forward(original, x, act);
    target = &reference;
  }
  const DenseMatrix y =
      compressed_block_forward(original.b1, original.b2, fc1.materialize(), fc2.materialize(), x, act);
  require_same_shape(y, *target, "grad_mlp");
  DenseMatrix residual = y - *target;
  const double count = static_cast<double>(residual.size());
  double acc = 0.0;
  for (double r : residual.data()) acc += r * r;
  residual *= 2.0 / count;
  MlpGradient out = backprop_mlp(original.b1, original.b2, fc1, fc2, x, residual, act);
  out.loss = acc / count;
  return out;
}

double default_learning_rate(SparsifierKind kind) {
  switch (kind) {
    case SparsifierKind::Dense: return 1.25e-4;
    case SparsifierKind::Static: return 2.5e-4;
    case SparsifierKind::GMP: return 1e-3;
    case SparsifierKind::RigL: return 1e-3;
  }
  return 1e-3;
}

void TrainPlan::validate() const {
  if (steps == 0 && epochs == 0) throw std::invalid_argument("train plan: steps or epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train plan: batch size must be positive");
  if (learning_rate && !(*learning_rate >= 0.0 && std::isfinite(*learning_rate))) {
    throw std::invalid_argument("train plan: learning rate must be finite and >= 0");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("train plan: weight decay must be >= 0");
  if (threads == 0) throw std::invalid_argument("train plan: threads must be >= 1");
}

std::size_t TrainPlan::resolved_steps(std::size_t num_batches) const {
  return steps != 0 ? steps : epochs * std::max<std::size_t>(num_batches, 1);
}

double TrainPlan::resolved_learning_rate(SparsifierKind kind) const {
  return learning_rate.value_or(default_learning_rate(kind));
}

double LocalReport::mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double block_activation_mse(const CompressedModel& model, std::size_t block, const CalibrationSet& calib) {
  const auto [g, j] = model.locate(block);
  const SharedGroup& grp = model.groups[g];
  const DenseMatrix w1 = reconstruct_oriented(grp, 2 * j);
  const DenseMatrix w2t = reconstruct_oriented(grp, 2 * j + 1);
  const DenseMatrix y =
      compressed_block_forward(model.b1[block], model.b2[block], w1, w2t, calib.inputs_per_block.at(block), model.activation);
  return frobenius_mse(y, calib.outputs_per_block.at(block));
}

std::vector<double> block_activation_mses(const CompressedModel& model, const CalibrationSet& calib) {
  std::vector<double> out;
  for (std::size_t b = 0; b < model.n_blocks(); ++b) out.push_back(block_activation_mse(model, b, calib));
  return out;
}

namespace {

struct BlockGradient {
  double loss = 0.0;
  FactorGradient fc1;
  FactorGradient fc2;
};

struct BatchView {
  DenseMatrix x, hidden, output;
};

// Per-block state shared by the local stage.
struct BlockSlot {
  std::size_t block = 0;  // model block index
  std::size_t group = 0;
  std::size_t local = 0;  // position inside the group
  DenseMatrix fc2t;       // original fc2 transposed, for the linear loss
};

BlockGradient block_gradient(const CompressedModel& model, const ToyModel& original, const BlockSlot& slot,
                             const BatchView& batch, LossMode mode) {
  const SharedGroup& grp = model.groups[slot.group];
  const auto& f1 = grp.factors[2 * slot.local];
  const auto& f2 = grp.factors[2 * slot.local + 1];
  const FactorizedLayer l1{&grp.u, &f1.values(), grp.has_scaling() ? &grp.scaling[2 * slot.local] : nullptr};
  const FactorizedLayer l2{&grp.u, &f2.values(), grp.has_scaling() ? &grp.scaling[2 * slot.local + 1] : nullptr};
  const MlpModule& orig = original.blocks[slot.block];
  BlockGradient out;
  if (mode == LossMode::LinearEq1) {
    auto g1 = grad_linear(l1, orig.w_fc1, batch.x, false);
    auto g2 = grad_linear(l2, slot.fc2t, batch.hidden, true);
    out.loss = g1.loss + g2.loss;
    out.fc1 = std::move(g1.grad);
    out.fc2 = std::move(g2.grad);
  } else {
    auto g = grad_mlp(orig, l1, l2, batch.x, model.activation, &batch.output);
    out.loss = g.loss;
    out.fc1 = std::move(g.fc1);
    out.fc2 = std::move(g.fc2);
  }
  return out;
}

BatchView slice_batch(const CalibrationSet& calib, std::size_t block, std::size_t batch_index, std::size_t batch_size) {
  const std::size_t n = calib.tokens();
  const std::size_t begin = (batch_index * batch_size) % n;
  const std::size_t count = std::min(batch_size, n - begin);
  return {calib.inputs_per_block[block].row_block(begin, count), calib.hidden_per_block[block].row_block(begin, count),
          calib.outputs_per_block[block].row_block(begin, count)};
}

void clamp_scaling(std::vector<double>& s) {
  for (auto& x : s) x = std::max(x, 1e-8);
}

std::vector<MaskedMatrix*> factor_pointers(std::vector<SharedGroup*>& groups) {
  std::vector<MaskedMatrix*> out;
  for (auto* g : groups)
    for (auto& f : g->factors) out.push_back(&f);
  return out;
}

LocalReport run_local(CompressedModel& model, std::vector<std::size_t> group_ids, const ToyModel& original,
                      const CalibrationSet& calib, const TrainPlan& plan, const SparsifierConfig& sparsifier) {
  plan.validate();
  sparsifier.validate();
  original.validate();
  if (calib.inputs_per_block.size() != original.n_blocks() || calib.tokens() == 0) {
    throw std::invalid_argument("local_error_minimize: calibration does not match the original model");
  }
  const std::size_t num_batches = (calib.tokens() + plan.batch_size - 1) / plan.batch_size;
  const std::size_t total_steps = plan.resolved_steps(num_batches);
  const double lr = plan.resolved_learning_rate(sparsifier.kind);

  std::vector<SharedGroup*> groups;
  std::vector<BlockSlot> slots;
  for (auto g : group_ids) {
    groups.push_back(&model.groups[g]);
    const auto offsets = model.layout.offsets();
    for (std::size_t j = 0; j < model.layout.group_sizes[g]; ++j) {
      const std::size_t block = offsets[g] + j;
      slots.push_back({block, g, j, transpose(original.blocks[block].w_fc2)});
    }
  }
  std::vector<MaskedMatrix*> factors = factor_pointers(groups);

  LocalReport report;
  report.steps = total_steps;
  report.learning_rate = lr;
  report.loss_mode = plan.loss_mode;
  auto eval_blocks = [&](const CompressedModel& m) {
    std::vector<double> out;
    for (const auto& s : slots) out.push_back(block_activation_mse(m, s.block, calib));
    return out;
  };
  report.init_block_mse = eval_blocks(model);
  if (sparsifier.kind == SparsifierKind::Dense) {
    report.pruned_init_block_mse = report.init_block_mse;
  } else {
    CompressedModel pruned = model;
    std::vector<MaskedMatrix*> pf;
    for (auto g : group_ids)
      for (auto& f : pruned.groups[g].factors) pf.push_back(&f);
    SparsifierConfig once = sparsifier;
    once.kind = SparsifierKind::Static;
    static_init(pf, once);
    report.pruned_init_block_mse = eval_blocks(pruned);
  }

  initial_masks(factors, sparsifier);

  const AdamWConfig adam{lr, 0.9, 0.999, 1e-8, plan.weight_decay};
  std::vector<ParamOptimizer> u_opt(groups.size(), ParamOptimizer(plan.optimizer, adam));
  std::vector<ParamOptimizer> v_opt(factors.size(), ParamOptimizer(plan.optimizer, adam));
  std::vector<ParamOptimizer> s_opt(factors.size(), ParamOptimizer(plan.optimizer, adam));
  // factor index of the first layer of every selected group
  std::vector<std::size_t> factor_base;
  for (std::size_t gi = 0, at = 0; gi < groups.size(); ++gi) {
    factor_base.push_back(at);
    at += groups[gi]->size();
  }

  CompressedModel last_good = model;
  std::vector<BlockGradient> grads(slots.size());
  for (std::size_t t = 1; t <= total_steps; ++t) {
    const bool fire = t % sparsifier.delta_t == 0;
    if (sparsifier.kind == SparsifierKind::GMP && (fire || t == total_steps)) {
      gmp_step(factors, t, total_steps, sparsifier);
    }
    const std::size_t batch_index = (t - 1) % num_batches;
    parallel_for(slots.size(), plan.threads, [&](std::size_t i) {
      const BatchView batch = slice_batch(calib, slots[i].block, batch_index, plan.batch_size);
      grads[i] = block_gradient(model, original, slots[i], batch, plan.loss_mode);
    });

    std::vector<double> step_losses;
    std::size_t slot_at = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      SharedGroup& grp = *groups[gi];
      const std::size_t n_blocks = grp.size() / 2;
      DenseMatrix grad_u(grp.u.rows(), grp.u.cols());
      for (std::size_t j = 0; j < n_blocks; ++j, ++slot_at) {
        BlockGradient& bg = grads[slot_at];
        step_losses.push_back(bg.loss);
        if (!std::isfinite(bg.loss)) {
          throw DivergenceError("local_error_minimize: non-finite loss at step " + std::to_string(t) + ", block " +
                                    std::to_string(slots[slot_at].block),
                                t, std::move(last_good));
        }
        FactorGradient* layer_grads[2] = {&bg.fc1, &bg.fc2};
        for (std::size_t k = 0; k < 2; ++k) {
          const std::size_t li = 2 * j + k;
          const std::size_t fi = factor_base[gi] + li;
          MaskedMatrix& f = grp.factors[li];
          if (sparsifier.kind == SparsifierKind::RigL && fire && t < total_steps) {
            rigl_step(f, layer_grads[k]->v, sparsifier.rigl_prune_ratio);
          }
          v_opt[fi].step(f.mutable_values().data(), layer_grads[k]->v.data(), &f.mask());
          if (grp.has_scaling() && plan.train_scaling) {
            s_opt[fi].step(grp.scaling[li], layer_grads[k]->scaling);
            clamp_scaling(grp.scaling[li]);
          }
          grad_u += layer_grads[k]->u;
        }
      }
      grad_u *= 1.0 / static_cast<double>(n_blocks);
      u_opt[gi].step(grp.u.data(), grad_u.data());
    }
    report.loss_trajectory.push_back(std::move(step_losses));
    if (!model.groups.empty() && !std::all_of(groups.begin(), groups.end(), [](const SharedGroup* g) { return g->u.all_finite(); })) {
      throw DivergenceError("local_error_minimize: non-finite U at step " + std::to_string(t), t, std::move(last_good));
    }
    last_good = model;
    if (plan.on_step) plan.on_step(t, model);
  }

  report.final_block_mse = eval_blocks(model);
  for (auto* f : factors) report.final_densities.push_back(f->density());
  for (const auto& s : slots) {
    const auto& grp = model.groups[s.group];
    report.block_densities.push_back(0.5 * (grp.factors[2 * s.local].density() + grp.factors[2 * s.local + 1].density()));
  }
  return report;
}

}  // namespace

LocalReport local_error_minimize(CompressedModel& model, const ToyModel& original, const CalibrationSet& calib,
                                 const TrainPlan& plan, const SparsifierConfig& sparsifier) {
  model.validate();
  std::vector<std::size_t> ids(model.groups.size());
  std::iota(ids.begin(), ids.end(), 0);
  return run_local(model, std::move(ids), original, calib, plan, sparsifier);
}

LocalReport local_error_minimize(SharedGroup& group, const ToyModel& original, const CalibrationSet& calib,
                                 const TrainPlan& plan, const SparsifierConfig& sparsifier) {
  group.validate();
  if (group.size() % 2 != 0) throw std::invalid_argument("local_error_minimize: group must hold fc1/fc2 pairs");
  // Wrap the group as a one-group model over the blocks it covers.
  std::vector<std::size_t> blocks;
  for (std::size_t i = 0; i < group.size(); i += 2) {
    const std::size_t id = group.member_ids[i];
    if (id % 2 != 0 || group.member_ids[i + 1] != id + 1) {
      throw std::invalid_argument("local_error_minimize: member ids must be consecutive fc1/fc2 pairs");
    }
    blocks.push_back(id / 2);
  }
  ToyModel sub;
  sub.activation = original.activation;
  CalibrationSet sub_calib;
  sub_calib.batch_size = calib.batch_size;
  sub_calib.num_batches = calib.num_batches;
  CompressedModel model;
  model.d = group.d();
  model.p = group.p();
  model.activation = original.activation;
  model.layout.group_sizes = {blocks.size()};
  for (auto b : blocks) {
    const auto& m = original.blocks.at(b);
    sub.blocks.push_back(m);
    sub_calib.inputs_per_block.push_back(calib.inputs_per_block.at(b));
    sub_calib.hidden_per_block.push_back(calib.hidden_per_block.at(b));
    sub_calib.outputs_per_block.push_back(calib.outputs_per_block.at(b));
    model.b1.push_back(m.b1);
    model.b2.push_back(m.b2);
  }
  model.groups.push_back(std::move(group));
  try {
    LocalReport report = run_local(model, {0}, sub, sub_calib, plan, sparsifier);
    group = std::move(model.groups.front());
    return report;
  } catch (...) {
    group = std::move(model.groups.front());
    throw;
  }
}

double model_mse(const CompressedModel& model, const DenseMatrix& inputs, const DenseMatrix& targets) {
  return frobenius_mse(model.forward(inputs), targets);
}

FinetuneReport global_finetune(CompressedModel& model, const DenseMatrix& inputs, const DenseMatrix& targets,
                               const TrainPlan& plan, const SparsifierConfig& rigl) {
  model.validate();
  plan.validate();
  rigl.validate();
  if (inputs.rows() != targets.rows() || inputs.cols() != model.d) {
    throw ShapeError("global_finetune: inputs " + shape_str(inputs) + " / targets " + shape_str(targets));
  }
  if (model.head) throw std::invalid_argument("global_finetune: models with a head are not supported");
  require_same_shape(inputs, targets, "global_finetune");

  const std::size_t num_batches = (inputs.rows() + plan.batch_size - 1) / plan.batch_size;
  const std::size_t total_steps = plan.steps;
  const double lr = plan.resolved_learning_rate(SparsifierKind::RigL);
  const AdamWConfig adam{lr, 0.9, 0.999, 1e-8, plan.weight_decay};

  std::vector<MaskedMatrix*> factors = model.all_factors();
  FinetuneReport report;
  for (auto* f : factors) report.active_counts_before.push_back(f->active_count());
  report.initial_loss = model_mse(model, inputs, targets);

  std::vector<ParamOptimizer> u_opt(model.groups.size(), ParamOptimizer(plan.optimizer, adam));
  std::vector<ParamOptimizer> v_opt(factors.size(), ParamOptimizer(plan.optimizer, adam));
  std::vector<ParamOptimizer> s_opt(factors.size(), ParamOptimizer(plan.optimizer, adam));
  const bool use_rigl = rigl.kind == SparsifierKind::RigL;

  CompressedModel last_good = model;
  double window_acc = 0.0;
  std::size_t window_len = 0;
  for (std::size_t t = 1; t <= total_steps; ++t) {
    const std::size_t batch = (t - 1) % num_batches;
    const std::size_t begin = batch * plan.batch_size;
    const std::size_t count = std::min(plan.batch_size, inputs.rows() - begin);
    DenseMatrix x = inputs.row_block(begin, count);
    const DenseMatrix y = targets.row_block(begin, count);

    // forward, keeping each block's input
    const std::size_t n_blocks = model.n_blocks();
    std::vector<DenseMatrix> block_inputs;
    std::vector<std::pair<DenseMatrix, DenseMatrix>> weights;
    for (std::size_t b = 0; b < n_blocks; ++b) {
      const auto [g, j] = model.locate(b);
      weights.emplace_back(reconstruct_oriented(model.groups[g], 2 * j), reconstruct_oriented(model.groups[g], 2 * j + 1));
      block_inputs.push_back(x);
      x += compressed_block_forward(model.b1[b], model.b2[b], weights[b].first, weights[b].second, x, model.activation);
    }
    DenseMatrix grad = x - y;
    double loss = 0.0;
    for (double r : grad.data()) loss += r * r;
    loss /= static_cast<double>(grad.size());
    if (!std::isfinite(loss)) {
      throw DivergenceError("global_finetune: non-finite loss at step " + std::to_string(t), t, std::move(last_good));
    }
    report.loss_trajectory.push_back(loss);
    window_acc += loss;
    if (++window_len == 100) {
      report.window_means.push_back(window_acc / 100.0);
      window_acc = 0.0;
      window_len = 0;
    }
    grad *= 2.0 / static_cast<double>(grad.size());

    // backward through x_{b+1} = x_b + f_b(x_b)
    std::vector<DenseMatrix> grad_u;
    for (const auto& g : model.groups) grad_u.emplace_back(g.u.rows(), g.u.cols());
    std::vector<FactorGradient> layer_grads(factors.size());
    for (std::size_t b = n_blocks; b-- > 0;) {
      const auto [g, j] = model.locate(b);
      SharedGroup& grp = model.groups[g];
      const FactorizedLayer l1{&grp.u, &grp.factors[2 * j].values(), grp.has_scaling() ? &grp.scaling[2 * j] : nullptr};
      const FactorizedLayer l2{&grp.u, &grp.factors[2 * j + 1].values(),
                               grp.has_scaling() ? &grp.scaling[2 * j + 1] : nullptr};
      MlpGradient mg = backprop_mlp(model.b1[b], model.b2[b], l1, l2, block_inputs[b], grad, model.activation);
      grad_u[g] += mg.fc1.u;
      grad_u[g] += mg.fc2.u;
      std::size_t base = 0;
      for (std::size_t k = 0; k < g; ++k) base += model.groups[k].size();
      layer_grads[base + 2 * j] = std::move(mg.fc1);
      layer_grads[base + 2 * j + 1] = std::move(mg.fc2);
      grad += mg.input;
    }

    const bool fire = use_rigl && t % rigl.delta_t == 0 && t < total_steps;
    std::size_t fi = 0;
    for (std::size_t g = 0; g < model.groups.size(); ++g) {
      SharedGroup& grp = model.groups[g];
      for (std::size_t li = 0; li < grp.size(); ++li, ++fi) {
        MaskedMatrix& f = grp.factors[li];
        if (fire) rigl_step(f, layer_grads[fi].v, rigl.rigl_prune_ratio);
        v_opt[fi].step(f.mutable_values().data(), layer_grads[fi].v.data(), &f.mask());
        if (grp.has_scaling() && plan.train_scaling) {
          s_opt[fi].step(grp.scaling[li], layer_grads[fi].scaling);
          clamp_scaling(grp.scaling[li]);
        }
      }
      u_opt[g].step(grp.u.data(), grad_u[g].data());
    }
    last_good = model;
    if (plan.on_step) plan.on_step(t, model);
  }
  if (window_len > 0) report.window_means.push_back(window_acc / static_cast<double>(window_len));
  report.final_loss = model_mse(model, inputs, targets);
  for (auto* f : factors) report.active_counts_after.push_back(f->active_count());
  return report;
}

}  // namespace fips
