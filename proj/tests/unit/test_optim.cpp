#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "fips/optim.hpp"

using namespace fips;

namespace {

double linear_loss(const DenseMatrix& u, const DenseMatrix& v, const DenseMatrix& target, const DenseMatrix& x,
                   bool transposed) {
  const DenseMatrix w = oracle::naive_matmul(u, v);
  if (!transposed) return oracle::mse(oracle::naive_matmul(x, w), oracle::naive_matmul(x, target));
  return oracle::mse(oracle::naive_matmul(x, oracle::naive_transpose(w)),
                     oracle::naive_matmul(x, oracle::naive_transpose(target)));
}

struct Fixture {
  ToyModel model;
  CalibrationSet calib;
  CompressedModel compressed;
};

Fixture small_fixture(std::size_t rank, std::size_t batches = 1, std::size_t blocks = 2) {
  Fixture f;
  f.model = gen_toy_model(71, 6, 12, blocks, Spectrum::flat());
  f.calib = collect_calibration(f.model, make_calibration_inputs(72, batches, 16, 6), 16);
  f.compressed = compress_init(f.model, parse_group_layout(std::to_string(blocks), blocks), rank);
  return f;
}

TrainPlan sgd_plan(double lr, std::size_t steps, LossMode mode) {
  TrainPlan plan;
  plan.steps = steps;
  plan.batch_size = 16;
  plan.learning_rate = lr;
  plan.optimizer = OptimizerKind::Sgd;
  plan.loss_mode = mode;
  return plan;
}

SparsifierConfig dense_cfg() {
  SparsifierConfig c;
  c.kind = SparsifierKind::Dense;
  c.target_density = 1.0;
  return c;
}

}  // namespace

TEST_CASE("adamw_step: zero gradient, scalar trace and mask contract") {
  AdamWState st;
  AdamWConfig cfg;
  std::vector<double> p = {1.5, -2.0};
  const std::vector<double> zero = {0.0, 0.0};
  adamw_step(st, cfg, p, zero);
  CHECK(p == std::vector<double>{1.5, -2.0});

  // reference recurrence with decay 0.01
  AdamWConfig c2{0.1, 0.9, 0.999, 1e-8, 0.01};
  AdamWState s2;
  std::vector<double> x = {1.0};
  long double ref = 1.0L, m = 0.0L, v = 0.0L;
  for (int t = 1; t <= 10; ++t) {
    const double g = 2.0 * x[0] - 0.5 * t;
    const long double gr = 2.0L * ref - 0.5L * t;
    adamw_step(s2, c2, x, std::vector<double>{g});
    m = 0.9L * m + 0.1L * gr;
    v = 0.999L * v + 0.001L * gr * gr;
    const long double mh = m / (1.0L - std::pow(0.9L, t)), vh = v / (1.0L - std::pow(0.999L, t));
    ref -= 0.1L * 0.01L * ref;
    ref -= 0.1L * mh / (std::sqrt(vh) + 1e-8L);
    CHECK(std::abs(x[0] - static_cast<double>(ref)) < 1e-12);
  }

  Bitmask mask(1, 3, true);
  mask.set(1, false);
  AdamWState s3;
  std::vector<double> q = {1.0, 0.0, -1.0};
  std::mt19937_64 gen(73);
  for (int t = 0; t < 100; ++t) {
    const DenseMatrix g = oracle::random_matrix(gen, 1, 3);
    adamw_step(s3, cfg, q, g.data(), &mask);
    CHECK(q[1] == 0.0);
  }
  CHECK(s3.m[1] == 0.0);
  CHECK(s3.v[1] == 0.0);
  CHECK_THROWS_AS(adamw_step(s3, cfg, q, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("ParamOptimizer: sgd step") {
  ParamOptimizer sgd(OptimizerKind::Sgd, AdamWConfig{0.5, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> p = {1.0, 2.0};
  sgd.step(p, std::vector<double>{2.0, -2.0});
  CHECK(p == std::vector<double>{0.0, 3.0});
}

TEST_CASE("grad_linear: zero residual and finite differences in both orientations") {
  std::mt19937_64 gen(74);
  DenseMatrix u = oracle::random_matrix(gen, 2, 2), v = oracle::random_matrix(gen, 2, 2);
  const DenseMatrix x = oracle::random_matrix(gen, 5, 2);
  const FactorizedLayer layer{&u, &v, nullptr};
  const auto exact = grad_linear(layer, oracle::naive_matmul(u, v), x, false);
  CHECK(exact.loss < 1e-28);
  CHECK(oracle::fro(exact.grad.u) < 1e-14);
  CHECK(oracle::fro(exact.grad.v) < 1e-14);

  for (bool transposed : {false, true}) {
    DenseMatrix uu = oracle::random_matrix(gen, 3, 2), vv = oracle::random_matrix(gen, 2, 4);
    const DenseMatrix target = oracle::random_matrix(gen, 3, 4);
    const DenseMatrix xx = oracle::random_matrix(gen, 7, transposed ? 4 : 3);
    const FactorizedLayer l{&uu, &vv, nullptr};
    const auto g = grad_linear(l, target, xx, transposed);
    CHECK(std::abs(g.loss - linear_loss(uu, vv, target, xx, transposed)) < 1e-12);
    const auto f = [&] { return linear_loss(uu, vv, target, xx, transposed); };
    CHECK(oracle::relative_error(g.grad.u, oracle::finite_difference(uu, f)) < 1e-6);
    CHECK(oracle::relative_error(g.grad.v, oracle::finite_difference(vv, f)) < 1e-6);
  }
}

TEST_CASE("grad_mlp: zero at the original, finite differences and U linearity") {
  const ToyModel model = gen_toy_model(75, 4, 8, 1, Spectrum::flat());
  const MlpModule& m = model.blocks[0];
  const DenseMatrix x = make_calibration_inputs(76, 1, 6, 4);

  DenseMatrix id = DenseMatrix::identity(4);
  DenseMatrix v1 = m.w_fc1, v2 = transpose(m.w_fc2);
  const auto zero = grad_mlp(m, {&id, &v1, nullptr}, {&id, &v2, nullptr}, x);
  CHECK(zero.loss < 1e-28);
  CHECK(oracle::fro(zero.u_total()) < 1e-14);
  CHECK(oracle::fro(zero.fc1.v) < 1e-14);

  std::mt19937_64 gen(77);
  DenseMatrix u = oracle::random_matrix(gen, 4, 3, 0.5);
  DenseMatrix a = oracle::random_matrix(gen, 3, 8, 0.5), b = oracle::random_matrix(gen, 3, 8, 0.5);
  std::vector<double> s1(8), s2(8);
  std::uniform_real_distribution<double> pos(0.5, 1.5);
  for (auto& s : s1) s = pos(gen);
  for (auto& s : s2) s = pos(gen);
  const auto loss = [&] {
    DenseMatrix w1 = oracle::naive_matmul(u, a), w2t = oracle::naive_matmul(u, b);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        w1(r, c) *= s1[c];
        w2t(r, c) *= s2[c];
      }
    const DenseMatrix y = oracle::mlp(x, w1, m.b1, oracle::naive_transpose(w2t), m.b2);
    return oracle::mse(y, oracle::mlp(x, m.w_fc1, m.b1, m.w_fc2, m.b2));
  };
  const auto g = grad_mlp(m, {&u, &a, &s1}, {&u, &b, &s2}, x);
  CHECK(std::abs(g.loss - loss()) < 1e-12);
  CHECK(oracle::relative_error(g.u_total(), oracle::finite_difference(u, loss)) < 1e-4);
  CHECK(oracle::relative_error(g.fc1.v, oracle::finite_difference(a, loss)) < 1e-4);
  CHECK(oracle::relative_error(g.fc2.v, oracle::finite_difference(b, loss)) < 1e-4);
  DenseMatrix s1m(1, 8, s1), fd_s(1, 8);
  const auto loss_s = [&] {
    for (std::size_t c = 0; c < 8; ++c) s1[c] = s1m(0, c);
    return loss();
  };
  fd_s = oracle::finite_difference(s1m, loss_s);
  loss_s();
  CHECK(oracle::relative_error(DenseMatrix(1, 8, g.fc1.scaling), fd_s) < 1e-4);

  const auto g1 = grad_mlp(m, {&u, &a, nullptr}, {&u, &b, nullptr}, x);
  CHECK(oracle::max_abs_diff(g1.u_total(), g1.fc1.u + g1.fc2.u) == 0.0);
}

TEST_CASE("local_error_minimize: single SGD step matches a finite-difference oracle") {
  Fixture f = small_fixture(4);
  const SharedGroup before = f.compressed.groups[0];
  const double lr = 0.05;
  local_error_minimize(f.compressed, f.model, f.calib, sgd_plan(lr, 1, LossMode::LinearEq1), dense_cfg());
  const SharedGroup& after = f.compressed.groups[0];

  DenseMatrix u = before.u;
  const auto total = [&] {
    double acc = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
      acc += linear_loss(u, before.factors[2 * b].values(), f.model.blocks[b].w_fc1, f.calib.inputs_per_block[b], false);
      acc += linear_loss(u, before.factors[2 * b + 1].values(), transpose(f.model.blocks[b].w_fc2),
                         f.calib.hidden_per_block[b], true);
    }
    return acc;
  };
  DenseMatrix want_u = oracle::finite_difference(u, total);
  want_u *= -lr / 2.0;
  want_u += before.u;
  CHECK(oracle::max_abs_diff(after.u, want_u) < 1e-8);

  DenseMatrix v = before.factors[0].values();
  const auto l0 = [&] { return linear_loss(before.u, v, f.model.blocks[0].w_fc1, f.calib.inputs_per_block[0], false); };
  DenseMatrix want_v = oracle::finite_difference(v, l0);
  want_v *= -lr;
  want_v += before.factors[0].values();
  CHECK(oracle::max_abs_diff(after.factors[0].values(), want_v) < 1e-8);
}

TEST_CASE("local_error_minimize: exact init, zero learning rate and eq1 descent") {
  Fixture exact = small_fixture(6, 1, 1);
  const auto rep = local_error_minimize(exact.compressed, exact.model, exact.calib,
                                        sgd_plan(0.01, 0, LossMode::MlpActivation), dense_cfg());
  CHECK(rep.init_block_mse[0] < 1e-10);
  CHECK(rep.final_block_mse[0] < 1e-10);

  Fixture f = small_fixture(4, 2);
  const CompressedModel init = f.compressed;
  SparsifierConfig gmp;
  gmp.delta_t = 2;
  TrainPlan zero = sgd_plan(0.0, 6, LossMode::MlpActivation);
  zero.optimizer = OptimizerKind::AdamW;
  local_error_minimize(f.compressed, f.model, f.calib, zero, gmp);
  CHECK(f.compressed.groups[0].u == init.groups[0].u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& now = f.compressed.groups[0].factors[i];
    const MaskedMatrix expect(init.groups[0].factors[i].values(), now.mask());
    CHECK(now == expect);
    CHECK(now.density() == doctest::Approx(0.25).epsilon(0.05));
  }

  Fixture d = small_fixture(3);
  const auto eq1 = local_error_minimize(d.compressed, d.model, d.calib, sgd_plan(0.02, 30, LossMode::LinearEq1), dense_cfg());
  for (std::size_t t = 1; t < eq1.loss_trajectory.size(); ++t)
    CHECK(LocalReport::mean(eq1.loss_trajectory[t]) <= LocalReport::mean(eq1.loss_trajectory[t - 1]));
}

TEST_CASE("local_error_minimize: mask invariants and thread determinism") {
  Fixture a = small_fixture(4, 2, 4), b = small_fixture(4, 2, 4);
  for (auto scope : {SparsityScope::Local, SparsityScope::Global})
    for (auto kind : {SparsifierKind::GMP, SparsifierKind::RigL, SparsifierKind::Static}) {
      SparsifierConfig cfg;
      cfg.kind = kind;
      cfg.scope = scope;
      cfg.delta_t = 3;
      TrainPlan plan;
      plan.steps = 12;
      plan.batch_size = 16;
      CompressedModel m1 = a.compressed, m2 = b.compressed;
      plan.threads = 1;
      local_error_minimize(m1, a.model, a.calib, plan, cfg);
      plan.threads = 3;
      local_error_minimize(m2, b.model, b.calib, plan, cfg);
      CHECK(encode_fpsh(to_records(m1)) == encode_fpsh(to_records(m2)));
      std::size_t active = 0, total = 0;
      for (auto* fac : m1.all_factors()) {
        for (std::size_t i = 0; i < fac->mask().size(); ++i)
          if (!fac->mask()[i]) CHECK(fac->values().data()[i] == 0.0);
        active += fac->active_count();
        total += fac->mask().size();
        if (scope == SparsityScope::Local) CHECK(fac->active_count() == oracle::ceil_count(0.25, fac->mask().size()));
      }
      CHECK(active == oracle::ceil_count(0.25, total));
    }
}

TEST_CASE("local_error_minimize: divergence keeps the last good model") {
  Fixture f = small_fixture(4);
  try {
    local_error_minimize(f.compressed, f.model, f.calib, sgd_plan(1e150, 20, LossMode::MlpActivation), dense_cfg());
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.last_good().groups[0].u.all_finite());
  }
}

TEST_CASE("global_finetune: identity at zero steps, loss reduction and count preservation") {
  const ToyModel model = gen_toy_model(78, 8, 32, 3, Spectrum::decaying(0.9));
  CompressedModel cm = compress_init(model, parse_group_layout("3", 3), 6);
  SparsifierConfig rigl;
  rigl.kind = SparsifierKind::RigL;
  rigl.rigl_prune_ratio = 0.05;
  for (auto* fac : cm.all_factors()) fac->set_mask(topk_mask_local(fac->values(), 0.25));
  const DenseMatrix x = make_calibration_inputs(79, 1, 128, 8);
  const DenseMatrix y = model.forward(x);

  TrainPlan none;
  none.steps = 0;
  CompressedModel same = cm;
  global_finetune(same, x, y, none, rigl);
  CHECK(encode_fpsh(to_records(same)) == encode_fpsh(to_records(cm)));

  TrainPlan plan;
  plan.steps = 1000;
  const auto rep = global_finetune(cm, x, y, plan, rigl);
  CHECK(rep.final_loss < rep.initial_loss);
  CHECK(rep.loss_trajectory.size() == 1000);
  CHECK(rep.window_means.size() == 10);
  for (std::size_t w = 1; w < rep.window_means.size(); ++w) CHECK(rep.window_means[w] <= rep.window_means[w - 1]);
  CHECK(rep.active_counts_before == rep.active_counts_after);
  CHECK(std::abs(model_mse(cm, x, y) - rep.final_loss) < 1e-12);
}
