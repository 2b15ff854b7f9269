#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "fips/sparsifiers.hpp"

using namespace fips;

namespace {

std::vector<MaskedMatrix*> ptrs(std::vector<MaskedMatrix>& ms) {
  std::vector<MaskedMatrix*> out;
  for (auto& m : ms) out.push_back(&m);
  return out;
}

std::size_t total_active(const std::vector<MaskedMatrix>& ms) {
  std::size_t n = 0;
  for (const auto& m : ms) n += m.active_count();
  return n;
}

bool invariant_holds(const MaskedMatrix& m) {
  for (std::size_t i = 0; i < m.mask().size(); ++i)
    if (!m.mask()[i] && m.values().data()[i] != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("gmp schedule: endpoints and midpoint") {
  CHECK(gmp_target_sparsity(0, 100, 0.25, 0.75) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(gmp_target_sparsity(100, 100, 0.25, 0.75) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(std::abs(gmp_target_sparsity(50, 100, 0.25, 0.75) - 0.6875) < 1e-15);
  CHECK_THROWS_AS(gmp_target_sparsity(101, 100, 0.25, 0.75), std::invalid_argument);
  CHECK_THROWS_AS(gmp_target_sparsity(1, 100, 0.8, 0.75), std::invalid_argument);
}

TEST_CASE("gmp piecewise schedule passes through its milestone") {
  CHECK(std::abs(gmp_piecewise_sparsity(0, 400, 0.25, 0.25, 0.5, 0.75) - 0.25) < 1e-15);
  CHECK(std::abs(gmp_piecewise_sparsity(100, 400, 0.25, 0.25, 0.5, 0.75) - 0.5) < 1e-15);
  CHECK(std::abs(gmp_piecewise_sparsity(400, 400, 0.25, 0.25, 0.5, 0.75) - 0.75) < 1e-15);
  // the pure cubic overshoots the milestone
  CHECK(gmp_target_sparsity(100, 400, 0.25, 0.75) == doctest::Approx(0.75 - 0.5 * 0.421875));
}

TEST_CASE("property: gmp sparsity is nondecreasing") {
  SparsifierConfig cfg;
  for (auto sched : {GmpSchedule::Cubic, GmpSchedule::PiecewiseCubic}) {
    cfg.gmp_schedule = sched;
    double prev = -1.0;
    for (int t = 0; t <= 500; ++t) {
      const double s = gmp_sparsity(cfg, t, 500);
      CHECK(s >= prev);
      prev = s;
    }
  }
}

TEST_CASE("gmp_step: full mask at t=0 without initial sparsity") {
  std::mt19937_64 gen(51);
  std::vector<MaskedMatrix> fs = {MaskedMatrix(oracle::random_matrix(gen, 4, 8))};
  SparsifierConfig cfg;
  cfg.gmp_initial_sparsity = 0.0;
  gmp_step(ptrs(fs), 0, 100, cfg);
  CHECK(fs[0].density() == 1.0);
}

TEST_CASE("gmp_step: global scope prunes the low-magnitude factor first") {
  std::mt19937_64 gen(52);
  std::uniform_real_distribution<double> hi(10, 20), lo(0.1, 1);
  DenseMatrix a(4, 4), b(4, 4);
  for (auto& x : a.data()) x = hi(gen);
  for (auto& x : b.data()) x = lo(gen);
  std::vector<MaskedMatrix> fs = {MaskedMatrix(a), MaskedMatrix(b)};
  SparsifierConfig cfg;
  cfg.scope = SparsityScope::Global;
  gmp_step(ptrs(fs), 0, 10, cfg);  // density 0.75: 24 of 32 kept
  CHECK(fs[0].active_count() == 16);
  CHECK(fs[1].active_count() == 8);
  gmp_step(ptrs(fs), 10, 10, cfg);  // density 0.25: 8 of 32
  CHECK(fs[0].active_count() == 8);
  CHECK(fs[1].active_count() == 0);
}

TEST_CASE("gmp_step: final masks keep the ceiling of the target") {
  std::mt19937_64 gen(53);
  for (auto scope : {SparsityScope::Local, SparsityScope::Global}) {
    std::vector<MaskedMatrix> fs = {MaskedMatrix(oracle::random_matrix(gen, 5, 7)),
                                    MaskedMatrix(oracle::random_matrix(gen, 5, 7))};
    SparsifierConfig cfg;
    cfg.scope = scope;
    for (std::size_t t = 0; t <= 200; t += 50) gmp_step(ptrs(fs), t, 200, cfg);
    if (scope == SparsityScope::Global) {
      CHECK(total_active(fs) == oracle::ceil_count(0.25, 70));
    } else {
      for (const auto& f : fs) CHECK(f.active_count() == oracle::ceil_count(0.25, 35));
    }
    for (const auto& f : fs) CHECK(invariant_holds(f));
  }
}

TEST_CASE("gmp_step: pruned weights do not revive") {
  std::mt19937_64 gen(54);
  std::vector<MaskedMatrix> fs = {MaskedMatrix(oracle::random_matrix(gen, 6, 6))};
  SparsifierConfig cfg;
  gmp_step(ptrs(fs), 0, 100, cfg);
  const Bitmask first = fs[0].mask();
  gmp_step(ptrs(fs), 50, 100, cfg);
  for (std::size_t i = 0; i < first.size(); ++i)
    if (!first[i]) CHECK_FALSE(fs[0].mask()[i]);
}

TEST_CASE("rigl_step: zero ratio, hand trace and errors") {
  std::mt19937_64 gen(55);
  MaskedMatrix m(oracle::random_matrix(gen, 3, 3));
  m.set_mask(topk_mask_local(m.values(), 0.5));
  const Bitmask before = m.mask();
  CHECK(rigl_step(m, oracle::random_matrix(gen, 3, 3), 0.0).dropped.empty());
  CHECK(m.mask() == before);

  Bitmask mask(2, 2);
  mask.set(0, 0, true);
  mask.set(0, 1, true);
  MaskedMatrix h(DenseMatrix{{5, 0.1}, {0, 0}}, mask);
  const auto up = rigl_step(h, DenseMatrix{{0, 0}, {9, 1}}, 0.5);
  CHECK(up.dropped == std::vector<std::size_t>{1});
  CHECK(up.grown == std::vector<std::size_t>{2});
  CHECK(h.mask()(1, 0));
  CHECK_FALSE(h.mask()(0, 1));
  CHECK(h.values()(1, 0) == 0.0);
  CHECK(h.values()(0, 1) == 0.0);
  CHECK(h.values()(0, 0) == 5.0);

  CHECK_THROWS_AS(rigl_step(h, DenseMatrix(3, 2), 0.5), ShapeError);
  CHECK_THROWS_AS(rigl_step(h, DenseMatrix(2, 2), 1.0), std::invalid_argument);
}

TEST_CASE("property: rigl preserves the active count over 100 random steps") {
  std::mt19937_64 gen(56);
  MaskedMatrix m(oracle::random_matrix(gen, 8, 12));
  m.set_mask(topk_mask_local(m.values(), 0.3));
  const std::size_t count = m.active_count();
  for (int step = 0; step < 100; ++step) {
    rigl_step(m, oracle::random_matrix(gen, 8, 12), 0.1 + 0.008 * step);
    CHECK(m.active_count() == count);
    CHECK(invariant_holds(m));
    DenseMatrix v = m.values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (m.mask()[i]) v.data()[i] += oracle::random_matrix(gen, 1, 1)(0, 0);
    m.set_values(v);
  }
}

TEST_CASE("static_init: density one, equivalence with gmp and global nonuniformity") {
  std::mt19937_64 gen(57);
  std::vector<MaskedMatrix> dense = {MaskedMatrix(oracle::random_matrix(gen, 4, 6))};
  SparsifierConfig cfg;
  cfg.kind = SparsifierKind::Static;
  cfg.target_density = 1.0;
  static_init(ptrs(dense), cfg);
  CHECK(dense[0].density() == 1.0);

  const DenseMatrix v = oracle::random_matrix(gen, 9, 9);
  std::vector<MaskedMatrix> s = {MaskedMatrix(v)}, g = {MaskedMatrix(v)};
  cfg.target_density = 0.25;
  cfg.gmp_initial_sparsity = 0.75;
  static_init(ptrs(s), cfg);
  gmp_step(ptrs(g), 100, 100, cfg);
  CHECK(s[0] == g[0]);

  std::vector<MaskedMatrix> ladder;
  for (int i = 0; i < 4; ++i) ladder.emplace_back(oracle::random_matrix(gen, 6, 6, std::pow(2.0, i)));
  cfg.scope = SparsityScope::Global;
  static_init(ptrs(ladder), cfg);
  CHECK(total_active(ladder) == oracle::ceil_count(0.25, 144));
  CHECK(ladder[0].active_count() < ladder[3].active_count());

  SparsifierConfig off;
  off.kind = SparsifierKind::Dense;
  std::vector<MaskedMatrix> untouched = {MaskedMatrix(v)};
  static_init(ptrs(untouched), off);
  CHECK(untouched[0].density() == 1.0);
}

TEST_CASE("initial_masks per sparsifier kind") {
  std::mt19937_64 gen(58);
  const DenseMatrix v = oracle::random_matrix(gen, 8, 8);
  for (auto kind : {SparsifierKind::Dense, SparsifierKind::Static, SparsifierKind::GMP, SparsifierKind::RigL}) {
    std::vector<MaskedMatrix> fs = {MaskedMatrix(v)};
    SparsifierConfig cfg;
    cfg.kind = kind;
    initial_masks(ptrs(fs), cfg);
    const double want = kind == SparsifierKind::Dense ? 1.0 : kind == SparsifierKind::GMP ? 0.75 : 0.25;
    CHECK(fs[0].density() == doctest::Approx(want));
    CHECK(parse_sparsifier_kind(to_string(kind)) == kind);
  }
}

TEST_CASE("config validation") {
  SparsifierConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.delta_t = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.target_density = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.gmp_initial_sparsity = 0.9;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
