#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fips/linalg.hpp"
#include "fips/sparse.hpp"

namespace fips {

enum class SparsifierKind { Dense, Static, GMP, RigL };
enum class SparsityScope { Local, Global };
enum class GmpSchedule { Cubic, PiecewiseCubic };

std::string to_string(SparsifierKind k);
std::string to_string(SparsityScope s);
std::string to_string(GmpSchedule s);
SparsifierKind parse_sparsifier_kind(const std::string& s);
SparsityScope parse_sparsity_scope(const std::string& s);
GmpSchedule parse_gmp_schedule(const std::string& s);

struct SparsifierConfig {
  SparsifierKind kind = SparsifierKind::GMP;
  double target_density = 0.25;  // 75% sparsity
  std::size_t delta_t = 50;
  double gmp_initial_sparsity = 0.25;
  GmpSchedule gmp_schedule = GmpSchedule::Cubic;
  double gmp_mid_fraction = 0.25;  // PiecewiseCubic milestone
  double gmp_mid_sparsity = 0.50;
  double rigl_prune_ratio = 0.10;
  SparsityScope scope = SparsityScope::Local;

  double final_sparsity() const noexcept { return 1.0 - target_density; }
  void validate() const;
};

// s(t) = s_f + (s_i - s_f) (1 - t/T)^3
double gmp_target_sparsity(double t, double total_steps, double initial_sparsity, double final_sparsity);

// Two cubic segments through (0, s_i), (t_mid, s_mid) and (T, s_f).
double gmp_piecewise_sparsity(double t, double total_steps, double initial_sparsity, double mid_fraction,
                              double mid_sparsity, double final_sparsity);

// Schedule value selected by config at step t of T.
double gmp_sparsity(const SparsifierConfig& config, double t, double total_steps);

// Top-magnitude masks at `density`, per factor (Local) or pooled (Global).
std::vector<Bitmask> magnitude_masks(std::span<MaskedMatrix* const> factors, double density, SparsityScope scope);

// Recomputes masks from the current (masked) magnitudes at density 1 - s(t).
void gmp_step(std::span<MaskedMatrix* const> factors, std::size_t t, std::size_t total_steps,
              const SparsifierConfig& config);

// One-shot mask at the target density; Dense kind leaves masks full.
void static_init(std::span<MaskedMatrix* const> factors, const SparsifierConfig& config);

// Mask applied before the first optimizer step: full for Dense, the GMP
// schedule's initial sparsity for GMP, the target density otherwise.
void initial_masks(std::span<MaskedMatrix* const> factors, const SparsifierConfig& config);

struct RiglUpdate {
  std::vector<std::size_t> dropped;  // flat indices
  std::vector<std::size_t> grown;
};

// Drops floor(prune_ratio * active) smallest-magnitude active entries and
// activates the same number of previously inactive entries with the largest
// |dense_grad|. Grown entries start at 0. Ties go to the lowest flat index.
RiglUpdate rigl_step(MaskedMatrix& factor, const DenseMatrix& dense_grad, double prune_ratio);

}  // namespace fips
