#include "fips/sparsifiers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fips {

std::string to_string(SparsifierKind k) {
  switch (k) {
    case SparsifierKind::Dense: return "dense";
    case SparsifierKind::Static: return "static";
    case SparsifierKind::GMP: return "gmp";
    case SparsifierKind::RigL: return "rigl";
  }
  return "?";
}

std::string to_string(SparsityScope s) { return s == SparsityScope::Local ? "local" : "global"; }
std::string to_string(GmpSchedule s) { return s == GmpSchedule::Cubic ? "cubic" : "piecewise"; }

SparsifierKind parse_sparsifier_kind(const std::string& s) {
  if (s == "dense") return SparsifierKind::Dense;
  if (s == "static") return SparsifierKind::Static;
  if (s == "gmp") return SparsifierKind::GMP;
  if (s == "rigl") return SparsifierKind::RigL;
  throw std::invalid_argument("unknown sparsifier '" + s + "'");
}

SparsityScope parse_sparsity_scope(const std::string& s) {
  if (s == "local") return SparsityScope::Local;
  if (s == "global") return SparsityScope::Global;
  throw std::invalid_argument("unknown sparsity scope '" + s + "'");
}

GmpSchedule parse_gmp_schedule(const std::string& s) {
  if (s == "cubic") return GmpSchedule::Cubic;
  if (s == "piecewise") return GmpSchedule::PiecewiseCubic;
  throw std::invalid_argument("unknown GMP schedule '" + s + "'");
}

void SparsifierConfig::validate() const {
  auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!(target_density > 0.0 && target_density <= 1.0)) throw std::invalid_argument("target density must lie in (0, 1]");
  if (!in01(gmp_initial_sparsity) || !in01(gmp_mid_sparsity) || !in01(gmp_mid_fraction)) {
    throw std::invalid_argument("GMP sparsities and milestone must lie in [0, 1]");
  }
  if (kind == SparsifierKind::GMP && gmp_initial_sparsity > final_sparsity()) {
    throw std::invalid_argument("GMP initial sparsity exceeds the final sparsity");
  }
  if (gmp_schedule == GmpSchedule::PiecewiseCubic &&
      (gmp_mid_sparsity < gmp_initial_sparsity || gmp_mid_sparsity > final_sparsity() || gmp_mid_fraction <= 0.0 ||
       gmp_mid_fraction >= 1.0)) {
    throw std::invalid_argument("GMP milestone must lie between the initial and final sparsity");
  }
  if (!(rigl_prune_ratio >= 0.0 && rigl_prune_ratio < 1.0)) throw std::invalid_argument("RigL prune ratio must lie in [0, 1)");
  if (delta_t < 1) throw std::invalid_argument("delta_t must be >= 1");
}

double gmp_target_sparsity(double t, double total_steps, double initial_sparsity, double final_sparsity) {
  if (t < 0.0 || t > total_steps) throw std::invalid_argument("gmp_target_sparsity: t outside [0, T]");
  if (!(initial_sparsity >= 0.0 && initial_sparsity <= final_sparsity && final_sparsity <= 1.0)) {
    throw std::invalid_argument("gmp_target_sparsity: need 0 <= s_i <= s_f <= 1");
  }
  if (total_steps <= 0.0) return final_sparsity;
  const double left = 1.0 - t / total_steps;
  return final_sparsity + (initial_sparsity - final_sparsity) * left * left * left;
}

double gmp_piecewise_sparsity(double t, double total_steps, double initial_sparsity, double mid_fraction,
                              double mid_sparsity, double final_sparsity) {
  if (t < 0.0 || t > total_steps) throw std::invalid_argument("gmp_piecewise_sparsity: t outside [0, T]");
  const double t_mid = mid_fraction * total_steps;
  if (t <= t_mid) return gmp_target_sparsity(t, t_mid, initial_sparsity, mid_sparsity);
  return gmp_target_sparsity(t - t_mid, total_steps - t_mid, mid_sparsity, final_sparsity);
}

double gmp_sparsity(const SparsifierConfig& config, double t, double total_steps) {
  if (config.gmp_schedule == GmpSchedule::PiecewiseCubic) {
    return gmp_piecewise_sparsity(t, total_steps, config.gmp_initial_sparsity, config.gmp_mid_fraction,
                                  config.gmp_mid_sparsity, config.final_sparsity());
  }
  return gmp_target_sparsity(t, total_steps, config.gmp_initial_sparsity, config.final_sparsity());
}

std::vector<Bitmask> magnitude_masks(std::span<MaskedMatrix* const> factors, double density, SparsityScope scope) {
  std::vector<Bitmask> masks;
  masks.reserve(factors.size());
  if (scope == SparsityScope::Local) {
    for (auto* f : factors) masks.push_back(topk_mask_local(f->values(), density));
    return masks;
  }
  std::vector<DenseMatrix> values;
  values.reserve(factors.size());
  for (auto* f : factors) values.push_back(f->values());
  return topk_mask_global(values, density);
}

namespace {

void assign_masks(std::span<MaskedMatrix* const> factors, std::vector<Bitmask> masks) {
  for (std::size_t i = 0; i < factors.size(); ++i) factors[i]->set_mask(std::move(masks[i]));
}

}  // namespace

void gmp_step(std::span<MaskedMatrix* const> factors, std::size_t t, std::size_t total_steps,
              const SparsifierConfig& config) {
  if (factors.empty()) return;
  const double sparsity = gmp_sparsity(config, static_cast<double>(t), static_cast<double>(total_steps));
  const double density = 1.0 - sparsity;
  if (density <= 0.0) throw std::invalid_argument("gmp_step: schedule reached zero density");
  assign_masks(factors, magnitude_masks(factors, density, config.scope));
}

void static_init(std::span<MaskedMatrix* const> factors, const SparsifierConfig& config) {
  if (factors.empty() || config.kind == SparsifierKind::Dense) return;
  assign_masks(factors, magnitude_masks(factors, config.target_density, config.scope));
}

void initial_masks(std::span<MaskedMatrix* const> factors, const SparsifierConfig& config) {
  switch (config.kind) {
    case SparsifierKind::Dense:
      for (auto* f : factors) f->set_mask(Bitmask::full_like(f->values()));
      break;
    case SparsifierKind::GMP:
      gmp_step(factors, 0, 1, config);
      break;
    case SparsifierKind::Static:
    case SparsifierKind::RigL:
      static_init(factors, config);
      break;
  }
}

RiglUpdate rigl_step(MaskedMatrix& factor, const DenseMatrix& dense_grad, double prune_ratio) {
  require_same_shape(factor.values(), dense_grad, "rigl_step");
  if (!(prune_ratio >= 0.0 && prune_ratio < 1.0)) throw std::invalid_argument("rigl_step: prune ratio must lie in [0, 1)");
  const Bitmask& mask = factor.mask();
  const auto values = factor.values().data();
  const auto grad = dense_grad.data();

  std::vector<std::size_t> active, inactive;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? active : inactive).push_back(i);
  const std::size_t k = std::min(static_cast<std::size_t>(std::floor(prune_ratio * static_cast<double>(active.size()))),
                                 inactive.size());
  RiglUpdate update;
  if (k == 0) return update;

  std::partial_sort(active.begin(), active.begin() + static_cast<std::ptrdiff_t>(k), active.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ma = std::abs(values[a]), mb = std::abs(values[b]);
                      return ma != mb ? ma < mb : a < b;
                    });
  std::partial_sort(inactive.begin(), inactive.begin() + static_cast<std::ptrdiff_t>(k), inactive.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ga = std::abs(grad[a]), gb = std::abs(grad[b]);
                      return ga != gb ? ga > gb : a < b;
                    });
  update.dropped.assign(active.begin(), active.begin() + static_cast<std::ptrdiff_t>(k));
  update.grown.assign(inactive.begin(), inactive.begin() + static_cast<std::ptrdiff_t>(k));

  Bitmask next = mask;
  for (auto i : update.dropped) next.set(i, false);
  for (auto i : update.grown) next.set(i, true);
  factor.set_mask(std::move(next));  // zeroes dropped entries; grown entries were already 0
  return update;
}

}  // namespace fips
