#include "fips/costmodel.hpp"

#include <cmath>
#include <sstream>

#include "fips/sparse.hpp"

namespace fips {

void BudgetSpec::validate() const {
  if (!(budget > 0.0 && budget <= 1.0)) throw std::invalid_argument("budget F must lie in (0, 1]");
  if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("density D must lie in (0, 1]");
  if (d == 0 || p == 0 || n_layers == 0) throw std::invalid_argument("d, p and layer count must be positive");
  if (bits_per_param < 1) throw std::invalid_argument("bits_per_param must be >= 1");
}

std::size_t required_rank(const BudgetSpec& spec, RankAccounting accounting) {
  spec.validate();
  const double d = static_cast<double>(spec.d);
  const double np = static_cast<double>(spec.n_layers) * static_cast<double>(spec.p);
  const double numerator = spec.budget * d * np;
  const double denominator =
      accounting == RankAccounting::PaperFormula ? spec.density * (d + np) : d + spec.density * np;
  // Relative slack keeps exact integer quotients (e.g. d/2) from flooring down.
  const double raw = numerator / denominator;
  const double r = std::floor(raw * (1.0 + 1e-12));
  if (r < 1.0) {
    std::ostringstream os;
    os << "infeasible budget: F=" << spec.budget << " D=" << spec.density << " d=" << spec.d
       << " p=" << spec.p << " N=" << spec.n_layers << " gives rank " << raw << " < 1";
    throw InfeasibleBudget(os.str());
  }
  return static_cast<std::size_t>(r);
}

double storage_fraction(double budget, double density, int bits_per_param) {
  const double bits = static_cast<double>(bits_per_param);
  return (bits + 1.0) * budget / (bits * density);
}

double storage_breakeven_ratio(int bits_per_param) {
  const double bits = static_cast<double>(bits_per_param);
  return bits / (bits + 1.0);
}

StorageCount exact_count(const BudgetSpec& spec, std::size_t rank) {
  spec.validate();
  StorageCount c;
  c.rank = rank;
  c.u_params = spec.d * rank;
  const std::size_t v_total = rank * spec.n_layers * spec.p;
  c.v_params = kept_count(spec.density, v_total);
  c.mask_bits = v_total;
  c.original_params = spec.n_layers * spec.d * spec.p;
  const double orig = static_cast<double>(c.original_params);
  c.param_fraction = static_cast<double>(c.u_params + c.v_params) / orig;
  const double bits = static_cast<double>(spec.bits_per_param);
  c.storage_fraction =
      (bits * static_cast<double>(c.u_params + c.v_params) + static_cast<double>(c.mask_bits)) / (bits * orig);
  return c;
}

double mac_estimate(MacStrategy strategy, double n_tokens, double d, double p, double rank,
                    double reuse_count) {
  if (strategy == MacStrategy::LowRank) return n_tokens * d * rank + n_tokens * rank * p;
  const double materialize = std::isinf(reuse_count) ? 0.0 : d * rank * p / reuse_count;
  return materialize + n_tokens * d * p;
}

std::string to_string(RankAccounting a) {
  return a == RankAccounting::PaperFormula ? "paper_formula" : "exact_count";
}

RankAccounting parse_rank_accounting(const std::string& s) {
  if (s == "paper_formula" || s == "paper") return RankAccounting::PaperFormula;
  if (s == "exact_count" || s == "exact") return RankAccounting::ExactCount;
  throw std::invalid_argument("unknown rank accounting '" + s + "'");
}

}  // namespace fips
