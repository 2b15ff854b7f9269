#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fips {

class InfeasibleBudget : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Budget of one decomposition: `n_layers` matrices of shape d x p share a
// basis. fraction F of the original parameters is kept while factors have
// density D.
struct BudgetSpec {
  double budget = 0.25;   // F
  double density = 0.25;  // D
  std::size_t d = 0;
  std::size_t p = 0;
  std::size_t n_layers = 1;
  int bits_per_param = 16;

  void validate() const;
};

// How the rank is derived from (F, D).
//   PaperFormula: F·N·d·p = D·r·(d + N·p), density charged to U as well.
//   ExactCount:   F·N·d·p = d·r + D·r·N·p, U dense and only V sparse.
enum class RankAccounting { PaperFormula, ExactCount };

// floor of the chosen equality solved for r. Throws InfeasibleBudget when < 1.
std::size_t required_rank(const BudgetSpec& spec, RankAccounting accounting = RankAccounting::PaperFormula);

// Storage of the factors relative to the dense original, assuming a 1-bit
// mask over all factor entries: (bits+1)·F / (bits·D), i.e. 17F/16D for 16 bits.
double storage_fraction(double budget, double density, int bits_per_param = 16);

// Value of F/D below which storage_fraction < 1: bits/(bits+1).
double storage_breakeven_ratio(int bits_per_param = 16);

struct StorageCount {
  std::size_t rank = 0;
  std::size_t u_params = 0;       // dense d·r
  std::size_t v_params = 0;       // kept entries of V
  std::size_t mask_bits = 0;      // one bit per V entry
  std::size_t original_params = 0;
  double param_fraction = 0.0;    // (u + v) / original
  double storage_fraction = 0.0;  // (bits·(u + v) + mask) / (bits·original)
};

// Parameter and bit counts of a factorization with dense U and a V of the
// spec's density at the given rank.
StorageCount exact_count(const BudgetSpec& spec, std::size_t rank);

enum class MacStrategy { LowRank, FullRank };

// Multiply-accumulates for one d x p layer applied to n_tokens rows.
//   LowRank:  n·d·r + n·r·p
//   FullRank: d·r·p / reuse_count + n·d·p
double mac_estimate(MacStrategy strategy, double n_tokens, double d, double p, double rank,
                    double reuse_count = 1.0);

inline double dense_macs(double n_tokens, double d, double p) { return n_tokens * d * p; }

// Rank at which LowRank costs the same as the dense layer.
inline double mac_breakeven_rank(double d, double p) { return d * p / (d + p); }

std::string to_string(RankAccounting a);
RankAccounting parse_rank_accounting(const std::string& s);

}  // namespace fips
