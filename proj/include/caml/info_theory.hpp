#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "caml/rng.hpp"

namespace caml::info {

// Explicit finite joint distribution over (y, x1..xn), y first. Probabilities
// are stored row-major over the variables in order.
struct JointTable {
  std::vector<int> cards;
  std::vector<double> probs;

  int n_vars() const { return static_cast<int>(cards.size()); }
  // Number of x-variables (everything after y).
  int n_x() const { return n_vars() - 1; }
};

inline constexpr std::int64_t kMaxJointSupport = 1000000;

// Checks cardinalities, support size, non-negativity, and normalization.
void validate(const JointTable& t);

// Normalizes non-negative weights into a table (long-double accumulation so
// the sum-to-one invariant holds to 1e-12 even for large supports).
JointTable from_weights(std::vector<int> cards, std::vector<double> weights);

// Exact I(y; vars) in bits. `vars` lists x-variable indices (1-based over the
// table's variable list, i.e. 1..n_x), must be non-empty and exclude y.
double mutual_information(const JointTable& t, std::span<const int> vars);

// Exact I(y; var | given) in bits.
double conditional_mi(const JointTable& t, int var, std::span<const int> given);

double entropy_y(const JointTable& t);

struct ChainRuleReport {
  double total_bits = 0.0;        // I(y; X)
  std::vector<double> term_bits;  // I(y; x_k | x_1..x_{k-1})
  std::vector<double> single_bits;
  double max_single_bits = 0.0;
  bool ok = false;
  std::string detail;  // names the offending term on failure
};

// Verifies the chain-rule identity, term non-negativity, and the
// joint-vs-individual monotonicity bound.
ChainRuleReport chain_rule_check(const JointTable& t);

// Dirichlet(1)-distributed random table over the given cardinalities.
JointTable random_table(std::span<const int> cards, Rng& rng);

}  // namespace caml::info
