#ifndef CTS_ORACLE_HPP_
#define CTS_ORACLE_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "cts/dataset.hpp"
#include "cts/mask.hpp"
#include "cts/objectives.hpp"

namespace cts {

inline constexpr std::int64_t kOracleMaxDim = 24;
inline constexpr double kOracleBudget = 5e6;

struct OracleEntry {
  std::vector<std::uint8_t> mask;
  double value = 0.0;
};

struct OracleResult {
  Ticket best;
  double best_value = 0.0;
  // Every mask with exactly round(kappa d) ones, sorted by (value, mask).
  std::vector<OracleEntry> table;
};

// C(n, k) as a double (saturates at +inf rather than overflowing).
double binomial(std::int64_t n, std::int64_t k);

// Exhaustive minimisation of the objective over hard masks on one fixed
// batch. The dense network is the teacher.
OracleResult brute_force_oracle(const ModelState& model, const Batch& batch, double kappa,
                                ObjectiveKind kind);

// Objective of a hard mask on the same batch and teacher convention.
double mask_objective(const ModelState& model, const Batch& batch, std::span<const std::uint8_t> mask,
                      ObjectiveKind kind);

// Fraction of table values strictly below `value`.
double oracle_rank(const OracleResult& oracle, double value);

std::string mask_string(std::span<const std::uint8_t> mask);

// "mask,value" lines with a header, 17 significant digits.
std::string oracle_table_csv(const OracleResult& oracle);

}  // namespace cts

#endif  // CTS_ORACLE_HPP_
