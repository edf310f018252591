#include "cts/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "cts/error.hpp"

namespace cts {

double binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::int64_t i = 1; i <= k; ++i) {
    r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
    if (!std::isfinite(r)) return std::numeric_limits<double>::infinity();
  }
  return std::round(r);
}

namespace {

double eval_mask(const ModelState& model, const Batch& batch, std::span<const std::uint8_t> mask,
                 ObjectiveKind kind, const Teacher& teacher, std::vector<double>& overlay) {
  for (std::size_t j = 0; j < mask.size(); ++j) overlay[j] = mask[j] ? 1.0 : 0.0;
  return objective_value(kind, model, batch, overlay, teacher);
}

}  // namespace

double mask_objective(const ModelState& model, const Batch& batch, std::span<const std::uint8_t> mask,
                      ObjectiveKind kind) {
  require(static_cast<std::int64_t>(mask.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "mask has ", mask.size(), " entries, model has ", model.mask_size());
  Teacher teacher = compute_teacher(model, batch, kind);
  std::vector<double> overlay(mask.size());
  return eval_mask(model, batch, mask, kind, teacher, overlay);
}

OracleResult brute_force_oracle(const ModelState& model, const Batch& batch, double kappa,
                                ObjectiveKind kind) {
  const std::int64_t d = model.mask_size();
  require(d <= kOracleMaxDim, ErrorCode::kBudgetExceeded, "oracle needs d <= ", kOracleMaxDim,
          ", model has d = ", d);
  const std::int64_t n = ticket_size(d, kappa);
  const double count = binomial(d, n);
  require(count <= kOracleBudget, ErrorCode::kBudgetExceeded, "C(", d, ", ", n, ") = ", count,
          " masks exceeds the oracle budget of ", kOracleBudget);

  Teacher teacher = compute_teacher(model, batch, kind);
  std::vector<double> overlay(d);
  std::vector<std::uint8_t> mask(d, 0);
  std::fill(mask.begin(), mask.begin() + n, 1);  // largest in lexicographic order

  OracleResult out;
  out.table.reserve(static_cast<std::size_t>(count));
  do {
    out.table.push_back({mask, eval_mask(model, batch, mask, kind, teacher, overlay)});
  } while (std::prev_permutation(mask.begin(), mask.end()));

  // NaN sorts last so a degenerate mask can never win.
  std::sort(out.table.begin(), out.table.end(), [](const OracleEntry& a, const OracleEntry& b) {
    const bool an = std::isnan(a.value), bn = std::isnan(b.value);
    if (an != bn) return bn;
    if (!an && a.value != b.value) return a.value < b.value;
    return a.mask > b.mask;
  });
  out.best_value = out.table.front().value;
  out.best = ticket_from_mask(out.table.front().mask, model.layout, kappa, model.arch, "oracle");
  return out;
}

double oracle_rank(const OracleResult& oracle, double value) {
  std::size_t below = 0;
  for (const auto& e : oracle.table) below += e.value < value;
  return static_cast<double>(below) / static_cast<double>(oracle.table.size());
}

std::string mask_string(std::span<const std::uint8_t> mask) {
  std::string s(mask.size(), '0');
  for (std::size_t j = 0; j < mask.size(); ++j) s[j] = mask[j] ? '1' : '0';
  return s;
}

std::string oracle_table_csv(const OracleResult& oracle) {
  std::string out = "mask,value\n";
  char buf[64];
  for (const auto& e : oracle.table) {
    std::snprintf(buf, sizeof buf, ",%.17g\n", e.value);
    out += mask_string(e.mask);
    out += buf;
  }
  return out;
}

}  // namespace cts
