#ifndef CTS_CONTROLLERS_HPP_
#define CTS_CONTROLLERS_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cts/dataset.hpp"
#include "cts/mask.hpp"
#include "cts/model.hpp"
#include "cts/objectives.hpp"

namespace cts {

enum class ControllerMode { kLagrange, kGradBalance };

ControllerMode parse_controller(const std::string& text);
const char* controller_name(ControllerMode mode);

struct ControllerConfig {
  ControllerMode mode = ControllerMode::kGradBalance;
  double eta = 0.99;
  double lambda_lr = 0.01;
};

struct ControllerState {
  ControllerMode mode = ControllerMode::kGradBalance;
  double lambda = 0.0;
  double eta = 0.99;
  double lambda_lr = 0.01;
  double kappa = 1.0;
  // Density the constraint is measured against: min(1.1 kappa, 1) under
  // GradBalance, kappa under Lagrange.
  double kappa_eff = 1.0;
};

double effective_kappa(double kappa);
ControllerState init_controller(const ControllerConfig& cfg, double kappa);

struct BalanceResult {
  std::vector<double> g_alpha;
  double lambda = 0.0;
  double lambda_target = 0.0;
  // Constraint active but its gradient vanished; lambda_target forced to 0.
  bool degenerate = false;
};

// lambda_target = |g_obj| / |g_sp| if sparsity_loss > 0 else 0;
// lambda' = eta lambda + (1 - eta) lambda_target; g = g_obj + lambda' g_sp.
BalanceResult gradbalance_combine(std::span<const double> g_obj, std::span<const double> g_sp,
                                  double sparsity_loss, double lambda, double eta);

struct LagrangeResult {
  std::vector<double> g_alpha;
  double g_lambda = 0.0;
};

// g = g_obj + lambda g_sp; g_lambda = -sparsity_loss.
LagrangeResult lagrange_combine(std::span<const double> g_obj, std::span<const double> g_sp,
                                double sparsity_loss, double lambda);

// Ascent on lambda: lambda <- lambda - lr * g_lambda.
void lagrange_update(ControllerState& state, double g_lambda);

struct StepResult {
  std::vector<double> g_alpha;
  double objective = 0.0;
  double sparsity_loss = 0.0;
  double expected_density = 0.0;
  double lambda = 0.0;
  double lambda_target = 0.0;
  double g_lambda = 0.0;
  bool degenerate = false;
};

// One controller step on a frozen model: samples the soft mask from `noise`,
// evaluates R and its gradient in the logits, adds the analytic constraint
// gradient and updates lambda (GradBalance) or reports g_lambda (Lagrange,
// the caller applies lagrange_update).
StepResult controller_step(const ModelState& model, const MaskDistribution& dist, ControllerState& state,
                           const Batch& batch, ObjectiveKind kind, const Teacher& teacher,
                           std::span<const double> noise);

// ---- Adam on the logits ----------------------------------------------------------

struct AdamConfig {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // The rate drops by `drop_factor` from step floor(drop_at * total_steps).
  double drop_at = 0.9;
  double drop_factor = 0.1;
};

struct AdamState {
  AdamConfig cfg;
  std::int64_t total_steps = 0;
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  double lr_at(std::int64_t t) const;
};

AdamState init_adam(const AdamConfig& cfg, std::size_t d, std::int64_t total_steps);
void adam_update(MaskDistribution& dist, std::span<const double> g_alpha, AdamState& adam);

}  // namespace cts

#endif  // CTS_CONTROLLERS_HPP_
