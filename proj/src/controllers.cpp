#include "cts/controllers.hpp"

#include <algorithm>
#include <cmath>

#include "cts/error.hpp"

namespace cts {

using ad::Var;

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_lengths(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "gradient lengths differ: ", a.size(), " vs ",
          b.size());
}

}  // namespace

ControllerMode parse_controller(const std::string& text) {
  if (text == "gradbalance") return ControllerMode::kGradBalance;
  if (text == "lagrange") return ControllerMode::kLagrange;
  fail(ErrorCode::kInvalidArgument, "unknown controller '", text, "' (gradbalance or lagrange)");
}

const char* controller_name(ControllerMode mode) {
  return mode == ControllerMode::kLagrange ? "lagrange" : "gradbalance";
}

double effective_kappa(double kappa) { return std::min(1.1 * kappa, 1.0); }

ControllerState init_controller(const ControllerConfig& cfg, double kappa) {
  require(kappa > 0 && kappa <= 1, ErrorCode::kInvalidArgument, "kappa must be in (0,1], got ", kappa);
  require(cfg.eta >= 0 && cfg.eta < 1, ErrorCode::kInvalidArgument, "eta must be in [0,1), got ", cfg.eta);
  require(cfg.lambda_lr > 0, ErrorCode::kInvalidArgument, "lambda learning rate must be positive");
  ControllerState s;
  s.mode = cfg.mode;
  s.eta = cfg.eta;
  s.lambda_lr = cfg.lambda_lr;
  s.kappa = kappa;
  s.kappa_eff = cfg.mode == ControllerMode::kGradBalance ? effective_kappa(kappa) : kappa;
  return s;
}

BalanceResult gradbalance_combine(std::span<const double> g_obj, std::span<const double> g_sp,
                                  double sparsity_loss, double lambda, double eta) {
  check_lengths(g_obj, g_sp);
  BalanceResult r;
  if (sparsity_loss > 0.0) {
    const double sp_norm = norm2(g_sp);
    if (sp_norm < 1e-12) {
      r.degenerate = true;
    } else {
      r.lambda_target = norm2(g_obj) / sp_norm;
    }
  }
  r.lambda = eta * lambda + (1.0 - eta) * r.lambda_target;
  r.g_alpha.resize(g_obj.size());
  for (std::size_t j = 0; j < g_obj.size(); ++j) r.g_alpha[j] = g_obj[j] + r.lambda * g_sp[j];
  return r;
}

LagrangeResult lagrange_combine(std::span<const double> g_obj, std::span<const double> g_sp,
                                double sparsity_loss, double lambda) {
  check_lengths(g_obj, g_sp);
  LagrangeResult r;
  r.g_alpha.resize(g_obj.size());
  for (std::size_t j = 0; j < g_obj.size(); ++j) r.g_alpha[j] = g_obj[j] + lambda * g_sp[j];
  r.g_lambda = -sparsity_loss;
  return r;
}

void lagrange_update(ControllerState& state, double g_lambda) { state.lambda -= state.lambda_lr * g_lambda; }

StepResult controller_step(const ModelState& model, const MaskDistribution& dist, ControllerState& state,
                           const Batch& batch, ObjectiveKind kind, const Teacher& teacher,
                           std::span<const double> noise) {
  require(static_cast<std::int64_t>(dist.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "distribution size ", dist.size(), " != mask size ", model.mask_size());
  StepResult out;
  auto logits = Var::leaf(Tensor::vector(dist.logits));
  Var r = objective_graph(kind, model, batch, soft_mask(logits, noise, dist.tau), teacher);
  out.objective = r.item();
  const Tensor g_obj = ad::grad_values(r, std::span(&logits, 1))[0];

  out.sparsity_loss = sparsity_loss(dist.logits, state.kappa_eff);
  out.expected_density = expected_density(dist);
  const auto g_sp = sparsity_loss_grad(dist.logits, state.kappa_eff);
  if (state.mode == ControllerMode::kGradBalance) {
    auto b = gradbalance_combine(g_obj.data(), g_sp, out.sparsity_loss, state.lambda, state.eta);
    state.lambda = b.lambda;
    out.g_alpha = std::move(b.g_alpha);
    out.lambda_target = b.lambda_target;
    out.degenerate = b.degenerate;
  } else {
    auto l = lagrange_combine(g_obj.data(), g_sp, out.sparsity_loss, state.lambda);
    out.g_alpha = std::move(l.g_alpha);
    out.g_lambda = l.g_lambda;
  }
  out.lambda = state.lambda;
  return out;
}

// ---- Adam -------------------------------------------------------------------------

double AdamState::lr_at(std::int64_t t) const {
  const auto drop = static_cast<std::int64_t>(std::floor(cfg.drop_at * static_cast<double>(total_steps)));
  return t >= drop ? cfg.lr * cfg.drop_factor : cfg.lr;
}

AdamState init_adam(const AdamConfig& cfg, std::size_t d, std::int64_t total_steps) {
  require(cfg.lr > 0 && cfg.eps > 0, ErrorCode::kInvalidArgument, "Adam rates must be positive");
  require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1, ErrorCode::kInvalidArgument,
          "Adam betas must be in [0,1)");
  AdamState s;
  s.cfg = cfg;
  s.total_steps = total_steps;
  s.m.assign(d, 0.0);
  s.v.assign(d, 0.0);
  return s;
}

void adam_update(MaskDistribution& dist, std::span<const double> g, AdamState& adam) {
  require(g.size() == dist.size() && adam.m.size() == dist.size(), ErrorCode::kShapeMismatch,
          "Adam: gradient length ", g.size(), " != ", dist.size());
  const double lr = adam.lr_at(adam.step);
  ++adam.step;
  const auto& c = adam.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(adam.step));
  for (std::size_t j = 0; j < g.size(); ++j) {
    adam.m[j] = c.beta1 * adam.m[j] + (1.0 - c.beta1) * g[j];
    adam.v[j] = c.beta2 * adam.v[j] + (1.0 - c.beta2) * g[j] * g[j];
    const double mhat = adam.m[j] / bc1;
    const double vhat = adam.v[j] / bc2;
    dist.logits[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

}  // namespace cts
