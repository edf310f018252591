#ifndef CTS_OBJECTIVES_HPP_
#define CTS_OBJECTIVES_HPP_

#include <span>
#include <string>
#include <vector>

#include "cts/autograd.hpp"
#include "cts/model.hpp"

namespace cts {

enum class ObjectiveKind {
  kTaskLoss,       // loss
  kRelLossChange,  // dloss
  kNegGradNorm,    // gradnorm
  kReverseKl,      // kl
  kFeatureMatch,   // feature
  kGradMatch,      // grad
};

ObjectiveKind parse_objective(const std::string& tag);
const char* objective_tag(ObjectiveKind kind);
bool needs_teacher(ObjectiveKind kind);
bool needs_student_grads(ObjectiveKind kind);

inline constexpr double kNormEps = 1e-5;

// Dense-network reference values for one batch, computed without a graph.
struct Teacher {
  double loss = 0.0;
  Tensor logits;
  std::vector<Tensor> features;
  // Loss gradient per maskable parameter tensor, in layout order.
  std::vector<Tensor> grads;
};

Teacher compute_teacher(const ModelState& model, const Batch& batch, ObjectiveKind kind);

// (X - mean X) / sqrt(var X + 1e-5) with statistics over every element.
ad::Var normalise(const ad::Var& x);

ad::Var rel_loss_change(const ad::Var& student_loss, double teacher_loss);
// Batch mean of sum_c p_s (log p_s - log p_t).
ad::Var reverse_kl(const ad::Var& student_logits, const Tensor& teacher_logits);
// Mean over layers of MSE(N(a_l), N(b_l)).
ad::Var normalised_mse(std::span<const ad::Var> student, std::span<const Tensor> teacher);
ad::Var neg_grad_norm(std::span<const ad::Var> grads);

// Objective R for the network with maskable weights multiplied by `overlay`
// (length d). Differentiable in `overlay` when it is tracked; otherwise only
// the value is meaningful.
ad::Var objective_graph(ObjectiveKind kind, const ModelState& model, const Batch& batch,
                        const ad::Var& overlay, const Teacher& teacher);

double objective_value(ObjectiveKind kind, const ModelState& model, const Batch& batch,
                       std::span<const double> overlay, const Teacher& teacher);

}  // namespace cts

#endif  // CTS_OBJECTIVES_HPP_
