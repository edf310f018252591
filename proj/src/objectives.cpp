#include "cts/objectives.hpp"

#include <cmath>

#include "cts/error.hpp"
#include "cts/train.hpp"

namespace cts {

using ad::Var;

namespace {

struct Tag {
  ObjectiveKind kind;
  const char* tag;
};
constexpr Tag kTags[] = {
    {ObjectiveKind::kTaskLoss, "loss"},      {ObjectiveKind::kRelLossChange, "dloss"},
    {ObjectiveKind::kNegGradNorm, "gradnorm"}, {ObjectiveKind::kReverseKl, "kl"},
    {ObjectiveKind::kFeatureMatch, "feature"}, {ObjectiveKind::kGradMatch, "grad"},
};

}  // namespace

ObjectiveKind parse_objective(const std::string& tag) {
  for (const auto& t : kTags) {
    if (tag == t.tag) return t.kind;
  }
  fail(ErrorCode::kInvalidArgument, "unknown objective '", tag, "' (loss, dloss, gradnorm, kl, feature, grad)");
}

const char* objective_tag(ObjectiveKind kind) {
  for (const auto& t : kTags) {
    if (kind == t.kind) return t.tag;
  }
  return "?";
}

bool needs_teacher(ObjectiveKind kind) {
  return kind != ObjectiveKind::kTaskLoss && kind != ObjectiveKind::kNegGradNorm;
}

bool needs_student_grads(ObjectiveKind kind) {
  return kind == ObjectiveKind::kNegGradNorm || kind == ObjectiveKind::kGradMatch;
}

Teacher compute_teacher(const ModelState& model, const Batch& batch, ObjectiveKind kind) {
  Teacher t;
  if (kind == ObjectiveKind::kGradMatch) {
    auto grads = loss_gradients(model, batch);
    for (const auto& s : model.layout) t.grads.push_back(std::move(grads[s.param_index]));
  }
  auto trace = forward(model, batch, std::nullopt, kind == ObjectiveKind::kFeatureMatch);
  t.loss = trace.loss;
  t.logits = std::move(trace.logits);
  t.features = std::move(trace.features);
  return t;
}

Var normalise(const Var& x) {
  Var centred = ad::sub(x, ad::mean(x));
  Var var = ad::mean(ad::square(centred));
  return ad::mul(centred, ad::pow(ad::add_scalar(var, kNormEps), -0.5));
}

Var rel_loss_change(const Var& student_loss, double teacher_loss) {
  require(teacher_loss >= 1e-12, ErrorCode::kInvalidArgument, "degenerate teacher loss ", teacher_loss);
  return ad::abs(ad::scale(ad::add_scalar(student_loss, -teacher_loss), 1.0 / teacher_loss));
}

Var reverse_kl(const Var& student_logits, const Tensor& teacher_logits) {
  require(student_logits.shape() == teacher_logits.shape() && student_logits.shape().size() == 2,
          ErrorCode::kShapeMismatch, "reverse KL needs matching [N,C] logits, got ",
          shape_str(student_logits.shape()), " and ", shape_str(teacher_logits.shape()));
  Var log_ps = ad::log_softmax(student_logits);
  Var log_pt;
  {
    ad::NoGradGuard no_grad;
    log_pt = ad::log_softmax(Var::constant(teacher_logits));
  }
  Var per_class = ad::mul(ad::exp(log_ps), ad::sub(log_ps, log_pt));
  return ad::scale(ad::sum(per_class), 1.0 / static_cast<double>(teacher_logits.shape()[0]));
}

Var normalised_mse(std::span<const Var> student, std::span<const Tensor> teacher) {
  require(student.size() == teacher.size(), ErrorCode::kShapeMismatch, "layer count mismatch: ",
          student.size(), " student vs ", teacher.size(), " teacher");
  require(!student.empty(), ErrorCode::kInvalidArgument, "no layers to compare");
  Var total;
  for (std::size_t l = 0; l < student.size(); ++l) {
    Var target;
    {
      ad::NoGradGuard no_grad;
      target = normalise(Var::constant(teacher[l]));
    }
    Var term = ad::mse(normalise(student[l]), target);
    total = l == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, 1.0 / static_cast<double>(student.size()));
}

Var neg_grad_norm(std::span<const Var> grads) {
  require(!grads.empty(), ErrorCode::kInvalidArgument, "no gradients");
  Var sq;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Var term = ad::sum(ad::square(grads[i]));
    sq = i == 0 ? term : ad::add(sq, term);
  }
  return ad::neg(ad::sqrt(sq));
}

Var objective_graph(ObjectiveKind kind, const ModelState& model, const Batch& batch, const Var& overlay,
                    const Teacher& teacher) {
  std::vector<Var> params = overlay_params(model, overlay);
  const bool student_grads = needs_student_grads(kind);
  std::vector<Var> effective;
  if (student_grads) {
    for (const auto& s : model.layout) {
      auto& p = params[s.param_index];
      // With a constant overlay the effective weights become leaves so that
      // their loss gradient still exists.
      if (!p.requires_grad()) p = Var::leaf(p.value());
      effective.push_back(p);
    }
  }
  GraphTrace student = forward_graph(model, batch, params, {kind == ObjectiveKind::kFeatureMatch, false});
  switch (kind) {
    case ObjectiveKind::kTaskLoss:
      return student.loss;
    case ObjectiveKind::kRelLossChange:
      return rel_loss_change(student.loss, teacher.loss);
    case ObjectiveKind::kReverseKl:
      return reverse_kl(student.logits, teacher.logits);
    case ObjectiveKind::kFeatureMatch:
      return normalised_mse(student.features, teacher.features);
    case ObjectiveKind::kNegGradNorm:
    case ObjectiveKind::kGradMatch: {
      auto grads = ad::grad(student.loss, effective, overlay.requires_grad());
      if (kind == ObjectiveKind::kNegGradNorm) return neg_grad_norm(grads);
      return normalised_mse(grads, teacher.grads);
    }
  }
  fail(ErrorCode::kInternal, "unhandled objective");
}

double objective_value(ObjectiveKind kind, const ModelState& model, const Batch& batch,
                       std::span<const double> overlay, const Teacher& teacher) {
  require(static_cast<std::int64_t>(overlay.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "overlay length ", overlay.size(), " does not match mask size ", model.mask_size());
  Var o = Var::constant(Tensor::vector({overlay.begin(), overlay.end()}));
  if (!needs_student_grads(kind)) {
    ad::NoGradGuard no_grad;
    return objective_graph(kind, model, batch, o, teacher).item();
  }
  return objective_graph(kind, model, batch, o, teacher).item();
}

}  // namespace cts
