#ifndef CTS_BASELINES_HPP_
#define CTS_BASELINES_HPP_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cts/dataset.hpp"
#include "cts/mask.hpp"
#include "cts/model.hpp"
#include "cts/objectives.hpp"
#include "cts/train.hpp"

namespace cts {

enum class SelectionRule { kLargest, kLargestMagnitude };

struct SaliencyScores {
  std::vector<double> scores;
  std::string method;
  SelectionRule rule = SelectionRule::kLargest;
};

// |dL/dtheta * theta| over maskable entries.
SaliencyScores snip_scores(const ModelState& model, const Batch& batch);

using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

// -(H g) * theta with g = grad(theta) and H g from a central difference of
// gradients along g, step h = 1e-4 |theta| / |g|.
std::vector<double> grasp_from_gradient(std::span<const double> theta, const GradientFn& grad);
SaliencyScores grasp_scores(const ModelState& model, const Batch& batch);

// Scores |dR/ds| at s = 1 + N(0, sigma^2) for a teacher-comparing objective.
inline constexpr double kOverlayNoise = 6e-2;
SaliencyScores noisy_overlay_scores(const ModelState& model, const Batch& batch, ObjectiveKind kind,
                                    double sigma = kOverlayNoise, std::uint64_t seed = 0);

// Top round(kappa d) by the score's selection rule (clamp tie rule).
Ticket prune_by_scores(const SaliencyScores& scores, double kappa, const ModelState& model);

Ticket magnitude_prune(const ModelState& model, double kappa);
Ticket random_prune(std::int64_t d, double kappa, std::uint64_t seed);

// Iterative SynFlow on the |theta| network with an all-ones input and batch
// norm bypassed; density kappa^(i/iterations) after round i. Throws kState on
// layer collapse (see check_flow_collapse).
Ticket synflow_prune(const ModelState& model, double kappa, int iterations = 100);

// Throws kState if any maskable tensor has no retained entry.
void check_layer_collapse(const Ticket& ticket);

// Collapse in the connectivity sense: throws kState if a tensor outside the
// residual branches is empty, or if no input-output path survives (zero
// synaptic flow). An emptied residual-branch conv leaves the skip path and
// is allowed.
void check_flow_collapse(const ModelState& model, const Ticket& ticket);

// Sum of the outputs of the |theta| network (ticket applied) on an all-ones input.
double synaptic_flow(const ModelState& model, const Ticket& ticket);

// ---- LTR ----------------------------------------------------------------------------

struct LtrConfig {
  double prune_fraction = 0.2;
  int rounds = 3;
  TrainConfig train;
};

struct LtrRound {
  Ticket ticket;
  ModelState start;  // theta_k with the round's mask applied
  ModelState final_model;
  EvalResult eval;
};

struct LtrResult {
  ModelState rewound;  // theta_k
  // rounds[0] is the dense run; rounds[r] has density close to (1 - p)^r.
  std::vector<LtrRound> rounds;
};

// Entries kept after r rounds: round(d (1 - p)^r).
std::int64_t ltr_count(std::int64_t d, double prune_fraction, int round);
LtrResult run_ltr(const LtrConfig& cfg, const std::string& arch, const Dataset& data);

// ---- sanity ablations -----------------------------------------------------------------

enum class Ablation { kShuffleLayerwise, kReinit, kInvert };

Ablation parse_ablation(const std::string& text);
const char* ablation_name(Ablation a);

// Uniform permutation of the mask bits inside every layer.
Ticket shuffle_layerwise(const Ticket& ticket, std::uint64_t seed);
// Fresh initial weights (same arch and shapes) drawn from `seed`.
ModelState reinit_model(const ModelState& model, std::uint64_t seed);
// invert_clamp on the stored distribution; kState if there is none.
Ticket invert_ticket(const MaskDistribution* dist, double kappa);

// ---- one baseline run -------------------------------------------------------------

enum class BaselineMethod { kSnip, kGrasp, kSynflow, kMagnitude, kRandom, kNoisyOverlay };

BaselineMethod parse_baseline(const std::string& text);
const char* baseline_name(BaselineMethod m);

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::kSnip;
  double kappa = 0.05;
  TrainConfig train;
  // Scores use the first score_batch_factor * batch_size training samples.
  std::size_t score_batch_factor = 10;
  int synflow_iterations = 100;
  ObjectiveKind overlay_objective = ObjectiveKind::kReverseKl;
  double overlay_sigma = kOverlayNoise;
  std::uint64_t prune_seed = 0;
  double quick_factor = 1.0;
};

struct BaselineResult {
  Ticket ticket;
  ModelState rewound;
  ModelState final_model;
  double post_draw_loss = 0.0;
  EvalResult eval;
};

// Train to k, score and prune theta_k, retrain the ticket.
BaselineResult run_baseline(const BaselineConfig& cfg, const std::string& arch, const Dataset& data);
Ticket baseline_ticket(const BaselineConfig& cfg, const ModelState& model, const Dataset& data);

}  // namespace cts

#endif  // CTS_BASELINES_HPP_
