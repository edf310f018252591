#ifndef CTS_SEARCH_HPP_
#define CTS_SEARCH_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "cts/controllers.hpp"
#include "cts/dataset.hpp"
#include "cts/mask.hpp"
#include "cts/objectives.hpp"
#include "cts/train.hpp"

namespace cts {

struct SearchConfig {
  double kappa = 0.05;
  double tau = kDefaultTemperature;
  std::int64_t search_steps = 1000;  // S
  ObjectiveKind objective = ObjectiveKind::kReverseKl;
  ControllerConfig controller;
  AdamConfig adam;
  // T, k, batch size, schedule and the init/train seed.
  TrainConfig train;
  std::uint64_t search_seed = 1;
  // Fraction of the T - k retraining steps actually run (1, 1/2 or 1/8).
  double quick_factor = 1.0;

  void validate() const;
};

// Search steps covering `epochs` passes over the training set.
std::int64_t search_steps_for_epochs(const Dataset& data, std::size_t batch_size, double epochs);

struct SearchRecord {
  std::int64_t step = 0;
  double objective = 0.0;
  double sparsity_loss = 0.0;
  // Expected density after this step's update.
  double expected_density = 0.0;
  double lambda = 0.0;
};

struct SearchTrace {
  std::vector<SearchRecord> records;
  // (step, 20-bin histogram of alpha over [0,1]) every max(1, S/100) steps.
  std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> histograms;
  // Steps whose expected density exceeded 1.1 kappa_eff after the density
  // had first dropped to kappa_eff or below.
  std::int64_t overshoot_violations = 0;
  std::int64_t degenerate_steps = 0;
};

struct SearchOutcome {
  MaskDistribution dist;
  SearchTrace trace;
};

// Runs S controller + Adam steps on frozen weights. Batches come from the
// training set without augmentation; the noise of step i is drawn from
// (search_seed, i).
SearchOutcome search_phase(const ModelState& frozen, const SearchConfig& cfg, const Dataset& data);

struct CtsResult {
  Ticket ticket;
  ModelState rewound;  // theta_k
  ModelState final_model;
  MaskDistribution dist;
  SearchTrace trace;
  // Test loss of theta_k under the hard ticket, before retraining.
  double post_draw_loss = 0.0;
  EvalResult eval;
};

// Pre-train k steps, search, clamp, retrain the ticket to T (or T').
CtsResult run_cts(const SearchConfig& cfg, const std::string& arch, const Dataset& data);

// theta with the ticket applied, evaluated on the test set.
EvalResult evaluate_ticket(const ModelState& model, const Ticket& ticket, const Dataset& data);

}  // namespace cts

#endif  // CTS_SEARCH_HPP_
