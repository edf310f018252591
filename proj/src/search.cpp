#include "cts/search.hpp"

#include <cmath>
#include <iostream>

#include "cts/error.hpp"

namespace cts {

void SearchConfig::validate() const {
  require(kappa > 0 && kappa <= 1, ErrorCode::kInvalidArgument, "kappa must be in (0,1], got ", kappa);
  require(tau > 0, ErrorCode::kInvalidArgument, "temperature must be positive");
  require(search_steps >= 0, ErrorCode::kInvalidArgument, "search steps must be >= 0");
  require(quick_factor > 0 && quick_factor <= 1, ErrorCode::kInvalidArgument,
          "quick factor must be in (0,1], got ", quick_factor);
  train.validate();
}

std::int64_t search_steps_for_epochs(const Dataset& data, std::size_t batch_size, double epochs) {
  require(batch_size > 0 && batch_size <= data.train_size(), ErrorCode::kInvalidArgument,
          "batch size ", batch_size, " does not fit ", data.train_size(), " training samples");
  const double per_epoch = static_cast<double>(data.train_size() / batch_size);
  return static_cast<std::int64_t>(std::llround(epochs * per_epoch));
}

namespace {

std::vector<std::int64_t> alpha_histogram(const MaskDistribution& dist) {
  std::vector<std::int64_t> bins(20, 0);
  for (double a : dist.probabilities()) {
    const auto b = std::min<std::int64_t>(19, static_cast<std::int64_t>(a * 20.0));
    ++bins[static_cast<std::size_t>(b)];
  }
  return bins;
}

}  // namespace

SearchOutcome search_phase(const ModelState& frozen, const SearchConfig& cfg, const Dataset& data) {
  cfg.validate();
  SearchOutcome out;
  out.dist = init_distribution(frozen.mask_size(), cfg.kappa, cfg.tau, frozen.layout);
  ControllerState ctl = init_controller(cfg.controller, cfg.kappa);
  AdamState adam = init_adam(cfg.adam, out.dist.size(), cfg.search_steps);
  BatchStream stream(data, cfg.train.batch_size, cfg.search_seed, Stream::kSearchBatches);
  const std::int64_t hist_every = std::max<std::int64_t>(1, cfg.search_steps / 100);
  const double ceiling = 1.1 * ctl.kappa_eff;
  bool reached = expected_density(out.dist) <= ctl.kappa_eff;

  for (std::int64_t step = 0; step < cfg.search_steps; ++step) {
    const Batch batch = stream.batch(static_cast<std::uint64_t>(step));
    const Teacher teacher = needs_teacher(cfg.objective) ? compute_teacher(frozen, batch, cfg.objective) : Teacher{};
    Rng noise_rng(cfg.search_seed, Stream::kSearchNoise, static_cast<std::uint64_t>(step));
    const auto noise = logistic_noise(out.dist.size(), noise_rng);

    StepResult r = controller_step(frozen, out.dist, ctl, batch, cfg.objective, teacher, noise);
    if (r.degenerate) ++out.trace.degenerate_steps;
    adam_update(out.dist, r.g_alpha, adam);
    if (ctl.mode == ControllerMode::kLagrange) lagrange_update(ctl, r.g_lambda);

    const double density = expected_density(out.dist);
    if (reached && density > ceiling) ++out.trace.overshoot_violations;
    reached = reached || density <= ctl.kappa_eff;
    out.trace.records.push_back({step, r.objective, r.sparsity_loss, density, ctl.lambda});
    if (step % hist_every == 0 || step + 1 == cfg.search_steps) {
      out.trace.histograms.emplace_back(step, alpha_histogram(out.dist));
    }
  }
  if (out.trace.degenerate_steps > 0) {
    std::cerr << "warning: constraint gradient vanished on " << out.trace.degenerate_steps
              << " search steps; lambda target set to 0\n";
  }
  return out;
}

EvalResult evaluate_ticket(const ModelState& model, const Ticket& ticket, const Dataset& data) {
  ModelState masked = model;
  apply_mask(masked, ticket.mask);
  return evaluate(masked, data);
}

CtsResult run_cts(const SearchConfig& cfg, const std::string& arch, const Dataset& data) {
  cfg.validate();
  CtsResult out;
  const ModelState init = build_model(arch, cfg.train.seed, data.sample_shape, data.num_classes);
  out.rewound = train(init, data, cfg.train, std::nullopt, cfg.train.rewind_step);

  const ModelState frozen = out.rewound;
  SearchOutcome s = search_phase(frozen, cfg, data);
  out.dist = std::move(s.dist);
  out.trace = std::move(s.trace);

  out.ticket = clamp_topk(out.dist, cfg.kappa);
  out.ticket.arch = arch;
  out.ticket.method = "cts";
  out.post_draw_loss = evaluate_ticket(out.rewound, out.ticket, data).loss;

  const TrainConfig retrain = quick_schedule(cfg.train, cfg.quick_factor);
  out.final_model = train(out.rewound, data, retrain, out.ticket.mask);
  out.eval = evaluate(out.final_model, data);
  return out;
}

}  // namespace cts
