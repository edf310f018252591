#include "cts/baselines.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "cts/error.hpp"

namespace cts {

using ad::Var;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> flat_grad(const ModelState& model, const std::vector<Tensor>& grads) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(model.mask_size()));
  for (const auto& s : model.layout) {
    const auto& g = grads[s.param_index].data();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

// Fisher-Yates driven by Rng::below so the result does not depend on the
// standard library's shuffle.
void shuffle(std::span<std::uint8_t> v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

}  // namespace

SaliencyScores snip_scores(const ModelState& model, const Batch& batch) {
  const auto g = flat_grad(model, loss_gradients(model, batch));
  const auto theta = flat_maskable(model);
  SaliencyScores s{std::vector<double>(g.size()), "snip", SelectionRule::kLargest};
  for (std::size_t j = 0; j < g.size(); ++j) s.scores[j] = std::fabs(g[j] * theta[j]);
  return s;
}

std::vector<double> grasp_from_gradient(std::span<const double> theta, const GradientFn& grad) {
  const double theta_norm = norm2(theta);
  if (theta_norm == 0.0) return std::vector<double>(theta.size(), 0.0);
  const auto v = grad(theta);
  require(v.size() == theta.size(), ErrorCode::kShapeMismatch, "gradient length mismatch");
  const double v_norm = norm2(v);
  require(v_norm >= 1e-12, ErrorCode::kInvalidArgument, "zero gradient; GraSP undefined");
  const double h = 1e-4 * theta_norm / v_norm;
  std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    plus[j] += h * v[j];
    minus[j] -= h * v[j];
  }
  const auto gp = grad(plus), gm = grad(minus);
  std::vector<double> scores(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) scores[j] = -((gp[j] - gm[j]) / (2.0 * h)) * theta[j];
  return scores;
}

SaliencyScores grasp_scores(const ModelState& model, const Batch& batch) {
  const auto theta = flat_maskable(model);
  GradientFn grad = [&](std::span<const double> w) {
    ModelState probe = model;
    set_flat_maskable(probe, w);
    return flat_grad(probe, loss_gradients(probe, batch));
  };
  return {grasp_from_gradient(theta, grad), "grasp", SelectionRule::kLargest};
}

SaliencyScores noisy_overlay_scores(const ModelState& model, const Batch& batch, ObjectiveKind kind,
                                    double sigma, std::uint64_t seed) {
  require(needs_teacher(kind), ErrorCode::kInvalidArgument, "noisy overlay scoring needs a teacher-comparing objective, got ",
          objective_tag(kind));
  require(sigma >= 0, ErrorCode::kInvalidArgument, "noise scale must be >= 0");
  Rng rng(seed, Stream::kOverlayNoise);
  Tensor s(Shape{model.mask_size()});
  for (auto& v : s.values()) v = 1.0 + sigma * rng.normal();
  const Teacher teacher = compute_teacher(model, batch, kind);
  auto leaf = Var::leaf(s);
  Var r = objective_graph(kind, model, batch, leaf, teacher);
  const Tensor g = ad::grad_values(r, std::span(&leaf, 1))[0];
  SaliencyScores out{std::vector<double>(g.size()), std::string("overlay-") + objective_tag(kind),
                     SelectionRule::kLargestMagnitude};
  for (std::size_t j = 0; j < g.size(); ++j) out.scores[j] = std::fabs(g[j]);
  return out;
}

Ticket prune_by_scores(const SaliencyScores& scores, double kappa, const ModelState& model) {
  require(static_cast<std::int64_t>(scores.scores.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "score length ", scores.scores.size(), " != mask size ", model.mask_size());
  std::vector<double> key = scores.scores;
  if (scores.rule == SelectionRule::kLargestMagnitude) {
    for (auto& v : key) v = std::fabs(v);
  }
  Ticket t = select_top(key, kappa);
  t.layout = model.layout;
  t.arch = model.arch;
  t.method = scores.method;
  return t;
}

Ticket magnitude_prune(const ModelState& model, double kappa) {
  auto theta = flat_maskable(model);
  for (auto& v : theta) v = std::fabs(v);
  Ticket t = select_top(theta, kappa);
  t.layout = model.layout;
  t.arch = model.arch;
  t.method = "magnitude";
  return t;
}

Ticket random_prune(std::int64_t d, double kappa, std::uint64_t seed) {
  const std::int64_t n = ticket_size(d, kappa);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(d), 0);
  std::fill_n(mask.begin(), n, std::uint8_t{1});
  Rng rng(seed, Stream::kRandomPrune);
  shuffle(mask, rng);
  Ticket t;
  t.mask = std::move(mask);
  t.density = static_cast<double>(n) / static_cast<double>(d);
  t.kappa = kappa;
  t.method = "random";
  return t;
}

void check_layer_collapse(const Ticket& ticket) {
  const auto dens = layer_densities(ticket);
  for (std::size_t i = 0; i < dens.size(); ++i) {
    require(dens[i] > 0.0, ErrorCode::kState, "layer collapse: ", ticket.layout[i].name,
            " has no retained weights");
  }
}

namespace {

ModelState abs_network(const ModelState& model) {
  ModelState surrogate = model;
  for (auto& p : surrogate.params) {
    for (auto& v : p.values()) v = std::fabs(v);
  }
  return surrogate;
}

Batch ones_input(const ModelState& model) {
  Shape in{1};
  in.insert(in.end(), model.input_shape.begin(), model.input_shape.end());
  return {Tensor(in, 1.0), {0}};
}

}  // namespace

double synaptic_flow(const ModelState& model, const Ticket& ticket) {
  ModelState surrogate = abs_network(model);
  apply_mask(surrogate, ticket.mask);
  ad::NoGradGuard no_grad;
  auto g = forward_graph(surrogate, ones_input(model), constant_params(surrogate), {false, false, true});
  return ad::sum(g.logits).item();
}

void check_flow_collapse(const ModelState& model, const Ticket& ticket) {
  std::vector<bool> branch(model.params.size(), false);
  for (const auto& l : model.layers) {
    if (l.kind == LayerKind::kResidualBlock) {
      for (auto i : l.params) branch[i] = true;
    }
  }
  const auto dens = layer_densities(ticket.mask, model.layout);
  for (std::size_t i = 0; i < dens.size(); ++i) {
    require(dens[i] > 0.0 || branch[model.layout[i].param_index], ErrorCode::kState,
            "layer collapse: ", model.layout[i].name, " has no retained weights");
  }
  require(synaptic_flow(model, ticket) > 0.0, ErrorCode::kState,
          "layer collapse: no input-output path survives");
}

Ticket synflow_prune(const ModelState& model, double kappa, int iterations) {
  require(iterations >= 1, ErrorCode::kInvalidArgument, "SynFlow needs at least one iteration");
  const std::int64_t d = model.mask_size();
  ticket_size(d, kappa);  // validates kappa and non-emptiness

  const ModelState surrogate = abs_network(model);
  const Batch ones = ones_input(model);
  const auto abs_theta = flat_maskable(surrogate);

  Ticket t;
  t.mask.assign(static_cast<std::size_t>(d), 1);
  t.layout = model.layout;
  t.arch = model.arch;
  t.method = "synflow";
  t.kappa = kappa;
  for (int i = 1; i <= iterations; ++i) {
    std::vector<Var> params;
    for (const auto& p : surrogate.params) params.push_back(Var::constant(p));
    std::vector<Var> leaves;
    for (const auto& s : model.layout) {
      Tensor w = surrogate.params[s.param_index];
      for (std::int64_t j = 0; j < s.count; ++j) {
        if (!t.mask[static_cast<std::size_t>(s.offset + j)]) w[static_cast<std::size_t>(j)] = 0.0;
      }
      params[s.param_index] = Var::leaf(std::move(w));
      leaves.push_back(params[s.param_index]);
    }
    GraphTrace g = forward_graph(surrogate, ones, params, {false, false, true});
    const auto grads = ad::grad_values(ad::sum(g.logits), leaves);
    std::vector<double> scores(static_cast<std::size_t>(d));
    for (std::size_t l = 0; l < model.layout.size(); ++l) {
      const auto& s = model.layout[l];
      for (std::int64_t j = 0; j < s.count; ++j) {
        const auto idx = static_cast<std::size_t>(s.offset + j);
        scores[idx] = t.mask[idx] ? grads[l][static_cast<std::size_t>(j)] * abs_theta[idx] : kNegInf;
      }
    }
    const double density = std::pow(kappa, static_cast<double>(i) / iterations);
    const std::int64_t n = i == iterations ? ticket_size(d, kappa) : std::max<std::int64_t>(1, ticket_size(d, density));
    t.mask = select_count(scores, n).mask;
  }
  check_flow_collapse(model, t);
  t.density = static_cast<double>(t.retained()) / static_cast<double>(d);
  return t;
}

// ---- LTR ----------------------------------------------------------------------------

std::int64_t ltr_count(std::int64_t d, double p, int round) {
  require(p > 0 && p < 1, ErrorCode::kInvalidArgument, "prune fraction must be in (0,1), got ", p);
  const double keep = std::pow(1.0 - p, round);
  const auto n = static_cast<std::int64_t>(std::floor(static_cast<double>(d) * keep + 0.5));
  require(n > 0, ErrorCode::kEmptyTicket, "empty ticket after ", round, " LTR rounds");
  return n;
}

LtrResult run_ltr(const LtrConfig& cfg, const std::string& arch, const Dataset& data) {
  require(cfg.rounds >= 1, ErrorCode::kInvalidArgument, "LTR needs at least one round");
  cfg.train.validate();
  LtrResult out;
  const ModelState init = build_model(arch, cfg.train.seed, data.sample_shape, data.num_classes);
  out.rewound = train(init, data, cfg.train, std::nullopt, cfg.train.rewind_step);
  const std::int64_t d = init.mask_size();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(d), 1);
  for (int r = 0; r <= cfg.rounds; ++r) {
    LtrRound round;
    round.ticket = ticket_from_mask(mask, init.layout, static_cast<double>(ltr_count(d, cfg.prune_fraction, r)) / d,
                                    arch, "ltr");
    round.start = out.rewound;
    apply_mask(round.start, mask);
    round.final_model = train(round.start, data, cfg.train, mask);
    round.eval = evaluate(round.final_model, data);
    if (r < cfg.rounds) {
      auto scores = flat_maskable(round.final_model);
      for (std::size_t j = 0; j < scores.size(); ++j) scores[j] = mask[j] ? std::fabs(scores[j]) : kNegInf;
      mask = select_count(scores, ltr_count(d, cfg.prune_fraction, r + 1)).mask;
    }
    out.rounds.push_back(std::move(round));
  }
  return out;
}

// ---- sanity ablations -----------------------------------------------------------------

Ablation parse_ablation(const std::string& text) {
  if (text == "shuffle" || text == "shuffle_layerwise") return Ablation::kShuffleLayerwise;
  if (text == "reinit") return Ablation::kReinit;
  if (text == "invert") return Ablation::kInvert;
  fail(ErrorCode::kInvalidArgument, "unknown ablation '", text, "' (shuffle, reinit, invert)");
}

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kShuffleLayerwise:
      return "shuffle";
    case Ablation::kReinit:
      return "reinit";
    case Ablation::kInvert:
      return "invert";
  }
  return "?";
}

Ticket shuffle_layerwise(const Ticket& ticket, std::uint64_t seed) {
  require(!ticket.layout.empty(), ErrorCode::kInvalidArgument, "ticket has no layer layout");
  Ticket out = ticket;
  for (std::size_t l = 0; l < ticket.layout.size(); ++l) {
    const auto& s = ticket.layout[l];
    require(s.offset + s.count <= out.size(), ErrorCode::kShapeMismatch, "layout exceeds mask");
    Rng rng(seed, Stream::kShuffle, l);
    shuffle(std::span(out.mask).subspan(static_cast<std::size_t>(s.offset), static_cast<std::size_t>(s.count)), rng);
  }
  out.method = ticket.method + "+shuffle";
  return out;
}

ModelState reinit_model(const ModelState& model, std::uint64_t seed) {
  return build_model(model.arch, seed, model.input_shape, model.num_classes);
}

Ticket invert_ticket(const MaskDistribution* dist, double kappa) {
  require(dist != nullptr, ErrorCode::kState, "score inversion needs the stored mask distribution");
  return invert_clamp(*dist, kappa);
}

// ---- one baseline run -------------------------------------------------------------

namespace {

struct MethodName {
  BaselineMethod method;
  const char* name;
};
constexpr MethodName kMethods[] = {
    {BaselineMethod::kSnip, "snip"},           {BaselineMethod::kGrasp, "grasp"},
    {BaselineMethod::kSynflow, "synflow"},     {BaselineMethod::kMagnitude, "magnitude"},
    {BaselineMethod::kRandom, "random"},       {BaselineMethod::kNoisyOverlay, "overlay"},
};

}  // namespace

BaselineMethod parse_baseline(const std::string& text) {
  for (const auto& m : kMethods) {
    if (text == m.name) return m.method;
  }
  fail(ErrorCode::kInvalidArgument, "unknown baseline '", text,
       "' (snip, grasp, synflow, magnitude, random, overlay)");
}

const char* baseline_name(BaselineMethod method) {
  for (const auto& m : kMethods) {
    if (method == m.method) return m.name;
  }
  return "?";
}

Ticket baseline_ticket(const BaselineConfig& cfg, const ModelState& model, const Dataset& data) {
  const std::size_t n = std::min(data.train_size(), cfg.score_batch_factor * cfg.train.batch_size);
  Ticket t;
  switch (cfg.method) {
    case BaselineMethod::kSnip:
      t = prune_by_scores(snip_scores(model, data.train_prefix(n)), cfg.kappa, model);
      break;
    case BaselineMethod::kGrasp:
      t = prune_by_scores(grasp_scores(model, data.train_prefix(n)), cfg.kappa, model);
      break;
    case BaselineMethod::kNoisyOverlay:
      t = prune_by_scores(noisy_overlay_scores(model, data.train_prefix(n), cfg.overlay_objective,
                                               cfg.overlay_sigma, cfg.prune_seed),
                          cfg.kappa, model);
      break;
    case BaselineMethod::kSynflow:
      t = synflow_prune(model, cfg.kappa, cfg.synflow_iterations);
      break;
    case BaselineMethod::kMagnitude:
      t = magnitude_prune(model, cfg.kappa);
      break;
    case BaselineMethod::kRandom:
      t = random_prune(model.mask_size(), cfg.kappa, cfg.prune_seed);
      break;
  }
  t.layout = model.layout;
  t.arch = model.arch;
  return t;
}

BaselineResult run_baseline(const BaselineConfig& cfg, const std::string& arch, const Dataset& data) {
  cfg.train.validate();
  BaselineResult out;
  const ModelState init = build_model(arch, cfg.train.seed, data.sample_shape, data.num_classes);
  out.rewound = train(init, data, cfg.train, std::nullopt, cfg.train.rewind_step);
  out.ticket = baseline_ticket(cfg, out.rewound, data);
  ModelState masked = out.rewound;
  apply_mask(masked, out.ticket.mask);
  out.post_draw_loss = evaluate(masked, data).loss;
  out.final_model = train(out.rewound, data, quick_schedule(cfg.train, cfg.quick_factor), out.ticket.mask);
  out.eval = evaluate(out.final_model, data);
  return out;
}

}  // namespace cts
