#ifndef CTS_MASK_HPP_
#define CTS_MASK_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cts/autograd.hpp"
#include "cts/model.hpp"
#include "cts/rng.hpp"

namespace cts {

inline constexpr double kDefaultTemperature = 2.0 / 3.0;
// Densities above this are clamped before taking the logit.
inline constexpr double kMaxInitDensity = 1.0 - 1e-9;

// Independent Bernoulli retention probabilities alpha = sigmoid(logits).
struct MaskDistribution {
  std::vector<double> logits;
  double tau = kDefaultTemperature;
  LayerLayout layout;

  std::size_t size() const { return logits.size(); }
  std::vector<double> probabilities() const;
};

struct SoftMask {
  std::vector<double> values;
  std::uint64_t seed = 0;
};

// All logits = logit(min(kappa, 1 - 1e-9)).
MaskDistribution init_distribution(std::int64_t d, double kappa, double tau = kDefaultTemperature,
                                   LayerLayout layout = {});

// eps = log(u) - log(1 - u) with u uniform on the open interval.
std::vector<double> logistic_noise(std::size_t d, Rng& rng);

// s = sigmoid((logits + noise) / tau)
SoftMask sample_soft_mask(const MaskDistribution& dist, Rng& rng);
std::vector<double> soft_mask_values(std::span<const double> logits, std::span<const double> noise, double tau);
// Same, as a graph node differentiable in `logits` (noise is constant).
ad::Var soft_mask(const ad::Var& logits, std::span<const double> noise, double tau);

// Mean retention probability, sum(sigmoid(logits)) / d.
double expected_density(const MaskDistribution& dist);
double expected_density(std::span<const double> logits);

// E||m||_0 / (kappa d) - 1
double sparsity_loss(std::span<const double> logits, double kappa);
// Closed form: sigmoid'(logit_j) / (kappa d).
std::vector<double> sparsity_loss_grad(std::span<const double> logits, double kappa);
// Graph version, only used to cross-check the closed form.
ad::Var sparsity_loss_graph(const ad::Var& logits, double kappa);

// ---- tickets ---------------------------------------------------------------------

struct Ticket {
  std::vector<std::uint8_t> mask;
  LayerLayout layout;
  double density = 0.0;
  double kappa = 0.0;
  std::string arch;
  std::string method;

  std::int64_t size() const { return static_cast<std::int64_t>(mask.size()); }
  std::int64_t retained() const;
  std::vector<std::int64_t> retained_indices() const;
};

// floor(kappa d + 1/2); throws kEmptyTicket when that is zero.
std::int64_t ticket_size(std::int64_t d, double kappa);

// Keeps the n = ticket_size(d, kappa) highest scores; equal scores go to the
// lower flat index. With `lowest` the selection is the last n of that same
// order, so the two selections are complementary at kappa = 1/2.
Ticket select_top(std::span<const double> scores, double kappa, bool lowest = false);
Ticket select_count(std::span<const double> scores, std::int64_t n, bool lowest = false);

Ticket clamp_topk(const MaskDistribution& dist, double kappa);
Ticket invert_clamp(const MaskDistribution& dist, double kappa);

Ticket ticket_from_mask(std::vector<std::uint8_t> mask, const LayerLayout& layout, double kappa,
                        std::string arch, std::string method);

// Per-layer fraction of retained entries, in layout order.
std::vector<double> layer_densities(const Ticket& ticket);
std::vector<double> layer_densities(std::span<const std::uint8_t> mask, const LayerLayout& layout);

std::string ticket_to_json(const Ticket& ticket);
Ticket ticket_from_json(const std::string& text);
void save_ticket(const std::string& path, const Ticket& ticket);
Ticket load_ticket(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace cts

#endif  // CTS_MASK_HPP_
