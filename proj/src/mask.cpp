#include "cts/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cts/error.hpp"

namespace cts {

using ad::Var;

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_kappa(double kappa) {
  require(kappa > 0.0 && kappa <= 1.0 && std::isfinite(kappa), ErrorCode::kInvalidArgument,
          "density kappa must be in (0, 1], got ", kappa);
}

}  // namespace

std::vector<double> MaskDistribution::probabilities() const {
  std::vector<double> out(logits.size());
  std::transform(logits.begin(), logits.end(), out.begin(), sigmoid);
  return out;
}

MaskDistribution init_distribution(std::int64_t d, double kappa, double tau, LayerLayout layout) {
  require(d > 0, ErrorCode::kInvalidArgument, "mask size must be positive, got ", d);
  check_kappa(kappa);
  require(tau > 0.0, ErrorCode::kInvalidArgument, "temperature must be positive, got ", tau);
  const double p = std::min(kappa, kMaxInitDensity);
  MaskDistribution dist;
  dist.logits.assign(static_cast<std::size_t>(d), std::log(p) - std::log1p(-p));
  dist.tau = tau;
  dist.layout = std::move(layout);
  return dist;
}

std::vector<double> logistic_noise(std::size_t d, Rng& rng) {
  std::vector<double> eps(d);
  for (auto& e : eps) {
    const double u = rng.uniform_open();  // never 0, never 1
    e = std::log(u) - std::log1p(-u);
  }
  return eps;
}

std::vector<double> soft_mask_values(std::span<const double> logits, std::span<const double> noise, double tau) {
  require(logits.size() == noise.size(), ErrorCode::kShapeMismatch, "noise length ", noise.size(),
          " != mask size ", logits.size());
  std::vector<double> s(logits.size());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = sigmoid((logits[j] + noise[j]) / tau);
  return s;
}

SoftMask sample_soft_mask(const MaskDistribution& dist, Rng& rng) {
  const auto eps = logistic_noise(dist.size(), rng);
  return {soft_mask_values(dist.logits, eps, dist.tau), 0};
}

Var soft_mask(const Var& logits, std::span<const double> noise, double tau) {
  require(logits.value().size() == noise.size(), ErrorCode::kShapeMismatch, "noise length ",
          noise.size(), " != mask size ", logits.value().size());
  Var eps = Var::constant(Tensor(logits.shape(), std::vector<double>(noise.begin(), noise.end())));
  return ad::sigmoid(ad::scale(ad::add(logits, eps), 1.0 / tau));
}

double expected_density(std::span<const double> logits) {
  require(!logits.empty(), ErrorCode::kInvalidArgument, "empty mask distribution");
  double total = 0.0;
  for (double l : logits) total += sigmoid(l);
  return total / static_cast<double>(logits.size());
}

double expected_density(const MaskDistribution& dist) { return expected_density(dist.logits); }

double sparsity_loss(std::span<const double> logits, double kappa) {
  check_kappa(kappa);
  double total = 0.0;
  for (double l : logits) total += sigmoid(l);
  return total / (kappa * static_cast<double>(logits.size())) - 1.0;
}

std::vector<double> sparsity_loss_grad(std::span<const double> logits, double kappa) {
  check_kappa(kappa);
  const double denom = kappa * static_cast<double>(logits.size());
  std::vector<double> g(logits.size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double s = sigmoid(logits[j]);
    g[j] = s * (1.0 - s) / denom;
  }
  return g;
}

Var sparsity_loss_graph(const Var& logits, double kappa) {
  check_kappa(kappa);
  const double denom = kappa * static_cast<double>(logits.value().size());
  return ad::add_scalar(ad::scale(ad::sum(ad::sigmoid(logits)), 1.0 / denom), -1.0);
}

// ---- tickets ---------------------------------------------------------------------

std::int64_t Ticket::retained() const {
  return std::count(mask.begin(), mask.end(), std::uint8_t{1});
}

std::vector<std::int64_t> Ticket::retained_indices() const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

std::int64_t ticket_size(std::int64_t d, double kappa) {
  check_kappa(kappa);
  const auto n = static_cast<std::int64_t>(std::floor(kappa * static_cast<double>(d) + 0.5));
  require(n > 0, ErrorCode::kEmptyTicket, "empty ticket: round(", kappa, " * ", d, ") == 0");
  return std::min(n, d);
}

Ticket select_count(std::span<const double> scores, std::int64_t n, bool lowest) {
  const auto d = static_cast<std::int64_t>(scores.size());
  require(n > 0, ErrorCode::kEmptyTicket, "empty ticket: nothing to retain");
  require(n <= d, ErrorCode::kInvalidArgument, "cannot retain ", n, " of ", d, " entries");
  for (double s : scores) {
    require(!std::isnan(s), ErrorCode::kNonFinite, "NaN score");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) { return scores[a] > scores[b]; });
  Ticket t;
  t.mask.assign(static_cast<std::size_t>(d), 0);
  if (lowest) {
    for (std::int64_t i = d - n; i < d; ++i) t.mask[order[i]] = 1;
  } else {
    for (std::int64_t i = 0; i < n; ++i) t.mask[order[i]] = 1;
  }
  t.density = static_cast<double>(n) / static_cast<double>(d);
  t.kappa = t.density;
  return t;
}

Ticket select_top(std::span<const double> scores, double kappa, bool lowest) {
  Ticket t = select_count(scores, ticket_size(static_cast<std::int64_t>(scores.size()), kappa), lowest);
  t.kappa = kappa;
  return t;
}

Ticket clamp_topk(const MaskDistribution& dist, double kappa) {
  Ticket t = select_top(dist.logits, kappa, false);
  t.layout = dist.layout;
  t.method = "cts";
  return t;
}

Ticket invert_clamp(const MaskDistribution& dist, double kappa) {
  Ticket t = select_top(dist.logits, kappa, true);
  t.layout = dist.layout;
  t.method = "cts-inverted";
  return t;
}

Ticket ticket_from_mask(std::vector<std::uint8_t> mask, const LayerLayout& layout, double kappa,
                        std::string arch, std::string method) {
  Ticket t;
  t.mask = std::move(mask);
  t.layout = layout;
  t.kappa = kappa;
  t.arch = std::move(arch);
  t.method = std::move(method);
  t.density = t.mask.empty() ? 0.0 : static_cast<double>(t.retained()) / static_cast<double>(t.mask.size());
  return t;
}

std::vector<double> layer_densities(std::span<const std::uint8_t> mask, const LayerLayout& layout) {
  std::vector<double> out;
  for (const auto& s : layout) {
    require(s.offset + s.count <= static_cast<std::int64_t>(mask.size()), ErrorCode::kShapeMismatch,
            "layout slice ", s.name, " exceeds mask length ", mask.size());
    const auto first = mask.begin() + s.offset;
    out.push_back(static_cast<double>(std::count(first, first + s.count, std::uint8_t{1})) /
                  static_cast<double>(s.count));
  }
  return out;
}

std::vector<double> layer_densities(const Ticket& ticket) {
  return layer_densities(ticket.mask, ticket.layout);
}

std::string ticket_to_json(const Ticket& t) {
  nlohmann::ordered_json j;
  j["format"] = "cts-ticket";
  j["version"] = 1;
  j["arch"] = t.arch;
  j["method"] = t.method;
  j["d"] = t.size();
  j["kappa"] = t.kappa;
  j["density"] = t.density;
  auto layout = nlohmann::ordered_json::array();
  for (const auto& s : t.layout) {
    layout.push_back({{"name", s.name}, {"offset", s.offset}, {"count", s.count}, {"shape", s.shape}, {"param", s.param_index}});
  }
  j["layout"] = layout;
  j["retained"] = t.retained_indices();
  return j.dump(1) + "\n";
}

Ticket ticket_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kParse, "ticket is not valid JSON at byte offset ", e.byte, ": ", e.what());
  }
  try {
    require(j.at("format") == "cts-ticket", ErrorCode::kParse, "not a ticket file");
    require(j.at("version") == 1, ErrorCode::kParse, "unsupported ticket version ", j.at("version").dump());
    Ticket t;
    t.arch = j.at("arch").get<std::string>();
    t.method = j.at("method").get<std::string>();
    t.kappa = j.at("kappa").get<double>();
    const auto d = j.at("d").get<std::int64_t>();
    require(d >= 0, ErrorCode::kParse, "negative mask size");
    t.mask.assign(static_cast<std::size_t>(d), 0);
    std::int64_t prev = -1;
    for (const auto& v : j.at("retained")) {
      const auto i = v.get<std::int64_t>();
      require(i > prev && i < d, ErrorCode::kParse, "retained indices must be sorted, unique and < d; got ", i);
      t.mask[static_cast<std::size_t>(i)] = 1;
      prev = i;
    }
    for (const auto& s : j.at("layout")) {
      t.layout.push_back({s.at("name").get<std::string>(), s.at("offset").get<std::int64_t>(),
                          s.at("count").get<std::int64_t>(), s.at("shape").get<Shape>(),
                          s.value("param", std::size_t{0})});
    }
    t.density = d == 0 ? 0.0 : static_cast<double>(t.retained()) / static_cast<double>(d);
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, "malformed ticket: ", e.what());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::kIo, "cannot open '", path, "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::kIo, "cannot open '", path, "' for writing");
  f << text;
  require(f.good(), ErrorCode::kIo, "write to '", path, "' failed");
}

void save_ticket(const std::string& path, const Ticket& ticket) { write_text_file(path, ticket_to_json(ticket)); }

Ticket load_ticket(const std::string& path) { return ticket_from_json(read_text_file(path)); }

}  // namespace cts
