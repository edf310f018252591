#include "cts/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cts/error.hpp"

namespace cts {

namespace pt = boost::property_tree;

ConfigMap parse_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorCode::kParse, "config line ", e.line(), ": ", e.message());
  }
  ConfigMap out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) fail(ErrorCode::kParse, "config key '", section, "' outside a section");
    for (const auto& [key, value] : body) set_config_value(out, section + "." + key, value.data());
  }
  return out;
}

ConfigMap load_ini(const std::string& path) { return parse_ini(read_text_file(path)); }

std::string format_ini(const ConfigMap& map) {
  std::string out, section;
  for (const auto& [full, value] : map) {
    const auto dot = full.find('.');
    const std::string s = full.substr(0, dot);
    if (s != section) {
      if (!out.empty()) out += "\n";
      out += "[" + s + "]\n";
      section = s;
    }
    out += full.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "task.dataset", "task.arch",
      "train.steps", "train.batch_size", "train.lr", "train.lr_drop_factor", "train.lr_drops",
      "train.momentum", "train.weight_decay", "train.rewind_step", "train.seed", "train.augment",
      "train.precision",
      "search.kappa", "search.tau", "search.steps", "search.epochs", "search.objective",
      "search.controller", "search.eta", "search.lambda_lr", "search.adam_lr", "search.adam_drop_at",
      "search.adam_drop_factor", "search.seed", "search.quick",
      "baseline.method", "baseline.kappa", "baseline.score_batch_factor", "baseline.synflow_iterations",
      "baseline.overlay_objective", "baseline.overlay_sigma", "baseline.prune_seed",
      "ltr.prune_fraction", "ltr.rounds",
      "sweep.methods", "sweep.densities", "sweep.sparsities", "sweep.repeats", "sweep.seed",
      "sweep.workers", "sweep.mode", "sweep.ablations", "sweep.tickets",
      "oracle.kappa", "oracle.objective", "oracle.samples",
      "output.dir",
  };
  return keys;
}

void set_config_value(ConfigMap& map, const std::string& key, const std::string& value) {
  const auto& keys = known_config_keys();
  require(std::find(keys.begin(), keys.end(), key) != keys.end(), ErrorCode::kParse,
          "unknown config key '", key, "'");
  map[key] = value;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  require(ec == std::errc() && p == end, ErrorCode::kParse, "config ", key, ": '", text,
          "' is not a valid number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  fail(ErrorCode::kParse, "config ", key, ": '", text, "' is not a boolean");
}

class Reader {
 public:
  explicit Reader(const ConfigMap& map) : map_(map) {}

  const std::string* get(const std::string& key) const {
    auto it = map_.find(key);
    return it == map_.end() ? nullptr : &it->second;
  }
  template <typename T>
  void number(const std::string& key, T& dst) const {
    if (auto* v = get(key)) dst = parse_number<T>(key, *v);
  }
  void text(const std::string& key, std::string& dst) const {
    if (auto* v = get(key)) dst = *v;
  }
  void flag(const std::string& key, bool& dst) const {
    if (auto* v = get(key)) dst = parse_bool(key, *v);
  }
  template <typename T>
  void list(const std::string& key, std::vector<T>& dst) const {
    if (auto* v = get(key)) {
      dst.clear();
      for (const auto& item : split_list(*v)) dst.push_back(parse_number<T>(key, item));
    }
  }

 private:
  const ConfigMap& map_;
};

}  // namespace

ExperimentConfig experiment_config(const ConfigMap& map) {
  ExperimentConfig c;
  c.train.steps = 1000;
  c.train.lr.drop_steps = {500, 750};
  c.train.rewind_step = 50;
  c.search.search_steps = 1000;

  Reader r(map);
  r.text("task.dataset", c.dataset);
  r.text("task.arch", c.arch);

  r.number("train.steps", c.train.steps);
  r.number("train.batch_size", c.train.batch_size);
  r.number("train.lr", c.train.lr.initial);
  r.number("train.lr_drop_factor", c.train.lr.drop_factor);
  r.list("train.lr_drops", c.train.lr.drop_steps);
  r.number("train.momentum", c.train.momentum);
  r.number("train.weight_decay", c.train.weight_decay);
  r.number("train.rewind_step", c.train.rewind_step);
  r.number("train.seed", c.train.seed);
  r.flag("train.augment", c.train.augment);
  if (auto* v = r.get("train.precision")) c.train.precision = parse_precision(*v);

  r.number("search.kappa", c.search.kappa);
  r.number("search.tau", c.search.tau);
  r.number("search.steps", c.search.search_steps);
  if (auto* v = r.get("search.epochs")) c.search_epochs = parse_number<double>("search.epochs", *v);
  if (auto* v = r.get("search.objective")) c.search.objective = parse_objective(*v);
  if (auto* v = r.get("search.controller")) c.search.controller.mode = parse_controller(*v);
  r.number("search.eta", c.search.controller.eta);
  r.number("search.lambda_lr", c.search.controller.lambda_lr);
  r.number("search.adam_lr", c.search.adam.lr);
  r.number("search.adam_drop_at", c.search.adam.drop_at);
  r.number("search.adam_drop_factor", c.search.adam.drop_factor);
  r.number("search.seed", c.search.search_seed);
  r.number("search.quick", c.search.quick_factor);

  if (auto* v = r.get("baseline.method")) c.baseline.method = parse_baseline(*v);
  r.number("baseline.kappa", c.baseline.kappa);
  r.number("baseline.score_batch_factor", c.baseline.score_batch_factor);
  r.number("baseline.synflow_iterations", c.baseline.synflow_iterations);
  if (auto* v = r.get("baseline.overlay_objective")) c.baseline.overlay_objective = parse_objective(*v);
  r.number("baseline.overlay_sigma", c.baseline.overlay_sigma);
  r.number("baseline.prune_seed", c.baseline.prune_seed);

  r.number("ltr.prune_fraction", c.ltr.prune_fraction);
  r.number("ltr.rounds", c.ltr.rounds);

  if (auto* v = r.get("sweep.methods")) c.methods = split_list(*v);
  r.list("sweep.densities", c.densities);
  if (auto* v = r.get("sweep.sparsities")) {
    require(!r.get("sweep.densities"), ErrorCode::kInvalidArgument,
            "give either sweep.densities or sweep.sparsities, not both");
    c.densities.clear();
    for (const auto& s : split_list(*v)) {
      const double sp = parse_number<double>("sweep.sparsities", s);
      require(sp > 0.0 && sp < 1.0, ErrorCode::kInvalidArgument, "sparsity ", sp, " outside (0,1)");
      c.densities.push_back(1.0 - sp);
    }
  }
  r.number("sweep.repeats", c.repeats);
  r.number("sweep.seed", c.seed);
  r.number("sweep.workers", c.workers);
  if (auto* v = r.get("sweep.mode")) {
    if (*v == "grid") c.mode = SweepMode::kGrid;
    else if (*v == "sanity") c.mode = SweepMode::kSanity;
    else fail(ErrorCode::kParse, "sweep.mode must be grid or sanity, got '", *v, "'");
  }
  if (auto* v = r.get("sweep.ablations")) {
    c.ablations.clear();
    for (const auto& a : split_list(*v)) c.ablations.push_back(parse_ablation(a));
  }
  r.flag("sweep.tickets", c.write_tickets);

  r.number("oracle.kappa", c.oracle_kappa);
  if (auto* v = r.get("oracle.objective")) c.oracle_objective = parse_objective(*v);
  r.number("oracle.samples", c.oracle_samples);

  r.text("output.dir", c.out);

  c.search.train = c.train;
  c.baseline.train = c.train;
  c.baseline.quick_factor = c.search.quick_factor;
  c.ltr.train = c.train;
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  train.validate();
  search.validate();
  require(repeats >= 1, ErrorCode::kInvalidArgument, "repeats must be >= 1, got ", repeats);
  require(workers >= 1, ErrorCode::kInvalidArgument, "workers must be >= 1, got ", workers);
  for (double k : densities)
    require(k > 0.0 && k < 1.0, ErrorCode::kInvalidArgument, "density ", k,
            " outside (0,1) (sparsity must lie in (0,1))");
  require(!search_epochs || *search_epochs >= 0.0, ErrorCode::kInvalidArgument,
          "search.epochs must be >= 0");
  require(ltr.prune_fraction > 0.0 && ltr.prune_fraction < 1.0, ErrorCode::kInvalidArgument,
          "ltr.prune_fraction must lie in (0,1)");
  require(!methods.empty(), ErrorCode::kInvalidArgument, "sweep.methods is empty");
  require(oracle_kappa > 0.0 && oracle_kappa <= 1.0, ErrorCode::kInvalidArgument,
          "oracle.kappa must lie in (0,1]");
}

}  // namespace cts
