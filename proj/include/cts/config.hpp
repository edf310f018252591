#ifndef CTS_CONFIG_HPP_
#define CTS_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cts/baselines.hpp"
#include "cts/search.hpp"

namespace cts {

// Flat "section.key" -> value view of an INI file.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_ini(const std::string& text);
ConfigMap load_ini(const std::string& path);
std::string format_ini(const ConfigMap& map);

const std::vector<std::string>& known_config_keys();
// Rejects keys outside known_config_keys().
void set_config_value(ConfigMap& map, const std::string& key, const std::string& value);

enum class SweepMode { kGrid, kSanity };

struct ExperimentConfig {
  std::string dataset = "blobs:classes=4,dim=20,n=4000,seed=7,sep=10";
  std::string arch = "mlp-2x256";
  // Shared by every method; each cell overrides train.seed.
  TrainConfig train;
  SearchConfig search;
  // When set, search steps = this many passes over the training set.
  std::optional<double> search_epochs;
  BaselineConfig baseline;
  LtrConfig ltr;

  // "cts", "cts-init" (k = 0), optionally ":objective"; "ltr"; baseline names.
  std::vector<std::string> methods{"cts"};
  std::vector<double> densities;
  int repeats = 1;
  std::uint64_t seed = 1;  // repeat r runs with seed + r
  int workers = 1;
  SweepMode mode = SweepMode::kGrid;
  std::vector<Ablation> ablations{Ablation::kShuffleLayerwise, Ablation::kInvert, Ablation::kReinit};
  bool write_tickets = true;

  // oracle subcommand
  double oracle_kappa = 0.5;
  ObjectiveKind oracle_objective = ObjectiveKind::kTaskLoss;
  std::size_t oracle_samples = 0;  // 0: whole training set

  std::string out = "out";

  void validate() const;
};

// Defaults overridden by the map; raises kParse / kInvalidArgument.
ExperimentConfig experiment_config(const ConfigMap& map);

std::vector<std::string> split_list(const std::string& text);

}  // namespace cts

#endif  // CTS_CONFIG_HPP_
