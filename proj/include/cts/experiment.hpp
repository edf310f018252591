#ifndef CTS_EXPERIMENT_HPP_
#define CTS_EXPERIMENT_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cts/config.hpp"
#include "cts/oracle.hpp"

namespace cts {

inline constexpr int kCsvSchema = 1;

struct LayerDensity {
  std::string layer;
  std::int64_t count = 0;
  std::int64_t retained = 0;
  double density = 0.0;
};

struct MetricsRecord {
  std::string method;
  std::string base;  // sanity rows: the method this row is paired with
  double density = 0.0;  // requested kappa
  std::uint64_t seed = 0;
  std::string status = "ok";
  double accuracy = 0.0;
  double test_loss = 0.0;
  // Test loss of theta_k under the hard mask, before retraining.
  double post_draw_loss = 0.0;
  // Search objective of the hard mask at theta_k on the scoring batch.
  double draw_objective = 0.0;
  double achieved_density = 0.0;
  std::int64_t retained = 0;
  std::int64_t d = 0;
  double wall_seconds = 0.0;
  std::vector<LayerDensity> layers;

  double sparsity() const { return 1.0 - density; }
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::string layers_csv_header();
std::vector<std::string> layers_csv_rows(const MetricsRecord& r);
// Parses a results CSV written by run_experiment (layers are not restored).
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

struct CellSpec {
  std::string method;
  double density = 0.0;
  std::uint64_t seed = 0;

  std::string id() const;
};

// method x density x seed, in that nesting order.
std::vector<CellSpec> plan_cells(const ExperimentConfig& cfg);

// One cell; sanity mode returns the base row followed by its ablations.
// Tickets are written to ticket_dir unless it is empty.
std::vector<MetricsRecord> run_cell(const ExperimentConfig& cfg, const Dataset& data, const CellSpec& cell,
                                    const std::string& ticket_dir);

struct SweepResult {
  std::vector<MetricsRecord> records;
  int failed_cells = 0;
  int resumed_cells = 0;
};

// Runs every cell (cfg.workers threads), writing under cfg.out:
//   results.csv  one row per (method, density, seed) or sanity row
//   layers.csv   per-layer densities
//   timing.csv   wall time per cell (the only non-deterministic file)
//   cells/       per-cell outputs with a crc32 trailer, reused on rerun
//   tickets/     ticket files
SweepResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

// Retrains an existing ticket from its checkpoint plus the configured
// ablations. Inversion needs the distribution the ticket was clamped from.
std::vector<MetricsRecord> run_sanity_suite(const ExperimentConfig& cfg, const Dataset& data,
                                            const Ticket& ticket, const ModelState& start,
                                            const MaskDistribution* dist, std::uint64_t seed);

// ---- report -----------------------------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

MeanStd mean_std(const std::vector<double>& values);

struct SummaryRow {
  std::string method;
  double density = 0.0;
  std::size_t n = 0;
  MeanStd accuracy;
  MeanStd test_loss;
  MeanStd post_draw_loss;
  MeanStd draw_objective;
};

// Groups ok rows by (method, density); sorted by method, then density descending.
std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string summary_table(const std::vector<SummaryRow>& rows);

// ---- distribution files -------------------------------------------------------------

std::string distribution_to_json(const MaskDistribution& dist);
MaskDistribution distribution_from_json(const std::string& text, const LayerLayout& layout);

// Scoring batch shared by the baselines and the draw objective.
Batch scoring_batch(const Dataset& data, const TrainConfig& train, std::size_t factor);

}  // namespace cts

#endif  // CTS_EXPERIMENT_HPP_
