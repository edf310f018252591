#ifndef CTS_TRAIN_HPP_
#define CTS_TRAIN_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cts/dataset.hpp"
#include "cts/model.hpp"

namespace cts {

enum class Precision { kFloat64, kFloat32 };

Precision parse_precision(const std::string& text);
const char* precision_name(Precision p);

// Piecewise-constant learning rate indexed by the global step.
struct LrSchedule {
  double initial = 0.1;
  double drop_factor = 0.1;
  std::vector<std::int64_t> drop_steps;

  double at(std::int64_t step) const;
};

struct TrainConfig {
  std::int64_t steps = 1000;  // T
  std::size_t batch_size = 64;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t rewind_step = 0;  // k
  std::uint64_t seed = 0;
  bool augment = false;
  Precision precision = Precision::kFloat64;

  void validate() const;
};

// The schedule compressed around the rewind step: T' = k + round((T - k) q),
// drop steps s > k move to k + round((s - k) q).
TrainConfig quick_schedule(const TrainConfig& cfg, double quick_factor);

// Number of consecutive non-finite steps after which training gives up.
inline constexpr int kDivergencePatience = 50;

// SGD with momentum and weight decay from model.step up to `until`
// (default cfg.steps). Batches are addressed by global step, so splitting a
// run at any step and resuming gives the same result. With a mask, masked
// entries and their momentum stay exactly zero; they are zeroed on entry.
ModelState train(const ModelState& model, const Dataset& data, const TrainConfig& cfg,
                 std::optional<std::span<const std::uint8_t>> mask = std::nullopt,
                 std::optional<std::int64_t> until = std::nullopt);

// Parameter gradient of the mean loss on one batch (one tensor per param).
std::vector<Tensor> loss_gradients(const ModelState& model, const Batch& batch);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

// Test-set evaluation in fixed chunks of `batch_size` (batch norm uses the
// statistics of each chunk).
EvalResult evaluate(const ModelState& model, const Dataset& data, std::size_t batch_size = 200);

// Rounds every parameter to the nearest float.
void round_to_float(ModelState& model);

// ---- checkpoint -----------------------------------------------------------------

void save_checkpoint(const std::string& path, const ModelState& model);
ModelState load_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const ModelState& model);
ModelState decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace cts

#endif  // CTS_TRAIN_HPP_
