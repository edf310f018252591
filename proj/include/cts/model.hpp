#ifndef CTS_MODEL_HPP_
#define CTS_MODEL_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cts/autograd.hpp"
#include "cts/dataset.hpp"
#include "cts/tensor.hpp"

namespace cts {

enum class LayerKind {
  kDense,
  kConv,
  kBatchNorm,
  kRelu,
  kAvgPool,
  kGlobalAvgPool,
  kFlatten,
  kResidualBlock,
};

// One step of the network. `params` indexes ModelState::params:
//   dense / conv:   {weight, bias} (bias omitted for convs followed by batch norm)
//   batchnorm:      {gamma, beta}
//   residual block: {conv1, bn1.gamma, bn1.beta, conv2, bn2.gamma, bn2.beta
//                    [, shortcut conv, shortcut bn.gamma, shortcut bn.beta]}
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  int stride = 1;
  int padding = 0;
  int pool = 2;
  std::vector<std::size_t> params;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  bool maskable = false;
  bool batchnorm = false;
};

// Position of one maskable parameter tensor inside the flat mask vector.
struct LayerSlice {
  std::string name;
  std::int64_t offset = 0;
  std::int64_t count = 0;
  Shape shape;
  std::size_t param_index = 0;

  friend bool operator==(const LayerSlice&, const LayerSlice&) = default;
};

using LayerLayout = std::vector<LayerSlice>;

struct ModelState {
  std::string arch;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  Shape input_shape;
  int num_classes = 0;
  std::vector<LayerSpec> layers;
  std::vector<ParamInfo> param_info;
  std::vector<Tensor> params;
  // Maskable parameters in flat-mask order; offsets are contiguous from 0.
  LayerLayout layout;
  // SGD momentum buffers, one per parameter tensor; empty means all zero.
  std::vector<Tensor> momentum;

  // Number of maskable entries d.
  std::int64_t mask_size() const;
  std::int64_t param_count() const;
};

const std::vector<std::string>& known_architectures();

// Weights ~ N(0, 2/fan_in), biases zero, batch-norm gamma=1 beta=0.
// Architectures: linear, tiny-mlp, mlp-2x256, lenet-conv4, resnet-tiny.
ModelState build_model(const std::string& arch, std::uint64_t seed, const Shape& input_shape,
                       int num_classes);

// Forward result with plain values.
struct ForwardTrace {
  Tensor logits;
  std::vector<Tensor> features;
  double loss = 0.0;
};

// Forward result as graph nodes.
struct GraphTrace {
  ad::Var logits;
  std::vector<ad::Var> features;
  ad::Var loss;
  // Sign pattern of every relu input (only filled when requested).
  std::vector<std::uint8_t> relu_pattern;
};

struct ForwardOptions {
  bool capture_features = false;
  bool record_relu_pattern = false;
  // Skip batch-norm layers entirely (used by the SynFlow surrogate).
  bool bypass_batchnorm = false;
};

// Runs the network on `batch` with one Var per parameter tensor (same order as
// ModelState::params). Batch norm always normalises with the statistics of
// the current batch.
GraphTrace forward_graph(const ModelState& model, const Batch& batch, std::span<const ad::Var> params,
                         ForwardOptions options = {});

// Effective parameter Vars: every maskable tensor multiplied by its slice of
// `overlay` (length d); other tensors are passed through as constants.
std::vector<ad::Var> overlay_params(const ModelState& model, const ad::Var& overlay);
std::vector<ad::Var> constant_params(const ModelState& model);

// Value-level forward with an optional soft or hard overlay of length d.
ForwardTrace forward(const ModelState& model, const Batch& batch,
                     std::optional<std::span<const double>> overlay = std::nullopt,
                     bool capture_features = false);

// Maskable entries of the model flattened in layout order, and the inverse.
std::vector<double> flat_maskable(const ModelState& model);
void set_flat_maskable(ModelState& model, std::span<const double> values);

// Zeroes maskable entries where mask == 0.
void apply_mask(ModelState& model, std::span<const std::uint8_t> mask);

}  // namespace cts

#endif  // CTS_MODEL_HPP_
