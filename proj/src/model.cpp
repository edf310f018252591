#include "cts/model.hpp"

#include <cmath>

#include "cts/error.hpp"
#include "cts/rng.hpp"

namespace cts {

using ad::Var;

namespace {

constexpr double kBatchNormEps = 1e-5;

class Builder {
 public:
  Builder(ModelState& model, std::uint64_t seed) : m_(model), rng_(seed, Stream::kInit) {
    current_ = model.input_shape;
  }

  void flatten() {
    m_.layers.push_back({LayerKind::kFlatten, 1, 0, 2, {}});
    current_ = Shape{numel(current_)};
  }

  void dense(std::int64_t out, const std::string& name) {
    require(current_.size() == 1, ErrorCode::kInvalidArgument, "dense layer ", name,
            " needs flat input, got ", shape_str(current_));
    const std::int64_t in = current_[0];
    const auto w = weight(name + ".weight", {in, out}, in);
    const auto b = bias(name + ".bias", {out});
    m_.layers.push_back({LayerKind::kDense, 1, 0, 2, {w, b}});
    current_ = Shape{out};
  }

  void conv(std::int64_t out, int kernel, int stride, int padding, bool with_bias,
            const std::string& name) {
    m_.layers.push_back({LayerKind::kConv, stride, padding, 2, conv_params(out, kernel, with_bias, name)});
    current_ = conv_out(current_, out, kernel, stride, padding);
  }

  void batchnorm(const std::string& name) {
    const auto p = bn_params(current_[0], name);
    m_.layers.push_back({LayerKind::kBatchNorm, 1, 0, 2, p});
  }

  void relu() { m_.layers.push_back({LayerKind::kRelu, 1, 0, 2, {}}); }

  void avg_pool(int k) {
    require(current_.size() == 3 && current_[1] % k == 0 && current_[2] % k == 0,
            ErrorCode::kInvalidArgument, "avg pool ", k, " does not tile ", shape_str(current_));
    m_.layers.push_back({LayerKind::kAvgPool, 1, 0, k, {}});
    current_ = Shape{current_[0], current_[1] / k, current_[2] / k};
  }

  void global_avg_pool() {
    m_.layers.push_back({LayerKind::kGlobalAvgPool, 1, 0, 2, {}});
    current_ = Shape{current_[0]};
  }

  void residual(std::int64_t out, int stride, const std::string& name) {
    const Shape in = current_;
    LayerSpec spec{LayerKind::kResidualBlock, stride, 1, 2, {}};
    auto append = [&spec](const std::vector<std::size_t>& ps) {
      spec.params.insert(spec.params.end(), ps.begin(), ps.end());
    };
    append(conv_params(out, 3, false, name + ".conv1"));
    Shape mid = conv_out(in, out, 3, stride, 1);
    append(bn_params(out, name + ".bn1"));
    current_ = mid;
    append(conv_params(out, 3, false, name + ".conv2"));
    append(bn_params(out, name + ".bn2"));
    if (stride != 1 || in[0] != out) {
      current_ = in;
      append(conv_params(out, 1, false, name + ".shortcut"));
      append(bn_params(out, name + ".shortcut_bn"));
    }
    current_ = mid;
    m_.layers.push_back(spec);
  }

  std::int64_t input_channels() const { return current_.at(0); }

 private:
  Shape conv_out(const Shape& in, std::int64_t out, int kernel, int stride, int padding) const {
    require(in.size() == 3, ErrorCode::kInvalidArgument, "conv needs [C,H,W] input, got ",
            shape_str(in));
    const std::int64_t h = (in[1] + 2 * padding - kernel) / stride + 1;
    const std::int64_t w = (in[2] + 2 * padding - kernel) / stride + 1;
    require(h > 0 && w > 0, ErrorCode::kInvalidArgument, "input ", shape_str(in), " too small");
    return Shape{out, h, w};
  }

  std::vector<std::size_t> conv_params(std::int64_t out, int kernel, bool with_bias,
                                       const std::string& name) {
    const std::int64_t in = current_.at(0);
    std::vector<std::size_t> ps{weight(name + ".weight", {out, in, kernel, kernel}, in * kernel * kernel)};
    if (with_bias) ps.push_back(bias(name + ".bias", {out}));
    return ps;
  }

  std::vector<std::size_t> bn_params(std::int64_t channels, const std::string& name) {
    return {add(name + ".gamma", Tensor({channels}, 1.0), false, true),
            add(name + ".beta", Tensor({channels}, 0.0), false, true)};
  }

  std::size_t weight(const std::string& name, const Shape& shape, std::int64_t fan_in) {
    Tensor t(shape);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = sd * rng_.normal();
    return add(name, std::move(t), true, false);
  }

  std::size_t bias(const std::string& name, const Shape& shape) {
    return add(name, Tensor(shape, 0.0), false, false);
  }

  std::size_t add(const std::string& name, Tensor value, bool maskable, bool bn) {
    const std::size_t index = m_.params.size();
    m_.param_info.push_back({name, value.shape(), maskable, bn});
    if (maskable) {
      const std::int64_t offset = m_.layout.empty() ? 0 : m_.layout.back().offset + m_.layout.back().count;
      m_.layout.push_back({name, offset, numel(value.shape()), value.shape(), index});
    }
    m_.params.push_back(std::move(value));
    return index;
  }

  ModelState& m_;
  Rng rng_;
  Shape current_;
};

Var batchnorm(const Var& x, const Var& gamma, const Var& beta) {
  const bool spatial = x.shape().size() == 4;
  const std::vector<int> axes = spatial ? std::vector<int>{0, 2, 3} : std::vector<int>{0};
  const std::int64_t c = x.shape()[1];
  const Shape affine = spatial ? Shape{1, c, 1, 1} : Shape{1, c};
  Var centred = ad::sub(x, ad::mean_axes(x, axes, true));
  Var var = ad::mean_axes(ad::square(centred), axes, true);
  Var normed = ad::mul(centred, ad::pow(ad::add_scalar(var, kBatchNormEps), -0.5));
  return ad::add(ad::mul(normed, ad::reshape(gamma, affine)), ad::reshape(beta, affine));
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const std::int64_t c = bias.shape()[0];
  return ad::add(x, ad::reshape(bias, x.shape().size() == 4 ? Shape{1, c, 1, 1} : Shape{1, c}));
}

}  // namespace

std::int64_t ModelState::mask_size() const {
  return layout.empty() ? 0 : layout.back().offset + layout.back().count;
}

std::int64_t ModelState::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params) n += static_cast<std::int64_t>(p.size());
  return n;
}

const std::vector<std::string>& known_architectures() {
  static const std::vector<std::string> archs{"linear", "tiny-mlp", "mlp-2x256", "lenet-conv4", "resnet-tiny"};
  return archs;
}

ModelState build_model(const std::string& arch, std::uint64_t seed, const Shape& input_shape,
                       int num_classes) {
  require(num_classes >= 2, ErrorCode::kInvalidArgument, "need at least 2 classes");
  require(!input_shape.empty(), ErrorCode::kInvalidArgument, "empty input shape");
  ModelState m;
  m.arch = arch;
  m.seed = seed;
  m.input_shape = input_shape;
  m.num_classes = num_classes;
  Builder b(m, seed);
  if (arch == "linear") {
    if (input_shape.size() > 1) b.flatten();
    b.dense(num_classes, "fc");
  } else if (arch == "tiny-mlp") {
    if (input_shape.size() > 1) b.flatten();
    b.dense(3, "fc1");
    b.relu();
    b.dense(num_classes, "fc2");
  } else if (arch == "mlp-2x256") {
    if (input_shape.size() > 1) b.flatten();
    b.dense(256, "fc1");
    b.relu();
    b.dense(256, "fc2");
    b.relu();
    b.dense(num_classes, "fc3");
  } else if (arch == "lenet-conv4") {
    require(input_shape.size() == 3, ErrorCode::kInvalidArgument, arch,
            " needs [C,H,W] input, got ", shape_str(input_shape));
    b.conv(8, 3, 1, 1, true, "conv1");
    b.relu();
    b.avg_pool(2);
    b.conv(16, 3, 1, 1, true, "conv2");
    b.relu();
    b.avg_pool(2);
    b.flatten();
    b.dense(64, "fc1");
    b.relu();
    b.dense(num_classes, "fc2");
  } else if (arch == "resnet-tiny") {
    require(input_shape.size() == 3, ErrorCode::kInvalidArgument, arch,
            " needs [C,H,W] input, got ", shape_str(input_shape));
    b.conv(8, 3, 1, 1, false, "stem");
    b.batchnorm("stem_bn");
    b.relu();
    b.residual(8, 1, "block1");
    b.residual(16, 2, "block2");
    b.residual(32, 2, "block3");
    b.global_avg_pool();
    b.dense(num_classes, "fc");
  } else {
    fail(ErrorCode::kInvalidArgument, "unknown architecture '", arch, "'");
  }
  return m;
}

GraphTrace forward_graph(const ModelState& model, const Batch& batch, std::span<const Var> params,
                         ForwardOptions options) {
  require(params.size() == model.params.size(), ErrorCode::kInvalidArgument, "forward: expected ",
          model.params.size(), " parameter tensors, got ", params.size());
  Shape expected{static_cast<std::int64_t>(batch.size())};
  expected.insert(expected.end(), model.input_shape.begin(), model.input_shape.end());
  require(batch.x.shape() == expected, ErrorCode::kShapeMismatch, "forward: batch shape ",
          shape_str(batch.x.shape()), " does not match model input ", shape_str(expected));

  GraphTrace trace;
  auto activate = [&](const Var& pre) {
    if (options.record_relu_pattern) {
      for (double v : pre.value().data()) trace.relu_pattern.push_back(v > 0.0 ? 1 : 0);
    }
    Var out = ad::relu(pre);
    if (options.capture_features) trace.features.push_back(out);
    return out;
  };
  auto p = [&](const LayerSpec& l, std::size_t i) -> const Var& { return params[l.params[i]]; };
  auto norm = [&](const Var& v, const LayerSpec& l, std::size_t i) {
    return options.bypass_batchnorm ? v : batchnorm(v, p(l, i), p(l, i + 1));
  };

  Var x = Var::constant(batch.x);
  const auto n = static_cast<std::int64_t>(batch.size());
  for (const auto& layer : model.layers) {
    switch (layer.kind) {
      case LayerKind::kFlatten:
        x = ad::reshape(x, Shape{n, numel(x.shape()) / n});
        break;
      case LayerKind::kDense:
        x = ad::add(ad::matmul(x, p(layer, 0)), p(layer, 1));
        break;
      case LayerKind::kConv:
        x = ad::conv2d(x, p(layer, 0), {layer.stride, layer.padding});
        if (layer.params.size() > 1) x = add_channel_bias(x, p(layer, 1));
        break;
      case LayerKind::kBatchNorm:
        x = norm(x, layer, 0);
        break;
      case LayerKind::kRelu:
        x = activate(x);
        break;
      case LayerKind::kAvgPool:
        x = ad::avg_pool2d(x, layer.pool);
        break;
      case LayerKind::kGlobalAvgPool:
        x = ad::mean_axes(x, {2, 3}, false);
        break;
      case LayerKind::kResidualBlock: {
        Var h = ad::conv2d(x, p(layer, 0), {layer.stride, 1});
        h = activate(norm(h, layer, 1));
        h = ad::conv2d(h, p(layer, 3), {1, 1});
        h = norm(h, layer, 4);
        Var shortcut = x;
        if (layer.params.size() > 6) {
          shortcut = ad::conv2d(x, p(layer, 6), {layer.stride, 0});
          shortcut = norm(shortcut, layer, 7);
        }
        x = activate(ad::add(h, shortcut));
        break;
      }
    }
  }
  trace.logits = x;
  trace.loss = ad::cross_entropy(x, batch.y);
  return trace;
}

std::vector<Var> constant_params(const ModelState& model) {
  std::vector<Var> out;
  out.reserve(model.params.size());
  for (const auto& t : model.params) out.push_back(Var::constant(t));
  return out;
}

std::vector<Var> overlay_params(const ModelState& model, const Var& overlay) {
  require(overlay.shape() == Shape{model.mask_size()}, ErrorCode::kShapeMismatch,
          "overlay of shape ", shape_str(overlay.shape()), " does not match mask size ",
          model.mask_size());
  std::vector<Var> out = constant_params(model);
  for (const auto& slice : model.layout) {
    Var s = ad::reshape(ad::slice(overlay, slice.offset, slice.count), slice.shape);
    out[slice.param_index] = ad::mul(out[slice.param_index], s);
  }
  return out;
}

ForwardTrace forward(const ModelState& model, const Batch& batch,
                     std::optional<std::span<const double>> overlay, bool capture_features) {
  ad::NoGradGuard no_grad;
  std::vector<Var> params;
  if (overlay) {
    require(static_cast<std::int64_t>(overlay->size()) == model.mask_size(), ErrorCode::kShapeMismatch,
            "overlay length ", overlay->size(), " does not match mask size ", model.mask_size());
    params = overlay_params(model, Var::constant(Tensor::vector({overlay->begin(), overlay->end()})));
  } else {
    params = constant_params(model);
  }
  GraphTrace g = forward_graph(model, batch, params, {capture_features, false});
  ForwardTrace out;
  out.logits = g.logits.value();
  out.loss = g.loss.item();
  for (const auto& f : g.features) out.features.push_back(f.value());
  return out;
}

std::vector<double> flat_maskable(const ModelState& model) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(model.mask_size()));
  for (const auto& s : model.layout) {
    const auto& t = model.params[s.param_index];
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return out;
}

void set_flat_maskable(ModelState& model, std::span<const double> values) {
  require(static_cast<std::int64_t>(values.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "flat vector length ", values.size(), " does not match mask size ", model.mask_size());
  for (const auto& s : model.layout) {
    auto& t = model.params[s.param_index];
    std::copy_n(values.begin() + s.offset, s.count, t.values().begin());
  }
}

void apply_mask(ModelState& model, std::span<const std::uint8_t> mask) {
  require(static_cast<std::int64_t>(mask.size()) == model.mask_size(), ErrorCode::kShapeMismatch,
          "mask length ", mask.size(), " does not match mask size ", model.mask_size());
  for (const auto& s : model.layout) {
    auto& t = model.params[s.param_index];
    for (std::int64_t i = 0; i < s.count; ++i) {
      if (!mask[static_cast<std::size_t>(s.offset + i)]) t[static_cast<std::size_t>(i)] = 0.0;
    }
  }
}

}  // namespace cts
