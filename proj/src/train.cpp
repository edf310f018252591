#include "cts/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cts/error.hpp"

namespace cts {

using ad::Var;

Precision parse_precision(const std::string& text) {
  if (text == "float64" || text == "double" || text == "fp64") return Precision::kFloat64;
  if (text == "float32" || text == "float" || text == "fp32") return Precision::kFloat32;
  fail(ErrorCode::kInvalidArgument, "unknown precision '", text, "' (float64 or float32)");
}

const char* precision_name(Precision p) { return p == Precision::kFloat32 ? "float32" : "float64"; }

double LrSchedule::at(std::int64_t step) const {
  double lr = initial;
  for (auto s : drop_steps) {
    if (step >= s) lr *= drop_factor;
  }
  return lr;
}

void TrainConfig::validate() const {
  require(steps >= 0, ErrorCode::kInvalidArgument, "train steps must be >= 0, got ", steps);
  require(batch_size > 0, ErrorCode::kInvalidArgument, "batch size must be positive");
  require(lr.initial > 0 && lr.drop_factor > 0, ErrorCode::kInvalidArgument,
          "learning rates must be positive");
  require(momentum >= 0 && momentum < 1, ErrorCode::kInvalidArgument, "momentum must be in [0,1)");
  require(weight_decay >= 0, ErrorCode::kInvalidArgument, "weight decay must be >= 0");
  require(rewind_step >= 0 && (rewind_step < steps || steps == 0), ErrorCode::kInvalidArgument,
          "rewind step k=", rewind_step, " must satisfy 0 <= k < T=", steps);
}

TrainConfig quick_schedule(const TrainConfig& cfg, double q) {
  require(q > 0 && q <= 1, ErrorCode::kInvalidArgument, "quick factor must be in (0,1], got ", q);
  TrainConfig out = cfg;
  const std::int64_t k = cfg.rewind_step;
  auto map = [&](std::int64_t s) {
    return s <= k ? s : k + static_cast<std::int64_t>(std::llround(static_cast<double>(s - k) * q));
  };
  out.steps = map(cfg.steps);
  for (auto& s : out.lr.drop_steps) s = map(s);
  return out;
}

void round_to_float(ModelState& model) {
  for (auto& p : model.params) {
    for (auto& v : p.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

std::vector<Tensor> loss_gradients(const ModelState& model, const Batch& batch) {
  std::vector<Var> leaves;
  leaves.reserve(model.params.size());
  for (const auto& p : model.params) leaves.push_back(Var::leaf(p));
  return ad::grad_values(forward_graph(model, batch, leaves).loss, leaves);
}

ModelState train(const ModelState& model, const Dataset& data, const TrainConfig& cfg,
                 std::optional<std::span<const std::uint8_t>> mask, std::optional<std::int64_t> until) {
  cfg.validate();
  const std::int64_t end = until.value_or(cfg.steps);
  require(end >= model.step, ErrorCode::kInvalidArgument, "cannot train from step ", model.step,
          " back to ", end);
  ModelState out = model;
  if (out.momentum.size() != out.params.size()) {
    out.momentum.clear();
    for (const auto& p : out.params) out.momentum.emplace_back(p.shape(), 0.0);
  }

  // Per-parameter 0/1 keep flags; empty for unmasked tensors.
  std::vector<std::vector<std::uint8_t>> keep(out.params.size());
  if (mask) {
    apply_mask(out, *mask);
    for (const auto& s : out.layout) {
      keep[s.param_index].assign(mask->begin() + s.offset, mask->begin() + s.offset + s.count);
      auto& buf = out.momentum[s.param_index].values();
      for (std::int64_t i = 0; i < s.count; ++i) {
        if (!keep[s.param_index][i]) buf[i] = 0.0;
      }
    }
  }
  if (cfg.precision == Precision::kFloat32) round_to_float(out);

  BatchStream stream(data, cfg.batch_size, cfg.seed, Stream::kTrainBatches);
  int bad_steps = 0;
  for (std::int64_t step = out.step; step < end; ++step) {
    Batch batch = stream.batch(static_cast<std::uint64_t>(step));
    if (cfg.augment) {
      Rng rng(cfg.seed, Stream::kAugment, static_cast<std::uint64_t>(step));
      augment(batch, rng);
    }
    std::vector<Tensor> grads;
    try {
      grads = loss_gradients(out, batch);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFinite) throw;
    }
    bool finite = !grads.empty();
    for (const auto& g : grads) finite = finite && g.all_finite();
    if (!finite) {
      require(++bad_steps < kDivergencePatience, ErrorCode::kDivergence, "training diverged: ",
              kDivergencePatience, " consecutive non-finite steps ending at step ", step);
      out.step = step + 1;
      continue;
    }
    bad_steps = 0;

    const double lr = cfg.lr.at(step);
    for (std::size_t i = 0; i < out.params.size(); ++i) {
      auto& theta = out.params[i].values();
      auto& buf = out.momentum[i].values();
      const auto& g = grads[i].data();
      const double wd = out.param_info[i].batchnorm ? 0.0 : cfg.weight_decay;
      const auto& k = keep[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        if (!k.empty() && !k[j]) continue;
        buf[j] = cfg.momentum * buf[j] + g[j] + wd * theta[j];
        theta[j] -= lr * buf[j];
      }
    }
    if (cfg.precision == Precision::kFloat32) round_to_float(out);
    out.step = step + 1;
  }
  return out;
}

EvalResult evaluate(const ModelState& model, const Dataset& data, std::size_t batch_size) {
  require(data.test_size() > 0, ErrorCode::kInvalidArgument, "empty test set");
  require(batch_size > 0, ErrorCode::kInvalidArgument, "batch size must be positive");
  std::size_t correct = 0;
  double loss_sum = 0.0;
  const auto classes = static_cast<std::size_t>(model.num_classes);
  for (std::size_t first = 0; first < data.test_size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.test_size() - first);
    Batch b = data.test_batch(first, count);
    auto t = forward(model, b);
    loss_sum += t.loss * static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (t.logits[i * classes + c] > t.logits[i * classes + best]) best = c;
      }
      if (static_cast<std::int32_t>(best) == b.y[i]) ++correct;
    }
  }
  const auto n = static_cast<double>(data.test_size());
  return {static_cast<double>(correct) / n, loss_sum / n};
}

// ---- checkpoint -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'T', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    U u;
    std::memcpy(&u, &value, sizeof u);
    for (std::size_t i = 0; i < sizeof u; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : in(b) {}
  void need(std::size_t n) const {
    require(pos + n <= in.size(), ErrorCode::kParse, "checkpoint truncated at byte offset ", pos);
  }
  template <typename T>
  T le() {
    using U = std::make_unsigned_t<T>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof u; ++i) u |= static_cast<U>(in[pos + i]) << (8 * i);
    pos += sizeof u;
    T value;
    std::memcpy(&value, &u, sizeof value);
    return value;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s(in.begin() + pos, in.begin() + pos + n);
    pos += n;
    return s;
  }
  std::span<const std::uint8_t> in;
  std::size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelState& model) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(kCheckpointVersion);
  w.str(model.arch);
  w.le(model.seed);
  w.le(model.step);
  w.le(static_cast<std::uint32_t>(model.input_shape.size()));
  for (auto d : model.input_shape) w.le(d);
  w.le(static_cast<std::int32_t>(model.num_classes));
  w.le(static_cast<std::uint64_t>(model.param_count()));
  for (const auto& p : model.params) {
    for (double v : p.data()) w.f64(v);
  }
  const bool has_buffers = model.momentum.size() == model.params.size();
  w.le(static_cast<std::uint64_t>(has_buffers ? model.param_count() : 0));
  if (has_buffers) {
    for (const auto& p : model.momentum) {
      for (double v : p.data()) w.f64(v);
    }
  }
  return std::move(w.out);
}

ModelState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(sizeof kMagic);
  require(std::memcmp(bytes.data(), kMagic, sizeof kMagic) == 0, ErrorCode::kParse,
          "bad checkpoint magic at byte offset 0");
  r.pos = sizeof kMagic;
  const auto version = r.le<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorCode::kParse, "unsupported checkpoint version ", version);
  const std::string arch = r.str();
  const auto seed = r.le<std::uint64_t>();
  const auto step = r.le<std::int64_t>();
  const auto rank = r.le<std::uint32_t>();
  require(rank <= 8, ErrorCode::kParse, "implausible input rank ", rank, " at byte offset ", r.pos);
  Shape input(rank);
  for (auto& d : input) d = r.le<std::int64_t>();
  const auto classes = r.le<std::int32_t>();
  ModelState m = build_model(arch, seed, input, classes);
  m.step = step;
  const auto count = r.le<std::uint64_t>();
  require(count == static_cast<std::uint64_t>(m.param_count()), ErrorCode::kParse, "checkpoint holds ",
          count, " parameters, architecture needs ", m.param_count());
  for (auto& p : m.params) {
    for (auto& v : p.values()) v = r.f64();
  }
  const auto buffers = r.le<std::uint64_t>();
  require(buffers == 0 || buffers == count, ErrorCode::kParse, "bad buffer count ", buffers);
  if (buffers) {
    for (const auto& p : m.params) {
      Tensor t(p.shape());
      for (auto& v : t.values()) v = r.f64();
      m.momentum.push_back(std::move(t));
    }
  }
  require(r.pos == bytes.size(), ErrorCode::kParse, "trailing bytes after offset ", r.pos);
  return m;
}

void save_checkpoint(const std::string& path, const ModelState& model) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::kIo, "cannot open '", path, "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorCode::kIo, "write to '", path, "' failed");
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::kIo, "cannot open '", path, "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cts
