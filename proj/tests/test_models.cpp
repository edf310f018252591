#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cts/error.hpp"
#include "cts/model.hpp"
#include "test_support.hpp"

using namespace cts;
using cts::testing::max_abs_diff;
using cts::testing::random_tensor;

namespace {

Batch random_batch(const Shape& sample, int classes, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape s{static_cast<std::int64_t>(n)};
  s.insert(s.end(), sample.begin(), sample.end());
  Batch b{random_tensor(s, rng), {}};
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(static_cast<std::int32_t>(i % classes));
  return b;
}

bool has_layer(const ModelState& m, LayerKind kind) {
  return std::any_of(m.layers.begin(), m.layers.end(), [&](const LayerSpec& l) { return l.kind == kind; });
}

}  // namespace

TEST_CASE("build_model layout") {
  auto m = build_model("mlp-2x256", 1, {784}, 10);
  CHECK(m.mask_size() == 784 * 256 + 256 * 256 + 256 * 10);
  CHECK(m.param_count() == m.mask_size() + 256 + 256 + 10);

  // layout offsets are contiguous and cover [0, d)
  std::int64_t offset = 0;
  for (const auto& s : m.layout) {
    CHECK(s.offset == offset);
    CHECK(m.param_info[s.param_index].maskable);
    offset += s.count;
  }
  CHECK(offset == m.mask_size());
  for (const auto& info : m.param_info) {
    if (info.name.find("bias") != std::string::npos || info.batchnorm) CHECK_FALSE(info.maskable);
  }

  auto tiny = build_model("tiny-mlp", 1, {2}, 2);
  CHECK(tiny.mask_size() == 12);
}

TEST_CASE("build_model determinism") {
  auto a = build_model("lenet-conv4", 42, {1, 12, 12}, 4);
  auto b = build_model("lenet-conv4", 42, {1, 12, 12}, 4);
  auto c = build_model("lenet-conv4", 43, {1, 12, 12}, 4);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i] == b.params[i]);
  CHECK_FALSE(a.params[0] == c.params[0]);
}

TEST_CASE("resnet-tiny structure") {
  auto m = build_model("resnet-tiny", 3, {3, 8, 8}, 10);
  CHECK(has_layer(m, LayerKind::kResidualBlock));
  CHECK(has_layer(m, LayerKind::kBatchNorm));
  CHECK(m.param_count() <= 100000);
  auto trace = forward(m, random_batch({3, 8, 8}, 10, 4, 1), std::nullopt, true);
  CHECK(trace.logits.shape() == Shape{4, 10});
  CHECK(trace.features.size() == 7);  // stem + two per block
  CHECK(trace.loss >= 0.0);
}

TEST_CASE("build_model errors") {
  CHECK_THROWS_AS(build_model("vgg-16", 1, {784}, 10), Error);
  CHECK_THROWS_AS(build_model("lenet-conv4", 1, {784}, 10), Error);
}

TEST_CASE("forward overlays") {
  for (const char* arch : {"mlp-2x256", "lenet-conv4", "resnet-tiny"}) {
    CAPTURE(arch);
    const bool image = std::string(arch) != "mlp-2x256";
    const Shape sample = image ? Shape{2, 8, 8} : Shape{16};
    auto m = build_model(arch, 5, sample, 4);
    auto batch = random_batch(sample, 4, 6, 9);
    const auto d = static_cast<std::size_t>(m.mask_size());

    auto plain = forward(m, batch, std::nullopt, true);
    std::vector<double> ones(d, 1.0);
    auto with_ones = forward(m, batch, ones, true);
    CHECK(plain.logits == with_ones.logits);
    CHECK(plain.loss == with_ones.loss);
    REQUIRE(plain.features.size() == with_ones.features.size());
    for (std::size_t i = 0; i < plain.features.size(); ++i) CHECK(plain.features[i] == with_ones.features[i]);

    // hard overlay vs. pre-multiplied weights: bit-identical
    std::mt19937_64 rng(17);
    std::vector<double> mask(d);
    for (auto& v : mask) v = (rng() % 3 == 0) ? 0.0 : 1.0;
    auto masked = forward(m, batch, mask);
    auto zeroed = m;
    std::vector<std::uint8_t> bits(mask.begin(), mask.end());
    apply_mask(zeroed, bits);
    auto direct = forward(zeroed, batch);
    CHECK(max_abs_diff(masked.logits, direct.logits) == 0.0);
    CHECK(masked.loss == direct.loss);

    CHECK_THROWS_AS(forward(m, batch, std::vector<double>(d + 1, 1.0)), Error);
  }
}

TEST_CASE("all-zero overlay is the naive network") {
  auto m = build_model("mlp-2x256", 2, {16}, 4);
  auto batch = random_batch({16}, 4, 5, 3);
  std::vector<double> zeros(static_cast<std::size_t>(m.mask_size()), 0.0);
  auto t = forward(m, batch, zeros);
  for (double v : t.logits.data()) CHECK(v == 0.0);
  CHECK(t.loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("batch norm uses only batch statistics") {
  auto m = build_model("resnet-tiny", 8, {1, 8, 8}, 3);
  auto batch = random_batch({1, 8, 8}, 3, 6, 4);
  auto base = forward(m, batch);

  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Batch shuffled{Tensor(batch.x.shape()), {}};
  const std::size_t per = batch.x.size() / batch.size();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(batch.x.data().begin() + perm[i] * per, per, shuffled.x.values().begin() + i * per);
    shuffled.y.push_back(batch.y[perm[i]]);
  }
  auto out = forward(m, shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      CHECK(std::fabs(out.logits[i * 3 + c] - base.logits[perm[i] * 3 + c]) < 1e-9);
    }
  }
}

TEST_CASE("flat maskable round trip") {
  auto m = build_model("lenet-conv4", 1, {1, 8, 8}, 3);
  auto flat = flat_maskable(m);
  CHECK(static_cast<std::int64_t>(flat.size()) == m.mask_size());
  std::vector<double> idx(flat.size());
  std::iota(idx.begin(), idx.end(), 0.0);
  set_flat_maskable(m, idx);
  CHECK(flat_maskable(m) == idx);
  // biases untouched
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (!m.param_info[i].maskable) {
      for (double v : m.params[i].data()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("forward graph gradients match finite differences") {
  auto m = build_model("resnet-tiny", 11, {1, 6, 6}, 3);
  auto batch = random_batch({1, 6, 6}, 3, 4, 2);
  std::vector<ad::Var> leaves;
  for (const auto& p : m.params) leaves.push_back(ad::Var::leaf(p));
  auto g = ad::grad_values(forward_graph(m, batch, leaves).loss, leaves);
  for (std::size_t k : {std::size_t{0}, std::size_t{3}, m.params.size() - 2}) {
    CAPTURE(m.param_info[k].name);
    auto f = [&](const Tensor& x) {
      auto copy = m;
      copy.params[k] = x;
      return forward(copy, batch).loss;
    };
    Tensor fd = ad::finite_diff_grad(f, m.params[k], 1e-6);
    CHECK(cts::testing::max_rel_err(g[k], fd, 1e-5) < 1e-4);
  }
}
