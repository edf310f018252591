#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cts/baselines.hpp"
#include "cts/error.hpp"
#include "test_support.hpp"

using namespace cts;
using cts::testing::random_tensor;

namespace {

Batch random_batch(const Shape& sample, int classes, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape s{static_cast<std::int64_t>(n)};
  s.insert(s.end(), sample.begin(), sample.end());
  Batch b{random_tensor(s, rng), {}};
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(static_cast<std::int32_t>(rng() % classes));
  return b;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

// linear model x -> x W + b with 2 inputs, 2 classes: W is maskable.
ModelState linear_model(std::vector<double> w) {
  auto m = build_model("linear", 1, {2}, 2);
  set_flat_maskable(m, w);
  return m;
}

}  // namespace

TEST_CASE("snip on a linear softmax toy matches the hand gradient") {
  // logits z = x W; dL/dW = x^T (softmax(z) - onehot) / N
  auto m = linear_model({0.5, -1.0, 2.0, 0.25});
  Batch b{Tensor({2, 2}, {1.0, 2.0, -0.5, 1.5}), {0, 1}};
  const std::vector<double> W{0.5, -1.0, 2.0, 0.25};
  std::vector<double> grad(4, 0.0);
  for (int n = 0; n < 2; ++n) {
    const double x0 = b.x[n * 2], x1 = b.x[n * 2 + 1];
    const double z0 = x0 * W[0] + x1 * W[2], z1 = x0 * W[1] + x1 * W[3];
    const double p0 = 1.0 / (1.0 + std::exp(z1 - z0)), p1 = 1.0 - p0;
    const double e0 = p0 - (b.y[n] == 0), e1 = p1 - (b.y[n] == 1);
    grad[0] += x0 * e0 / 2;
    grad[1] += x0 * e1 / 2;
    grad[2] += x1 * e0 / 2;
    grad[3] += x1 * e1 / 2;
  }
  auto s = snip_scores(m, b);
  for (int j = 0; j < 4; ++j) CHECK(s.scores[j] == doctest::Approx(std::fabs(grad[j] * W[j])).epsilon(1e-12));

  auto zeroed = linear_model({0.0, -1.0, 2.0, 0.25});
  CHECK(snip_scores(zeroed, b).scores[0] == 0.0);
}

TEST_CASE("snip ranking inside a relu path survives positive rescaling") {
  auto m = build_model("mlp-2x256", 2, {6}, 3);
  auto b = random_batch({6}, 3, 16, 1);
  auto base = snip_scores(m, b).scores;
  // scaling fc1 by c and fc2 by 1/c leaves the function unchanged, so scores
  // of every weight in those layers are unchanged as well
  auto scaled = m;
  for (auto& v : scaled.params[0].values()) v *= 4.0;
  for (auto& v : scaled.params[1].values()) v *= 4.0;
  for (auto& v : scaled.params[2].values()) v /= 4.0;
  auto after = snip_scores(scaled, b).scores;
  double worst = 0.0;
  for (std::size_t j = 0; j < base.size(); ++j) worst = std::max(worst, cts::testing::rel_err(base[j], after[j], 1e-12));
  CHECK(worst < 1e-9);
}

TEST_CASE("grasp finite-difference Hessian on a quadratic") {
  // L = 0.5 theta^T A theta: g = A theta, Hg = A g
  const std::vector<double> A{2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0};
  auto grad = [&](std::span<const double> t) {
    std::vector<double> g(3, 0.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) g[i] += A[i * 3 + j] * t[j];
    return g;
  };
  const std::vector<double> theta{0.7, -1.1, 0.4};
  auto g = grad(theta);
  auto hg = grad(g);
  auto scores = grasp_from_gradient(theta, grad);
  for (int j = 0; j < 3; ++j) CHECK(std::fabs(scores[j] - (-hg[j] * theta[j])) < 1e-6);

  auto zero = grasp_from_gradient(std::vector<double>(3, 0.0), grad);
  CHECK(zero == std::vector<double>(3, 0.0));
  auto flat = [](std::span<const double> t) { return std::vector<double>(t.size(), 0.0); };
  try {
    grasp_from_gradient(theta, flat);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("GraSP undefined") != std::string::npos);
  }
}

TEST_CASE("grasp and snip are batch deterministic and mean-loss invariant") {
  auto m = build_model("mlp-2x256", 3, {5}, 3);
  auto b = random_batch({5}, 3, 8, 2);
  CHECK(grasp_scores(m, b).scores == grasp_scores(m, b).scores);
  CHECK(snip_scores(m, b).scores == snip_scores(m, b).scores);

  Batch twice{Tensor({16, 5}), {}};
  std::copy(b.x.data().begin(), b.x.data().end(), twice.x.values().begin());
  std::copy(b.x.data().begin(), b.x.data().end(), twice.x.values().begin() + 40);
  twice.y = b.y;
  twice.y.insert(twice.y.end(), b.y.begin(), b.y.end());
  auto s1 = grasp_scores(m, b).scores, s2 = grasp_scores(m, twice).scores;
  double worst = 0.0;
  for (std::size_t j = 0; j < s1.size(); ++j) worst = std::max(worst, std::fabs(s1[j] - s2[j]));
  CHECK(worst < 1e-9);
}

TEST_CASE("synflow") {
  // one dense layer: R = sum_ij |W_ij| + sum |b|, dR/d|W_ij| = 1 so the
  // scores are the magnitudes themselves
  auto m = linear_model({3.0, -2.0, 1.0, 0.5});
  auto t = synflow_prune(m, 0.5);
  CHECK(t.mask == bits({1, 1, 0, 0}));
  CHECK(t.method == "synflow");
  CHECK(synflow_prune(m, 1.0).mask == bits({1, 1, 1, 1}));

  // two-layer path products: tiny-mlp fc1 [2,3], fc2 [3,2]
  auto tiny = build_model("tiny-mlp", 1, {2}, 2);
  set_flat_maskable(tiny, std::vector<double>{1, 2, 3, 4, 5, 6, 1, 1, 1, 0.1, 2, 2});
  // flow through hidden unit h: (|W1[0,h]| + |W1[1,h]|) * (|W2[h,0]| + |W2[h,1]|)
  // hidden sums: h0 = 1+4 = 5, h1 = 2+5 = 7, h2 = 3+6 = 9; out sums: 2, 1.1, 4
  // score W1[i,h] = |W1[i,h]| * outsum_h; score W2[h,o] = insum_h * |W2[h,o]|
  std::vector<double> hand{1 * 2.0, 2 * 1.1, 3 * 4.0, 4 * 2.0, 5 * 1.1, 6 * 4.0,
                           5 * 1.0, 5 * 1.0, 7 * 1.0, 7 * 0.1, 9 * 2.0, 9 * 2.0};
  auto one_shot = synflow_prune(tiny, 0.5, 1);
  CHECK(one_shot.mask == select_top(hand, 0.5).mask);

  for (const char* arch : {"mlp-2x256", "lenet-conv4", "resnet-tiny"}) {
    CAPTURE(arch);
    const Shape sample = std::string(arch) == "mlp-2x256" ? Shape{8} : Shape{1, 8, 8};
    auto model = build_model(arch, 4, sample, 4);
    auto ticket = synflow_prune(model, 1e-3, 100);
    CHECK(ticket.retained() == ticket_size(model.mask_size(), 1e-3));
    CHECK(synaptic_flow(model, ticket) > 0.0);
    if (std::string(arch) == "resnet-tiny") {
      CHECK_NOTHROW(check_flow_collapse(model, ticket));
    } else {
      CHECK_NOTHROW(check_layer_collapse(ticket));
    }
  }
}

TEST_CASE("prune_by_scores, magnitude and random") {
  auto m = linear_model({3.0, 1.0, 2.0, 0.5});
  SaliencyScores s{{0.9, 0.1, 0.5, 0.2}, "x", SelectionRule::kLargest};
  CHECK(prune_by_scores(s, 0.5, m).mask == bits({1, 0, 1, 0}));
  SaliencyScores eq{{1, 1, 1, 1}, "x", SelectionRule::kLargest};
  CHECK(prune_by_scores(eq, 0.5, m).mask == bits({1, 1, 0, 0}));
  CHECK(prune_by_scores(s, 1.0, m).mask == bits({1, 1, 1, 1}));
  SaliencyScores mag{{-0.9, 0.1, 0.5, -0.2}, "x", SelectionRule::kLargestMagnitude};
  CHECK(prune_by_scores(mag, 0.5, m).mask == bits({1, 0, 1, 0}));

  auto three = build_model("linear", 1, {3}, 2);
  set_flat_maskable(three, std::vector<double>{3, -1, 1, -2, 0.1, 0.2});
  // |theta| = 3 1 1 2 .1 .2: the tie at 1 goes to the lower index
  CHECK(magnitude_prune(three, 0.5).mask == bits({1, 1, 0, 1, 0, 0}));

  CHECK(random_prune(10, 1.0, 3).mask == std::vector<std::uint8_t>(10, 1));
  CHECK(random_prune(50, 0.3, 3).retained() == 15);
  CHECK(random_prune(50, 0.3, 3).mask == random_prune(50, 0.3, 3).mask);
  std::vector<int> hits(40, 0);
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    auto t = random_prune(40, 0.3, static_cast<std::uint64_t>(s));
    for (int j = 0; j < 40; ++j) hits[j] += t.mask[j];
  }
  for (int j = 0; j < 40; ++j) CHECK(std::fabs(hits[j] / double(draws) - 0.3) < 0.02);
  CHECK_THROWS_AS(random_prune(10, 0.01, 1), Error);
}

TEST_CASE("noisy overlay scores") {
  // scores are taken at a briefly trained theta_k, as in a real run
  auto data = make_blobs(BlobsSpec{});
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.lr.initial = 0.05;
  cfg.seed = 1;
  auto m = train(build_model("mlp-2x256", 1, data.sample_shape, data.num_classes), data, cfg, std::nullopt, 100);
  auto b = data.train_prefix(640);
  auto zero = noisy_overlay_scores(m, b, ObjectiveKind::kReverseKl, 0.0, 1);
  double worst = 0.0;
  for (double v : zero.scores) worst = std::max(worst, v);
  CHECK(worst < 1e-15);
  auto leaf = ad::Var::leaf(Tensor(Shape{m.mask_size()}, 1.0));
  CHECK(objective_graph(ObjectiveKind::kReverseKl, m, b, leaf, compute_teacher(m, b, ObjectiveKind::kReverseKl))
            .item() == 0.0);

  auto a = noisy_overlay_scores(m, b, ObjectiveKind::kReverseKl, kOverlayNoise, 1);
  auto c = noisy_overlay_scores(m, b, ObjectiveKind::kReverseKl, kOverlayNoise, 2);
  CHECK(a.rule == SelectionRule::kLargestMagnitude);
  CHECK(spearman(a.scores, c.scores) > 0.9);
  CHECK_THROWS_AS(noisy_overlay_scores(m, b, ObjectiveKind::kTaskLoss), Error);
}

TEST_CASE("ltr mechanics") {
  CHECK(ltr_count(1000, 0.2, 3) == 512);
  CHECK(ltr_count(1000, 0.2, 0) == 1000);

  auto data = load_dataset("blobs:classes=3,dim=8,n=300,seed=2,sep=8");
  LtrConfig cfg;
  cfg.rounds = 3;
  cfg.train.steps = 30;
  cfg.train.rewind_step = 5;
  cfg.train.batch_size = 32;
  cfg.train.lr.initial = 0.05;
  cfg.train.seed = 4;
  auto res = run_ltr(cfg, "tiny-mlp", data);
  REQUIRE(res.rounds.size() == 4);
  const auto d = res.rewound.mask_size();
  for (int r = 0; r <= 3; ++r) {
    CHECK(res.rounds[r].ticket.retained() == ltr_count(d, 0.2, r));
    // surviving weights of every round start at theta_k bit for bit
    auto start = flat_maskable(res.rounds[r].start), theta_k = flat_maskable(res.rewound);
    bool rewound = true;
    for (std::size_t j = 0; j < start.size(); ++j) {
      rewound = rewound && (res.rounds[r].ticket.mask[j] ? start[j] == theta_k[j] : start[j] == 0.0);
    }
    CHECK(rewound);
    if (r > 0) {
      bool nested = true;
      for (std::size_t j = 0; j < start.size(); ++j) nested = nested && (res.rounds[r].ticket.mask[j] <= res.rounds[r - 1].ticket.mask[j]);
      CHECK(nested);
    }
  }
  // round 0 is the dense run
  auto dense = train(build_model("tiny-mlp", 4, data.sample_shape, 3), data, cfg.train);
  CHECK(dense.params == res.rounds[0].final_model.params);
}

TEST_CASE("sanity ablations") {
  LayerLayout layout{{"a", 0, 6, {6}, 0}, {"b", 6, 4, {4}, 1}, {"c", 10, 3, {3}, 2}};
  auto t = ticket_from_mask(bits({1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1}), layout, 0.5, "x", "cts");
  auto s = shuffle_layerwise(t, 9);
  CHECK(layer_densities(s) == layer_densities(t));
  CHECK(s.retained() == t.retained());
  CHECK(std::vector<std::uint8_t>(s.mask.begin() + 10, s.mask.end()) == bits({1, 1, 1}));
  bool changed = false;
  for (std::uint64_t seed = 0; seed < 5; ++seed) changed = changed || shuffle_layerwise(t, seed).mask != t.mask;
  CHECK(changed);

  auto m = build_model("lenet-conv4", 1, {1, 4, 4}, 3);
  auto r = reinit_model(m, 77);
  CHECK_FALSE(r.params[0] == m.params[0]);
  CHECK(r.layout == m.layout);

  CHECK_THROWS_AS(invert_ticket(nullptr, 0.5), Error);
  auto dist = init_distribution(4, 0.5);
  CHECK(invert_ticket(&dist, 0.5).mask == bits({0, 0, 1, 1}));
  CHECK(parse_ablation("shuffle") == Ablation::kShuffleLayerwise);
  CHECK_THROWS_AS(parse_ablation("prune"), Error);
}

TEST_CASE("baseline runs produce exact densities") {
  auto data = load_dataset("blobs:classes=3,dim=16,n=300,seed=2,sep=8,image=1x4x4");
  for (auto method : {BaselineMethod::kSnip, BaselineMethod::kGrasp, BaselineMethod::kSynflow,
                      BaselineMethod::kMagnitude, BaselineMethod::kRandom, BaselineMethod::kNoisyOverlay}) {
    CAPTURE(baseline_name(method));
    BaselineConfig cfg;
    cfg.method = method;
    cfg.kappa = 0.1;
    cfg.train.steps = 10;
    cfg.train.rewind_step = 2;
    cfg.train.batch_size = 16;
    cfg.synflow_iterations = 10;
    auto res = run_baseline(cfg, "lenet-conv4", data);
    CHECK(res.ticket.retained() == ticket_size(res.rewound.mask_size(), 0.1));
    CHECK(res.ticket.density == static_cast<double>(res.ticket.retained()) / res.rewound.mask_size());
    CHECK(parse_baseline(baseline_name(method)) == method);
    auto flat = flat_maskable(res.final_model);
    bool zero = true;
    for (std::size_t j = 0; j < flat.size(); ++j) zero = zero && (res.ticket.mask[j] || flat[j] == 0.0);
    CHECK(zero);
  }
}
