#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "cts/error.hpp"
#include "cts/mask.hpp"
#include "cts/objectives.hpp"
#include "test_support.hpp"

using namespace cts;
using ad::Var;
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

constexpr ObjectiveKind kAll[] = {ObjectiveKind::kTaskLoss,    ObjectiveKind::kRelLossChange,
                                  ObjectiveKind::kNegGradNorm, ObjectiveKind::kReverseKl,
                                  ObjectiveKind::kFeatureMatch, ObjectiveKind::kGradMatch};

}  // namespace

TEST_CASE("objective tags") {
  for (auto k : kAll) CHECK(parse_objective(objective_tag(k)) == k);
  CHECK_THROWS_AS(parse_objective("forward-kl"), Error);
  CHECK_FALSE(needs_teacher(ObjectiveKind::kTaskLoss));
  CHECK_FALSE(needs_teacher(ObjectiveKind::kNegGradNorm));
  CHECK(needs_teacher(ObjectiveKind::kReverseKl));
  CHECK(needs_student_grads(ObjectiveKind::kGradMatch));
  CHECK_FALSE(needs_student_grads(ObjectiveKind::kFeatureMatch));
}

TEST_CASE("task loss examples") {
  auto m = build_model("mlp-2x256", 1, {6}, 4);
  auto batch = random_batch({6}, 4, 5, 2);
  std::vector<double> zeros(static_cast<std::size_t>(m.mask_size()), 0.0);
  CHECK(objective_value(ObjectiveKind::kTaskLoss, m, batch, zeros, {}) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  std::vector<double> ones(zeros.size(), 1.0);
  CHECK(objective_value(ObjectiveKind::kTaskLoss, m, batch, ones, {}) == forward(m, batch).loss);

  // confident correct logits drive the loss to 0
  Tensor logits({2, 3}, {50, 0, 0, 0, 0, 50});
  std::vector<std::int32_t> y{0, 2};
  CHECK(ad::cross_entropy(Var::constant(logits), y).item() < 1e-20);
}

TEST_CASE("relative loss change") {
  auto v = [](double s, double t) { return rel_loss_change(Var::constant(Tensor::scalar(s)), t).item(); };
  CHECK(v(0.7, 0.7) == 0.0);
  CHECK(v(1.4, 0.7) == doctest::Approx(1.0));
  CHECK(v(0.35, 0.7) == doctest::Approx(0.5));
  try {
    v(1.0, 1e-13);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("degenerate teacher loss") != std::string::npos);
  }
}

TEST_CASE("reverse KL") {
  Tensor t({1, 2}, {std::log(0.9), std::log(0.1)});
  Tensor s({1, 2}, {0.0, 0.0});
  const double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(reverse_kl(Var::constant(s), t).item() == doctest::Approx(expect).epsilon(1e-14));
  CHECK(reverse_kl(Var::constant(t), t).item() == 0.0);

  std::mt19937_64 rng(4);
  bool nonneg = true;
  for (int trial = 0; trial < 10000; ++trial) {
    const double scale = trial % 2 ? 1.0 : 40.0;
    auto a = random_tensor({3, 5}, rng, -scale, scale);
    auto b = random_tensor({3, 5}, rng, -scale, scale);
    const double kl = reverse_kl(Var::constant(a), b).item();
    nonneg = nonneg && kl >= 0.0 && std::isfinite(kl);
  }
  CHECK(nonneg);
}

TEST_CASE("feature matching") {
  Tensor ft = Tensor::vector({1, 2, 3});
  Tensor fs = Tensor::vector({3, 2, 1});
  const Var s = Var::constant(fs);
  const double hand = (8.0 / 3.0) / (2.0 / 3.0 + 1e-5);
  CHECK(normalised_mse(std::span(&s, 1), std::span(&ft, 1)).item() == doctest::Approx(hand).epsilon(1e-14));

  std::mt19937_64 rng(8);
  std::vector<Tensor> teacher{random_tensor({4, 6}, rng), random_tensor({4, 3}, rng)};
  std::vector<Var> same{Var::constant(teacher[0]), Var::constant(teacher[1])};
  CHECK(normalised_mse(same, teacher).item() == 0.0);

  std::vector<Var> affine;
  for (const auto& t : teacher) affine.push_back(ad::add_scalar(ad::scale(Var::constant(t), 3.0), -1.5));
  CHECK(normalised_mse(affine, teacher).item() < 1e-9);
  // teacher rescaled instead of student: also invariant
  std::vector<Tensor> scaled;
  for (const auto& t : teacher) scaled.push_back(ad::scale(Var::constant(t), 2.0).value());
  CHECK(normalised_mse(same, scaled).item() < 1e-9);

  CHECK_THROWS_AS(normalised_mse(std::span(same.data(), 1), teacher), Error);
}

TEST_CASE("negative gradient norm on a quadratic") {
  // L = 0.5 (a x^2 + b y^2): grad = (a x, b y), -|grad| and its derivative.
  const double a = 3.0, b = 0.5, x = 0.7, y = -1.2;
  auto theta = Var::leaf(Tensor::vector({x, y}));
  Var coef = Var::constant(Tensor::vector({a, b}));
  Var loss = ad::scale(ad::sum(ad::mul(coef, ad::square(theta))), 0.5);
  auto g = ad::grad(loss, std::span(&theta, 1), true);
  Var r = neg_grad_norm(g);
  const double norm = std::hypot(a * x, b * y);
  CHECK(r.item() == doctest::Approx(-norm).epsilon(1e-15));
  auto dr = ad::grad_values(r, std::span(&theta, 1))[0];
  CHECK(dr[0] == doctest::Approx(-a * a * x / norm).epsilon(1e-14));
  CHECK(dr[1] == doctest::Approx(-b * b * y / norm).epsilon(1e-14));

  // homogeneity in the loss scale
  auto g3 = ad::grad(ad::scale(loss, 3.0), std::span(&theta, 1), true);
  CHECK(neg_grad_norm(g3).item() == doctest::Approx(3.0 * r.item()).epsilon(1e-14));

  // zero gradient
  auto flat = Var::leaf(Tensor::vector({0.0, 0.0}));
  auto gz = ad::grad(ad::scale(ad::sum(ad::square(flat)), 0.5), std::span(&flat, 1), true);
  CHECK(neg_grad_norm(gz).item() == 0.0);
}

TEST_CASE("gradient matching on a two-layer linear network") {
  // L = sum((X W1 W2 - T)^2) / (2N); dW2 = (X W1)^T E, dW1 = X^T E W2^T with
  // E = (X W1 W2 - T) / N.
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::mt19937_64 rng(12);
  const int n = 5, a = 3, b = 4, c = 2;
  auto X = random_tensor({n, a}, rng), T = random_tensor({n, c}, rng);
  auto W1 = random_tensor({a, b}, rng), W2 = random_tensor({b, c}, rng);
  auto V1 = random_tensor({a, b}, rng), V2 = random_tensor({b, c}, rng);  // teacher weights
  auto map = [](const Tensor& t) { return Eigen::Map<const M>(t.data().data(), t.shape()[0], t.shape()[1]); };
  auto hand_grads = [&](const Tensor& w1, const Tensor& w2) {
    M e = (map(X) * map(w1) * map(w2) - map(T)) / n;
    M g1 = map(X).transpose() * e * map(w2).transpose();
    M g2 = (map(X) * map(w1)).transpose() * e;
    return std::vector<M>{g1, g2};
  };
  auto hand_norm = [](const M& g) {
    const double mean = g.mean();
    const double var = (g.array() - mean).square().mean();
    return M((g.array() - mean) / std::sqrt(var + 1e-5));
  };
  auto hs = hand_grads(W1, W2), ht = hand_grads(V1, V2);
  double expect = 0.0;
  for (int l = 0; l < 2; ++l) expect += (hand_norm(hs[l]) - hand_norm(ht[l])).array().square().mean() / 2.0;

  std::vector<Var> w{Var::leaf(W1), Var::leaf(W2)};
  Var y = ad::matmul(ad::matmul(Var::constant(X), w[0]), w[1]);
  Var loss = ad::scale(ad::sum(ad::square(ad::sub(y, Var::constant(T)))), 0.5 / n);
  auto gs = ad::grad(loss, w, true);
  std::vector<Tensor> teacher{Tensor({a, b}, std::vector<double>(ht[0].data(), ht[0].data() + a * b)),
                              Tensor({b, c}, std::vector<double>(ht[1].data(), ht[1].data() + b * c))};
  CHECK(std::fabs(normalised_mse(gs, teacher).item() - expect) < 1e-8);

  std::vector<Tensor> student{Tensor({a, b}, std::vector<double>(hs[0].data(), hs[0].data() + a * b)),
                              Tensor({b, c}, std::vector<double>(hs[1].data(), hs[1].data() + b * c))};
  CHECK(normalised_mse(gs, student).item() < 1e-20);
}

TEST_CASE("teacher-comparing objectives vanish at the all-ones mask") {
  for (const char* arch : {"mlp-2x256", "lenet-conv4", "resnet-tiny"}) {
    CAPTURE(arch);
    const bool image = std::string(arch) != "mlp-2x256";
    const Shape sample = image ? Shape{1, 8, 8} : Shape{10};
    auto m = build_model(arch, 3, sample, 3);
    auto batch = random_batch(sample, 3, 6, 5);
    auto leaf = Var::leaf(Tensor(Shape{m.mask_size()}, 1.0));
    for (auto k : {ObjectiveKind::kRelLossChange, ObjectiveKind::kReverseKl, ObjectiveKind::kFeatureMatch,
                   ObjectiveKind::kGradMatch}) {
      CAPTURE(objective_tag(k));
      auto teacher = compute_teacher(m, batch, k);
      const double v = objective_graph(k, m, batch, leaf, teacher).item();
      if (k == ObjectiveKind::kRelLossChange || k == ObjectiveKind::kReverseKl) {
        CHECK(v == 0.0);
      } else {
        CHECK(std::fabs(v) <= 1e-12);
      }
    }
  }
}

TEST_CASE("objectives stay finite on random masks") {
  auto m = build_model("tiny-mlp", 2, {2}, 2);
  auto lenet = build_model("lenet-conv4", 2, {1, 4, 4}, 3);
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool finite = true;
  int evaluated = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto& model = trial % 10 == 0 ? lenet : m;
    const auto sample = model.input_shape;
    auto batch = random_batch(sample, model.num_classes, 4, rng());
    std::vector<double> overlay(static_cast<std::size_t>(model.mask_size()));
    const int style = trial % 3;
    for (auto& v : overlay) v = style == 0 ? u(rng) : style == 1 ? (u(rng) < 0.1 ? 1.0 : 0.0) : (u(rng) < 0.5);
    const auto kind = kAll[trial % 6];
    auto teacher = compute_teacher(model, batch, kind);
    if (kind == ObjectiveKind::kRelLossChange && teacher.loss < 1e-12) continue;
    finite = finite && std::isfinite(objective_value(kind, model, batch, overlay, teacher));
    ++evaluated;
  }
  CHECK(finite);
  CHECK(evaluated > 900);
}

TEST_CASE("objective gradients in the mask logits match finite differences") {
  auto m = build_model("mlp-2x256", 6, {8}, 4);
  auto batch = random_batch({8}, 4, 8, 3);
  const auto d = static_cast<std::size_t>(m.mask_size());
  Rng rng(5);
  auto dist = init_distribution(static_cast<std::int64_t>(d), 0.6);
  auto noise = logistic_noise(d, rng);
  std::vector<std::size_t> coords;
  for (int i = 0; i < 12; ++i) coords.push_back(static_cast<std::size_t>(rng.below(d)));

  for (auto k : {ObjectiveKind::kTaskLoss, ObjectiveKind::kRelLossChange, ObjectiveKind::kReverseKl,
                 ObjectiveKind::kFeatureMatch}) {
    CAPTURE(objective_tag(k));
    auto teacher = compute_teacher(m, batch, k);
    auto leaf = Var::leaf(Tensor::vector(dist.logits));
    auto g = ad::grad_values(objective_graph(k, m, batch, soft_mask(leaf, noise, dist.tau), teacher),
                             std::span(&leaf, 1))[0];
    auto at = [&](std::vector<double> logits, std::vector<std::uint8_t>* pattern) {
      auto s = soft_mask_values(logits, noise, dist.tau);
      if (pattern) {
        ad::NoGradGuard ng;
        auto params = overlay_params(m, Var::constant(Tensor::vector(s)));
        *pattern = forward_graph(m, batch, params, {false, true}).relu_pattern;
      }
      return objective_value(k, m, batch, s, teacher);
    };
    int checked = 0;
    for (std::size_t j : coords) {
      const double h = 1e-5;
      auto plus = dist.logits, minus = dist.logits;
      plus[j] += h;
      minus[j] -= h;
      std::vector<std::uint8_t> pp, pm;
      const double fp = at(plus, &pp), fm = at(minus, &pm);
      if (pp != pm) continue;  // relu kink between the probes
      const double fd = (fp - fm) / (2 * h);
      CAPTURE(j);
      CHECK(cts::testing::rel_err(g[j], fd, 1e-7) < 1e-3);
      ++checked;
    }
    CHECK(checked >= 8);
  }
}

TEST_CASE("double-backward objectives match finite differences") {
  // h = 1e-4: these objectives sum second-order terms, and at smaller steps
  // round-off in the value dominates the difference quotient.
  for (const char* arch : {"tiny-mlp", "lenet-conv4"}) {
    const bool conv = std::string(arch) == "lenet-conv4";
    const Shape in = conv ? Shape{1, 4, 4} : Shape{5};
    auto m = build_model(arch, 3, in, 3);
    auto batch = random_batch(in, 3, 6, 8);
    const auto d = static_cast<std::size_t>(m.mask_size());
    Rng rng(11);
    std::vector<double> ov(d);
    for (auto& v : ov) v = 0.2 + 0.8 * rng.uniform_open();
    for (auto k : {ObjectiveKind::kNegGradNorm, ObjectiveKind::kGradMatch}) {
      CAPTURE(arch);
      CAPTURE(objective_tag(k));
      auto teacher = compute_teacher(m, batch, k);
      auto leaf = Var::leaf(Tensor::vector(ov));
      auto g = ad::grad_values(objective_graph(k, m, batch, leaf, teacher), std::span(&leaf, 1))[0];
      auto pattern = [&](const std::vector<double>& o) {
        ad::NoGradGuard ng;
        return forward_graph(m, batch, overlay_params(m, Var::constant(Tensor::vector(o))), {false, true})
            .relu_pattern;
      };
      int checked = 0;
      for (int i = 0; i < 10; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(d));
        const double h = 1e-4;
        auto plus = ov, minus = ov;
        plus[j] += h;
        minus[j] -= h;
        if (pattern(plus) != pattern(minus)) continue;
        const double fd =
            (objective_value(k, m, batch, plus, teacher) - objective_value(k, m, batch, minus, teacher)) / (2 * h);
        CAPTURE(j);
        CHECK(cts::testing::rel_err(g[j], fd, 1e-7) < 1e-5);
        ++checked;
      }
      CHECK(checked >= 6);
    }
  }
}
