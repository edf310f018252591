#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "cts/error.hpp"
#include "cts/experiment.hpp"

using namespace cts;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cts_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_experiment(const fs::path& out) {
  ConfigMap m;
  set_config_value(m, "task.dataset", "blobs:classes=3,dim=8,n=300,seed=2,sep=6");
  set_config_value(m, "task.arch", "tiny-mlp");
  set_config_value(m, "train.steps", "20");
  set_config_value(m, "train.rewind_step", "4");
  set_config_value(m, "train.batch_size", "32");
  set_config_value(m, "train.lr_drops", "15");
  set_config_value(m, "search.steps", "10");
  set_config_value(m, "search.kappa", "0.5");
  set_config_value(m, "sweep.densities", "0.5,0.25");
  set_config_value(m, "output.dir", out.string());
  return experiment_config(m);
}

}  // namespace

TEST_CASE("oracle enumerates every mask of the right size") {
  auto data = load_dataset("blobs:classes=2,dim=2,n=100,seed=1,sep=3");
  auto m = build_model("linear", 1, data.sample_shape, data.num_classes);
  REQUIRE(m.mask_size() == 4);
  auto batch = data.train_prefix(80);
  auto o = brute_force_oracle(m, batch, 0.5, ObjectiveKind::kTaskLoss);
  REQUIRE(o.table.size() == 6);
  std::set<std::string> seen;
  for (const auto& e : o.table) {
    CHECK(std::count(e.mask.begin(), e.mask.end(), 1) == 2);
    seen.insert(mask_string(e.mask));
    CHECK(e.value == doctest::Approx(mask_objective(m, batch, e.mask, ObjectiveKind::kTaskLoss)));
  }
  CHECK(seen.size() == 6);
  CHECK(std::is_sorted(o.table.begin(), o.table.end(),
                       [](const OracleEntry& a, const OracleEntry& b) { return a.value < b.value; }));
  CHECK(o.best.mask == o.table.front().mask);
  CHECK(o.best_value == o.table.front().value);
  CHECK(oracle_rank(o, o.best_value) == 0.0);

  auto full = brute_force_oracle(m, batch, 1.0, ObjectiveKind::kTaskLoss);
  REQUIRE(full.table.size() == 1);
  CHECK(full.best_value == compute_teacher(m, batch, ObjectiveKind::kTaskLoss).loss);

  auto kl = brute_force_oracle(m, batch, 1.0, ObjectiveKind::kReverseKl);
  CHECK(kl.best_value == 0.0);
}

TEST_CASE("oracle budget") {
  CHECK(binomial(12, 6) == 924);
  CHECK(binomial(24, 12) == 2704156);
  CHECK(binomial(5, 7) == 0);
  auto data = load_dataset("blobs:classes=2,dim=2,n=100,seed=1,sep=3");
  auto big = build_model("mlp-2x256", 1, data.sample_shape, data.num_classes);
  CHECK_THROWS_AS(brute_force_oracle(big, data.train_prefix(10), 0.5, ObjectiveKind::kTaskLoss), Error);
}

TEST_CASE("oracle bounds a CTS ticket on tiny-mlp") {
  auto data = load_dataset("blobs:classes=2,dim=2,n=500,seed=3,sep=3");
  SearchConfig cfg;
  cfg.kappa = 0.5;
  cfg.objective = ObjectiveKind::kTaskLoss;
  cfg.search_steps = 300;
  cfg.train.steps = 51;
  cfg.train.rewind_step = 50;
  cfg.train.batch_size = 32;
  cfg.train.lr = {0.1, 0.1, {}};
  cfg.train.seed = 2;
  cfg.search_seed = 2;
  auto m = train(build_model("tiny-mlp", 2, data.sample_shape, data.num_classes), data, cfg.train,
                 std::nullopt, 50);
  REQUIRE(m.mask_size() == 12);
  auto t = clamp_topk(search_phase(m, cfg, data).dist, 0.5);
  auto batch = data.train_prefix(data.train_size());
  auto o = brute_force_oracle(m, batch, 0.5, ObjectiveKind::kTaskLoss);
  REQUIRE(o.table.size() == 924);
  const double v = mask_objective(m, batch, t.mask, ObjectiveKind::kTaskLoss);
  CHECK(o.best_value <= v);
  CHECK(oracle_rank(o, v) < 0.05);
  CHECK(oracle_table_csv(o).rfind("mask,value\n", 0) == 0);
}

TEST_CASE("linear model separates distant blobs") {
  auto data = load_dataset("blobs:classes=4,dim=20,n=4000,seed=7,sep=10");
  TrainConfig t;
  t.steps = 300;
  t.batch_size = 64;
  t.lr = {0.05, 0.1, {200}};
  auto m = train(build_model("linear", 1, data.sample_shape, data.num_classes), data, t);
  CHECK(evaluate(m, data).accuracy > 0.99);
}

TEST_CASE("ini config") {
  auto m = parse_ini("[task]\narch = lenet-conv4\n[sweep]\nsparsities = 0.95, 0.98\nrepeats = 3\n"
                     "methods = cts:kl, snip\n[train]\nprecision = float32\nlr_drops = 10,20\nsteps=30\nrewind_step = 5\n");
  auto c = experiment_config(m);
  CHECK(c.arch == "lenet-conv4");
  REQUIRE(c.densities.size() == 2);
  CHECK(c.densities[0] == doctest::Approx(0.05));
  CHECK(c.repeats == 3);
  CHECK(c.methods == std::vector<std::string>{"cts:kl", "snip"});
  CHECK(c.train.precision == Precision::kFloat32);
  CHECK(c.search.train.lr.drop_steps == std::vector<std::int64_t>{10, 20});
  CHECK(parse_ini(format_ini(m)) == m);

  CHECK_THROWS_AS(parse_ini("[train]\nstepz = 3\n"), Error);
  CHECK_THROWS_AS(experiment_config(parse_ini("[train]\nsteps = many\n")), Error);
  CHECK_THROWS_AS(experiment_config(parse_ini("[sweep]\nrepeats = 0\n")), Error);
  CHECK_THROWS_AS(experiment_config(parse_ini("[sweep]\nsparsities = 1.0\n")), Error);
  CHECK_THROWS_AS(experiment_config(parse_ini("[sweep]\nmode = other\n")), Error);
}

TEST_CASE("sweep with no densities writes only the header") {
  auto dir = fresh_dir("empty");
  auto cfg = tiny_experiment(dir);
  cfg.densities.clear();
  auto res = run_experiment(cfg);
  CHECK(res.records.empty());
  CHECK(read_text_file((dir / "results.csv").string()) == metrics_csv_header() + "\n");
  fs::remove_all(dir);
}

TEST_CASE("sweep grid, determinism and resume") {
  auto dir = fresh_dir("grid");
  auto cfg = tiny_experiment(dir);
  cfg.methods = {"cts", "magnitude", "ltr"};
  cfg.repeats = 3;
  auto res = run_experiment(cfg);
  CHECK(res.failed_cells == 0);
  REQUIRE(res.records.size() == 3 * 2 * 3);
  std::set<std::uint64_t> seeds;
  for (std::size_t i = 0; i < 3; ++i) seeds.insert(res.records[i].seed);
  CHECK(seeds.size() == 3);
  for (const auto& r : res.records) {
    CHECK(r.status == "ok");
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
    double weighted = 0.0;
    std::int64_t total = 0;
    for (const auto& l : r.layers) {
      CHECK(l.density >= 0.0);
      CHECK(l.density <= 1.0);
      weighted += l.density * static_cast<double>(l.count);
      total += l.count;
    }
    CHECK(total == r.d);
    CHECK(std::fabs(weighted / static_cast<double>(total) - r.achieved_density) <= 1.0 / r.d);
  }
  const auto csv = read_text_file((dir / "results.csv").string());
  CHECK(parse_metrics_csv(csv).size() == 18);

  // Rerun reuses every cell and writes the same bytes.
  auto again = run_experiment(cfg);
  CHECK(again.resumed_cells == 18);
  CHECK(read_text_file((dir / "results.csv").string()) == csv);

  // A corrupted cell is recomputed.
  const auto cell = dir / "cells" / (CellSpec{"cts", 0.5, 1}.id() + ".txt");
  auto text = read_text_file(cell.string());
  text[6] = text[6] == '9' ? '8' : '9';
  write_text_file(cell.string(), text);
  auto third = run_experiment(cfg);
  CHECK(third.resumed_cells == 17);
  CHECK(read_text_file((dir / "results.csv").string()) == csv);

  // Fresh run with two workers: identical CSV and tickets.
  auto dir2 = fresh_dir("grid2");
  cfg.out = dir2.string();
  cfg.workers = 2;
  run_experiment(cfg);
  CHECK(read_text_file((dir2 / "results.csv").string()) == csv);
  CHECK(read_text_file((dir2 / "layers.csv").string()) == read_text_file((dir / "layers.csv").string()));
  for (const auto& e : fs::directory_iterator(dir / "tickets"))
    CHECK(read_text_file(e.path().string()) ==
          read_text_file((dir2 / "tickets" / e.path().filename()).string()));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("sweep records failed cells and continues") {
  auto dir = fresh_dir("fail");
  auto cfg = tiny_experiment(dir);
  cfg.methods = {"cts", "synflow"};
  cfg.densities = {0.01};  // round(0.12) = 0 -> empty ticket
  auto res = run_experiment(cfg);
  CHECK(res.failed_cells == 2);
  REQUIRE(res.records.size() == 2);
  CHECK(res.records[0].status == "empty_ticket");
  auto again = run_experiment(cfg);
  CHECK(again.resumed_cells == 0);
  fs::remove_all(dir);
}

TEST_CASE("sanity mode pairs ablations with their base run") {
  auto dir = fresh_dir("sanity");
  auto cfg = tiny_experiment(dir);
  cfg.mode = SweepMode::kSanity;
  cfg.densities = {0.5};
  auto res = run_experiment(cfg);
  REQUIRE(res.records.size() == 5);
  std::vector<std::string> methods;
  for (const auto& r : res.records) {
    methods.push_back(r.method);
    CHECK(r.seed == res.records[0].seed);
  }
  CHECK(methods == std::vector<std::string>{"cts", "cts+shuffle", "cts+invert", "cts-init", "cts-init+reinit"});
  CHECK(res.records[1].base == "cts");
  CHECK(res.records[3].base == "cts");
  CHECK(res.records[4].base == "cts-init");
  CHECK(res.records[1].retained == res.records[0].retained);
  CHECK(res.records[2].retained == res.records[0].retained);
  cfg.methods = {"snip"};
  CHECK_THROWS_AS(run_experiment(cfg), Error);
  fs::remove_all(dir);
}

TEST_CASE("sanity suite over an existing ticket") {
  auto dir = fresh_dir("suite");
  auto cfg = tiny_experiment(dir);
  auto data = load_dataset(cfg.dataset);
  SearchConfig sc = cfg.search;
  auto res = run_cts(sc, cfg.arch, data);
  auto dist = distribution_from_json(distribution_to_json(res.dist), res.ticket.layout);
  CHECK(dist.logits == res.dist.logits);
  auto rows = run_sanity_suite(cfg, data, res.ticket, res.rewound, &dist, sc.train.seed);
  REQUIRE(rows.size() == 4);
  // The base row reproduces the run's own retraining.
  CHECK(rows[0].accuracy == res.eval.accuracy);
  CHECK(rows[0].test_loss == res.eval.loss);
  CHECK(rows[0].post_draw_loss == res.post_draw_loss);
  CHECK_THROWS_AS(run_sanity_suite(cfg, data, res.ticket, res.rewound, nullptr, 1), Error);
}

TEST_CASE("report aggregates by hand") {
  std::vector<MetricsRecord> rows(4);
  const double acc[] = {0.8, 0.9, 0.85, 0.5};
  for (int i = 0; i < 4; ++i) {
    rows[i].method = i < 3 ? "cts" : "snip";
    rows[i].density = 0.05;
    rows[i].seed = static_cast<std::uint64_t>(i);
    rows[i].accuracy = acc[i];
    rows[i].post_draw_loss = i;
  }
  MetricsRecord bad;
  bad.method = "cts";
  bad.density = 0.05;
  bad.status = "divergence";
  rows.push_back(bad);
  std::string csv = metrics_csv_header() + "\n";
  for (const auto& r : rows) csv += metrics_csv_row(r) + "\n";
  auto back = parse_metrics_csv(csv);
  REQUIRE(back.size() == 5);
  CHECK(back[4].status == "divergence");
  auto s = summarize(back);
  REQUIRE(s.size() == 2);
  CHECK(s[0].method == "cts");
  CHECK(s[0].n == 3);
  CHECK(s[0].accuracy.mean == doctest::Approx(0.85));
  CHECK(s[0].accuracy.std == doctest::Approx(0.05));  // sqrt((0.0025 + 0.0025) / 2)
  CHECK(s[0].post_draw_loss.mean == doctest::Approx(1.0));
  CHECK(s[0].post_draw_loss.std == doctest::Approx(1.0));
  CHECK(s[1].n == 1);
  CHECK(s[1].accuracy.std == 0.0);
  CHECK(summary_csv(s).find("cts,0.05,0.95,3,") != std::string::npos);
  CHECK_THROWS_AS(parse_metrics_csv("method,seed\n"), Error);
}
