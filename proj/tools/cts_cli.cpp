#include <cstdio>
#include <deque>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "cts/cts.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Options whose value is forwarded verbatim to one config key.
class Bindings {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    values_.emplace_back();
    app->add_option(flag, values_.back(), help);
    binds_.push_back({app, flag, key, &values_.back()});
  }

  // Applies the options given on the command line of the chosen subcommand.
  bool apply(cts_config* cfg, const CLI::App* chosen) const {
    for (const auto& b : binds_) {
      if (b.app != chosen) continue;
      if (b.app->count(b.flag) == 0) continue;
      if (cts_config_set(cfg, b.key.c_str(), b.value->c_str()) != CTS_OK) return false;
    }
    return true;
  }

 private:
  struct Bind {
    CLI::App* app;
    std::string flag;
    std::string key;
    std::string* value;
  };
  std::deque<std::string> values_;
  std::vector<Bind> binds_;
};

void add_task(Bindings& b, CLI::App* s) {
  b.add(s, "--dataset", "task.dataset", "dataset spec, e.g. blobs:classes=4,dim=20,n=4000,seed=7,sep=10");
  b.add(s, "--arch", "task.arch", "linear | tiny-mlp | mlp-2x256 | lenet-conv4 | resnet-tiny");
  b.add(s, "--steps", "train.steps", "training steps T");
  b.add(s, "--rewind", "train.rewind_step", "rewind step k");
  b.add(s, "--batch-size", "train.batch_size", "minibatch size");
  b.add(s, "--lr", "train.lr", "initial SGD learning rate");
  b.add(s, "--lr-drops", "train.lr_drops", "comma-separated steps where the rate drops 10x");
}

int fail(const char* what) {
  std::cerr << "error: " << what << ": " << cts_last_error() << "\n";
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees large tensors each step; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
  mallopt(M_TOP_PAD, 256 << 20);
#endif

  CLI::App app{"Continuous sparsification ticket search"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, precision;
  std::vector<std::string> overrides;
  unsigned long long seed = 0;
  app.add_option("--config", config_path, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "seed for init, batches, search noise and pruning");
  app.add_option("--out", out_dir, "output directory (report: output CSV path)");
  app.add_option("--precision", precision, "float64 | float32")->check(CLI::IsMember({"float64", "float32"}));
  app.add_option("--set", overrides, "section.key=value override (repeatable)");

  Bindings b;

  auto* search = app.add_subcommand("search", "one ticket search run");
  add_task(b, search);
  b.add(search, "--kappa", "search.kappa", "target density");
  b.add(search, "--objective", "search.objective", "loss | dloss | gradnorm | kl | feature | grad");
  b.add(search, "--controller", "search.controller", "gradbalance | lagrange");
  b.add(search, "--search-steps", "search.steps", "search steps S");
  b.add(search, "--search-epochs", "search.epochs", "search length in passes over the training set");
  b.add(search, "--tau", "search.tau", "concrete temperature");
  b.add(search, "--quick", "search.quick", "fraction of the retraining steps to run");

  auto* baseline = app.add_subcommand("baseline", "one baseline pruning run");
  add_task(b, baseline);
  b.add(baseline, "--method", "baseline.method", "snip | grasp | synflow | magnitude | random | overlay");
  b.add(baseline, "--kappa", "baseline.kappa", "target density");
  b.add(baseline, "--quick", "search.quick", "fraction of the retraining steps to run");

  auto* sweep = app.add_subcommand("sweep", "method x density x seed grid");
  add_task(b, sweep);
  b.add(sweep, "--methods", "sweep.methods", "comma list: cts[:obj], cts-init[:obj], ltr, baselines");
  b.add(sweep, "--densities", "sweep.densities", "comma list of densities");
  b.add(sweep, "--sparsities", "sweep.sparsities", "comma list of sparsities (1 - density)");
  b.add(sweep, "--repeats", "sweep.repeats", "seeds per cell");
  b.add(sweep, "--workers", "sweep.workers", "worker threads");
  b.add(sweep, "--mode", "sweep.mode", "grid | sanity");
  b.add(sweep, "--ablations", "sweep.ablations", "comma list: shuffle, invert, reinit");
  bool quiet = false;
  sweep->add_flag("--quiet", quiet, "no progress output");

  auto* sanity = app.add_subcommand("sanity", "ablation suite over an existing ticket");
  add_task(b, sanity);
  std::string ticket_path, checkpoint_path, dist_path;
  sanity->add_option("--ticket", ticket_path, "ticket JSON")->required()->check(CLI::ExistingFile);
  sanity->add_option("--checkpoint", checkpoint_path, "checkpoint the ticket was drawn from")
      ->required()
      ->check(CLI::ExistingFile);
  sanity->add_option("--distribution", dist_path, "distribution JSON (enables inversion)")
      ->check(CLI::ExistingFile);
  b.add(sanity, "--ablations", "sweep.ablations", "comma list: shuffle, invert, reinit");

  auto* oracle = app.add_subcommand("oracle", "exhaustive search over all masks of a small model");
  add_task(b, oracle);
  b.add(oracle, "--kappa", "oracle.kappa", "density");
  b.add(oracle, "--objective", "oracle.objective", "objective to minimise");
  b.add(oracle, "--samples", "oracle.samples", "evaluation batch size (0: whole training set)");

  auto* report = app.add_subcommand("report", "mean and std over seeds of metrics CSVs");
  std::vector<std::string> csvs;
  report->add_option("csv", csvs, "metrics CSV files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const CLI::App* chosen = app.get_subcommands().front();

  if (chosen == report) {
    std::vector<const char*> paths;
    for (const auto& p : csvs) paths.push_back(p.c_str());
    const std::string out = out_dir.empty() ? "summary.csv" : out_dir;
    char* table = nullptr;
    if (cts_run_report(paths.data(), paths.size(), out.c_str(), &table) != CTS_OK) return fail("report");
    std::cout << table;
    cts_string_free(table);
    return kExitOk;
  }

  cts_config* cfg = nullptr;
  if (cts_config_new(&cfg) != CTS_OK) return fail("config");
  struct Free {
    cts_config* c;
    ~Free() { cts_config_free(c); }
  } guard{cfg};

  if (!config_path.empty() && cts_config_load(cfg, config_path.c_str()) != CTS_OK) return fail("config");
  if (!b.apply(cfg, chosen)) {
    std::cerr << "error: " << cts_last_error() << "\n";
    return kExitUsage;
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || cts_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()) != CTS_OK) {
      std::cerr << "error: bad --set '" << kv << "'" << (eq == std::string::npos ? "" : ": ") << cts_last_error()
                << "\n\n" << app.help();
      return kExitUsage;
    }
  }
  if (app.count("--seed")) {
    const std::string s = std::to_string(seed);
    for (const char* key : {"train.seed", "search.seed", "sweep.seed", "baseline.prune_seed"})
      cts_config_set(cfg, key, s.c_str());
  }
  if (!out_dir.empty()) cts_config_set(cfg, "output.dir", out_dir.c_str());
  if (!precision.empty()) cts_config_set(cfg, "train.precision", precision.c_str());
  if (cts_config_validate(cfg) != CTS_OK) {
    std::cerr << "error: invalid configuration: " << cts_last_error() << "\n";
    return kExitUsage;
  }

  char out[4096];
  cts_config_get(cfg, "output.dir", out, sizeof out, nullptr);
  const std::string where = out[0] ? out : "out";

  if (chosen == search || chosen == baseline) {
    cts_run_summary s{};
    const bool is_search = chosen == search;
    if ((is_search ? cts_run_search(cfg, &s) : cts_run_baseline(cfg, &s)) != CTS_OK)
      return fail(is_search ? "search" : "baseline");
    std::printf("density %.6g (%lld / %lld)  accuracy %.4f  test loss %.4f  post-draw loss %.4f\n", s.density,
                static_cast<long long>(s.retained), static_cast<long long>(s.d), s.accuracy, s.test_loss,
                s.post_draw_loss);
    if (is_search)
      std::printf("final expected density %.6g  overshoot violations %lld\n", s.final_expected_density,
                  static_cast<long long>(s.overshoot_violations));
    std::printf("wrote %s\n", where.c_str());
    return kExitOk;
  }
  if (chosen == sweep) {
    int failed = 0;
    if (cts_run_sweep(cfg, quiet ? 0 : 1, &failed) != CTS_OK) return fail("sweep");
    std::printf("wrote %s/results.csv (%d failed cells)\n", where.c_str(), failed);
    return failed ? kExitFailure : kExitOk;
  }
  if (chosen == sanity) {
    if (cts_run_sanity(cfg, ticket_path.c_str(), checkpoint_path.c_str(),
                       dist_path.empty() ? nullptr : dist_path.c_str()) != CTS_OK)
      return fail("sanity");
    std::printf("wrote %s/sanity.csv\n", where.c_str());
    return kExitOk;
  }
  cts_oracle_summary o{};
  if (cts_run_oracle(cfg, &o) != CTS_OK) return fail("oracle");
  std::printf("%lld masks  best %.6g  worst %.6g\nwrote %s/oracle_table.csv and %s/oracle_ticket.json\n",
              static_cast<long long>(o.masks), o.best_value, o.worst_value, where.c_str(), where.c_str());
  return kExitOk;
}
