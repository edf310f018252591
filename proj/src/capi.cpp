#include "cts/cts.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <new>
#include <string>

#include "cts/error.hpp"
#include "cts/experiment.hpp"

struct cts_config {
  cts::ConfigMap map;
};
struct cts_dataset {
  cts::Dataset data;
};
struct cts_model {
  cts::ModelState state;
};
struct cts_ticket {
  cts::Ticket ticket;
};

namespace {

namespace fs = std::filesystem;
using namespace cts;

thread_local std::string t_last_error;

constexpr const char* kOracleDataset = "blobs:classes=2,dim=2,n=500,seed=3,sep=3";

template <typename F>
cts_status guarded(F&& f) {
  try {
    f();
    t_last_error.clear();
    return CTS_OK;
  } catch (const Error& e) {
    t_last_error = e.what();
    return static_cast<cts_status>(e.code());
  } catch (const std::bad_alloc&) {
    t_last_error = "out of memory";
    return CTS_ERR_INTERNAL;
  } catch (const fs::filesystem_error& e) {
    t_last_error = e.what();
    return CTS_ERR_IO;
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return CTS_ERR_INTERNAL;
  }
}

template <typename T>
void need(const T* p, const char* what) {
  require(p != nullptr, ErrorCode::kInvalidArgument, what, " is NULL");
}

fs::path prepare_out(const ExperimentConfig& c, const ConfigMap& map) {
  fs::path out(c.out);
  fs::create_directories(out);
  write_text_file((out / "config.ini").string(), format_ini(map));
  return out;
}

void write_results(const fs::path& out, const std::vector<MetricsRecord>& rows, const std::string& name) {
  std::string csv = metrics_csv_header() + "\n", layers = layers_csv_header() + "\n";
  for (const auto& r : rows) {
    csv += metrics_csv_row(r) + "\n";
    for (const auto& l : layers_csv_rows(r)) layers += l + "\n";
  }
  write_text_file((out / (name + ".csv")).string(), csv);
  write_text_file((out / (name + "_layers.csv")).string(), layers);
}

void fill_layers(MetricsRecord& r, const Ticket& t) {
  const auto dens = layer_densities(t);
  for (std::size_t l = 0; l < t.layout.size(); ++l) {
    const auto& s = t.layout[l];
    std::int64_t kept = 0;
    for (std::int64_t j = s.offset; j < s.offset + s.count; ++j) kept += t.mask[j];
    r.layers.push_back({s.name, s.count, kept, dens[l]});
  }
  r.retained = t.retained();
  r.d = t.size();
  r.achieved_density = t.density;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void summary_from(cts_run_summary* out, const MetricsRecord& r) {
  if (!out) return;
  std::memset(out, 0, sizeof *out);
  out->accuracy = r.accuracy;
  out->test_loss = r.test_loss;
  out->post_draw_loss = r.post_draw_loss;
  out->density = r.achieved_density;
  out->retained = r.retained;
  out->d = r.d;
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

}  // namespace

extern "C" {

const char* cts_version(void) { return "1.0.0"; }

const char* cts_status_name(int status) {
  if (status < 0 || status > static_cast<int>(ErrorCode::kInternal)) return "unknown";
  return error_code_name(static_cast<ErrorCode>(status));
}

const char* cts_last_error(void) { return t_last_error.c_str(); }

void cts_string_free(char* s) { std::free(s); }

// ---- config ----

cts_status cts_config_new(cts_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new cts_config();
  });
}

void cts_config_free(cts_config* cfg) { delete cfg; }

cts_status cts_config_load(cts_config* cfg, const char* path) {
  return guarded([&] {
    need(cfg, "cfg");
    need(path, "path");
    for (auto& [k, v] : load_ini(path)) cfg->map[k] = v;
  });
}

cts_status cts_config_set(cts_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    set_config_value(cfg->map, key, value);
  });
}

cts_status cts_config_get(const cts_config* cfg, const char* key, char* buf, size_t len, size_t* needed) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    auto it = cfg->map.find(key);
    const std::string v = it == cfg->map.end() ? std::string() : it->second;
    if (needed) *needed = v.size() + 1;
    if (buf && len > 0) {
      const std::size_t n = std::min(len - 1, v.size());
      std::memcpy(buf, v.data(), n);
      buf[n] = '\0';
    }
  });
}

cts_status cts_config_validate(const cts_config* cfg) {
  return guarded([&] {
    need(cfg, "cfg");
    experiment_config(cfg->map);
  });
}

cts_status cts_config_write(const cts_config* cfg, const char* path) {
  return guarded([&] {
    need(cfg, "cfg");
    need(path, "path");
    write_text_file(path, format_ini(cfg->map));
  });
}

// ---- data, models, tickets ----

cts_status cts_dataset_load(const char* spec, cts_dataset** out) {
  return guarded([&] {
    need(spec, "spec");
    need(out, "out");
    auto* d = new cts_dataset{load_dataset(spec)};
    *out = d;
  });
}

void cts_dataset_free(cts_dataset* data) { delete data; }

cts_status cts_dataset_info(const cts_dataset* data, int64_t* train_size, int64_t* test_size,
                            int32_t* num_classes) {
  return guarded([&] {
    need(data, "data");
    if (train_size) *train_size = static_cast<int64_t>(data->data.train_size());
    if (test_size) *test_size = static_cast<int64_t>(data->data.test_size());
    if (num_classes) *num_classes = data->data.num_classes;
  });
}

cts_status cts_model_build(const char* arch, uint64_t seed, const cts_dataset* data, cts_model** out) {
  return guarded([&] {
    need(arch, "arch");
    need(data, "data");
    need(out, "out");
    *out = new cts_model{build_model(arch, seed, data->data.sample_shape, data->data.num_classes)};
  });
}

cts_status cts_model_load(const char* path, cts_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new cts_model{load_checkpoint(path)};
  });
}

cts_status cts_model_save(const cts_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    save_checkpoint(path, model->state);
  });
}

void cts_model_free(cts_model* model) { delete model; }

cts_status cts_model_mask_size(const cts_model* model, int64_t* d) {
  return guarded([&] {
    need(model, "model");
    need(d, "d");
    *d = model->state.mask_size();
  });
}

cts_status cts_model_step(const cts_model* model, int64_t* step) {
  return guarded([&] {
    need(model, "model");
    need(step, "step");
    *step = model->state.step;
  });
}

cts_status cts_model_evaluate(const cts_model* model, const cts_dataset* data, const cts_ticket* ticket,
                              double* accuracy, double* loss) {
  return guarded([&] {
    need(model, "model");
    need(data, "data");
    const EvalResult r = ticket ? evaluate_ticket(model->state, ticket->ticket, data->data)
                                : evaluate(model->state, data->data);
    if (accuracy) *accuracy = r.accuracy;
    if (loss) *loss = r.loss;
  });
}

cts_status cts_ticket_load(const char* path, cts_ticket** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new cts_ticket{load_ticket(path)};
  });
}

cts_status cts_ticket_save(const cts_ticket* ticket, const char* path) {
  return guarded([&] {
    need(ticket, "ticket");
    need(path, "path");
    save_ticket(path, ticket->ticket);
  });
}

void cts_ticket_free(cts_ticket* ticket) { delete ticket; }

cts_status cts_ticket_info(const cts_ticket* ticket, int64_t* d, int64_t* retained, double* density) {
  return guarded([&] {
    need(ticket, "ticket");
    if (d) *d = ticket->ticket.size();
    if (retained) *retained = ticket->ticket.retained();
    if (density) *density = ticket->ticket.density;
  });
}

cts_status cts_ticket_mask(const cts_ticket* ticket, uint8_t* out, size_t len) {
  return guarded([&] {
    need(ticket, "ticket");
    need(out, "out");
    const auto& m = ticket->ticket.mask;
    require(len >= m.size(), ErrorCode::kInvalidArgument, "buffer holds ", len, " bytes, mask needs ", m.size());
    std::memcpy(out, m.data(), m.size());
  });
}

// ---- commands ----

cts_status cts_run_search(const cts_config* cfg, cts_run_summary* out) {
  return guarded([&] {
    need(cfg, "cfg");
    const ExperimentConfig c = experiment_config(cfg->map);
    const Dataset data = load_dataset(c.dataset);
    SearchConfig sc = c.search;
    if (c.search_epochs) sc.search_steps = search_steps_for_epochs(data, sc.train.batch_size, *c.search_epochs);
    const fs::path dir = prepare_out(c, cfg->map);

    const CtsResult res = run_cts(sc, c.arch, data);
    save_ticket((dir / "ticket.json").string(), res.ticket);
    write_text_file((dir / "distribution.json").string(), distribution_to_json(res.dist));
    save_checkpoint((dir / "rewind.ckpt").string(), res.rewound);
    save_checkpoint((dir / "final.ckpt").string(), res.final_model);

    std::string metrics = "step,objective,expected_density,lambda\n";
    for (const auto& r : res.trace.records)
      metrics += std::to_string(r.step) + "," + fmt(r.objective) + "," + fmt(r.expected_density) + "," +
                 fmt(r.lambda) + "\n";
    write_text_file((dir / "metrics.csv").string(), metrics);
    std::string hist = "step";
    for (int b = 0; b < 20; ++b) hist += ",bin" + std::to_string(b);
    hist += "\n";
    for (const auto& [step, counts] : res.trace.histograms) {
      hist += std::to_string(step);
      for (auto n : counts) hist += "," + std::to_string(n);
      hist += "\n";
    }
    write_text_file((dir / "histograms.csv").string(), hist);

    MetricsRecord r;
    r.method = std::string("cts:") + objective_tag(sc.objective);
    r.density = sc.kappa;
    r.seed = sc.train.seed;
    r.accuracy = res.eval.accuracy;
    r.test_loss = res.eval.loss;
    r.post_draw_loss = res.post_draw_loss;
    try {
      r.draw_objective = mask_objective(res.rewound, scoring_batch(data, c.train, c.baseline.score_batch_factor),
                                        res.ticket.mask, sc.objective);
    } catch (const Error&) {
      r.draw_objective = std::nan("");
    }
    fill_layers(r, res.ticket);
    write_results(dir, {r}, "results");
    summary_from(out, r);
    if (out) {
      out->final_expected_density =
          res.trace.records.empty() ? expected_density(res.dist) : res.trace.records.back().expected_density;
      out->overshoot_violations = res.trace.overshoot_violations;
    }
  });
}

cts_status cts_run_baseline(const cts_config* cfg, cts_run_summary* out) {
  return guarded([&] {
    need(cfg, "cfg");
    const ExperimentConfig c = experiment_config(cfg->map);
    const Dataset data = load_dataset(c.dataset);
    const fs::path dir = prepare_out(c, cfg->map);
    const BaselineResult res = run_baseline(c.baseline, c.arch, data);
    save_ticket((dir / "ticket.json").string(), res.ticket);
    save_checkpoint((dir / "rewind.ckpt").string(), res.rewound);
    save_checkpoint((dir / "final.ckpt").string(), res.final_model);
    MetricsRecord r;
    r.method = baseline_name(c.baseline.method);
    r.density = c.baseline.kappa;
    r.seed = c.train.seed;
    r.accuracy = res.eval.accuracy;
    r.test_loss = res.eval.loss;
    r.post_draw_loss = res.post_draw_loss;
    try {
      r.draw_objective = mask_objective(res.rewound, scoring_batch(data, c.train, c.baseline.score_batch_factor),
                                        res.ticket.mask, c.search.objective);
    } catch (const Error&) {
      r.draw_objective = std::nan("");
    }
    fill_layers(r, res.ticket);
    write_results(dir, {r}, "results");
    summary_from(out, r);
  });
}

cts_status cts_run_sweep(const cts_config* cfg, int verbose, int* failed_cells) {
  return guarded([&] {
    need(cfg, "cfg");
    const ExperimentConfig c = experiment_config(cfg->map);
    prepare_out(c, cfg->map);
    const SweepResult res = run_experiment(c, verbose ? &std::cerr : nullptr);
    if (failed_cells) *failed_cells = res.failed_cells;
  });
}

cts_status cts_run_sanity(const cts_config* cfg, const char* ticket_path, const char* checkpoint_path,
                          const char* distribution_path) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ticket_path, "ticket_path");
    need(checkpoint_path, "checkpoint_path");
    ExperimentConfig c = experiment_config(cfg->map);
    const Dataset data = load_dataset(c.dataset);
    const Ticket ticket = load_ticket(ticket_path);
    const ModelState start = load_checkpoint(checkpoint_path);
    std::optional<MaskDistribution> dist;
    if (distribution_path) {
      dist = distribution_from_json(read_text_file(distribution_path), ticket.layout);
    } else {
      std::erase(c.ablations, Ablation::kInvert);
    }
    const fs::path dir = prepare_out(c, cfg->map);
    const auto rows = run_sanity_suite(c, data, ticket, start, dist ? &*dist : nullptr, c.train.seed);
    write_results(dir, rows, "sanity");
  });
}

cts_status cts_run_oracle(const cts_config* cfg, cts_oracle_summary* out) {
  return guarded([&] {
    need(cfg, "cfg");
    ConfigMap map = cfg->map;
    // The default task is far too large to enumerate; without an explicit
    // dataset the oracle uses 2-D, 2-class blobs (tiny-mlp then has d = 12).
    if (!map.count("task.dataset")) map["task.dataset"] = kOracleDataset;
    const ExperimentConfig c = experiment_config(map);
    const Dataset data = load_dataset(c.dataset);
    ModelState m = build_model(c.arch, c.train.seed, data.sample_shape, data.num_classes);
    if (c.train.rewind_step > 0) m = train(m, data, c.train, std::nullopt, c.train.rewind_step);
    const std::size_t n = c.oracle_samples == 0 ? data.train_size() : std::min(c.oracle_samples, data.train_size());
    const OracleResult o = brute_force_oracle(m, data.train_prefix(n), c.oracle_kappa, c.oracle_objective);
    const fs::path dir = prepare_out(c, map);
    write_text_file((dir / "oracle_table.csv").string(), oracle_table_csv(o));
    save_ticket((dir / "oracle_ticket.json").string(), o.best);
    save_checkpoint((dir / "oracle_model.ckpt").string(), m);
    if (out) {
      out->masks = static_cast<int64_t>(o.table.size());
      out->best_value = o.best_value;
      out->worst_value = o.table.back().value;
    }
  });
}

cts_status cts_run_report(const char* const* csv_paths, size_t count, const char* out_path, char** table) {
  return guarded([&] {
    require(count > 0, ErrorCode::kInvalidArgument, "report needs at least one CSV");
    need(csv_paths, "csv_paths");
    need(out_path, "out_path");
    std::vector<MetricsRecord> rows;
    for (size_t i = 0; i < count; ++i) {
      need(csv_paths[i], "csv path");
      for (auto& r : parse_metrics_csv(read_text_file(csv_paths[i]))) rows.push_back(std::move(r));
    }
    const auto summary = summarize(rows);
    const fs::path parent = fs::path(out_path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    write_text_file(out_path, summary_csv(summary));
    if (table) *table = dup_string(summary_table(summary));
  });
}

}  // extern "C"
