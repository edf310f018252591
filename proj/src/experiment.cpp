#include "cts/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <zlib.h>

#include "cts/error.hpp"

namespace cts {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && p == s.data() + s.size(), ErrorCode::kParse, "bad number '", s, "' in CSV");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(line);
  while (std::getline(in, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ':' || c == '/' || c == ' ') c = '-';
  return s;
}

std::string crc_hex(const std::string& text) {
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", crc);
  return buf;
}

struct MethodSpec {
  std::string family;  // cts | cts-init | ltr | a baseline name
  std::optional<ObjectiveKind> objective;
};

MethodSpec parse_method(const std::string& text) {
  MethodSpec m;
  const auto colon = text.find(':');
  m.family = text.substr(0, colon);
  if (colon != std::string::npos) m.objective = parse_objective(text.substr(colon + 1));
  if (m.family == "cts" || m.family == "cts-init" || m.family == "ltr") {
    require(!m.objective || m.family != "ltr", ErrorCode::kInvalidArgument, "ltr takes no objective");
    return m;
  }
  parse_baseline(m.family);  // validates
  require(!m.objective, ErrorCode::kInvalidArgument, "method '", text, "' takes no objective suffix");
  return m;
}

void fill_ticket(MetricsRecord& r, const Ticket& t) {
  r.retained = t.retained();
  r.d = t.size();
  r.achieved_density = t.density;
  const auto dens = layer_densities(t);
  r.layers.clear();
  for (std::size_t l = 0; l < t.layout.size(); ++l) {
    const auto& s = t.layout[l];
    std::int64_t kept = 0;
    for (std::int64_t j = s.offset; j < s.offset + s.count; ++j) kept += t.mask[j];
    r.layers.push_back({s.name, s.count, kept, dens[l]});
  }
}

double draw_objective(const ExperimentConfig& cfg, const Dataset& data, const ModelState& start,
                      const Ticket& t, ObjectiveKind kind) {
  try {
    return mask_objective(start, scoring_batch(data, cfg.train, cfg.baseline.score_batch_factor), t.mask,
                          kind);
  } catch (const Error&) {
    return std::nan("");
  }
}

SearchConfig search_config_for(const ExperimentConfig& cfg, const Dataset& data, const MethodSpec& m,
                               double kappa, std::uint64_t seed) {
  SearchConfig sc = cfg.search;
  sc.train = cfg.train;
  sc.kappa = kappa;
  sc.train.seed = seed;
  sc.search_seed = seed;
  if (m.family == "cts-init") sc.train.rewind_step = 0;
  if (m.objective) sc.objective = *m.objective;
  if (cfg.search_epochs) sc.search_steps = search_steps_for_epochs(data, sc.train.batch_size, *cfg.search_epochs);
  return sc;
}

MetricsRecord base_record(const CellSpec& cell, const std::string& method) {
  MetricsRecord r;
  r.method = method;
  r.density = cell.density;
  r.seed = cell.seed;
  return r;
}

void save_row_ticket(const std::string& dir, const MetricsRecord& r, const Ticket& t) {
  if (dir.empty()) return;
  CellSpec c{r.method, r.density, r.seed};
  save_ticket((fs::path(dir) / (c.id() + ".json")).string(), t);
}

// Retrain `ticket` from `start` and fill in the record.
MetricsRecord retrain_row(const ExperimentConfig& cfg, const Dataset& data, const TrainConfig& train_cfg,
                          const ModelState& start, const Ticket& ticket, ObjectiveKind kind,
                          MetricsRecord r) {
  r.post_draw_loss = evaluate_ticket(start, ticket, data).loss;
  r.draw_objective = draw_objective(cfg, data, start, ticket, kind);
  const ModelState fin = train(start, data, train_cfg, ticket.mask);
  const EvalResult ev = evaluate(fin, data);
  r.accuracy = ev.accuracy;
  r.test_loss = ev.loss;
  fill_ticket(r, ticket);
  return r;
}

std::uint64_t reinit_seed(std::uint64_t seed) { return derive_seed(seed, Stream::kInit, 1); }

// Ablation rows paired with a CTS result.
void append_ablations(const ExperimentConfig& cfg, const Dataset& data, const CtsResult& res,
                      const SearchConfig& sc, const std::string& base, const CellSpec& cell,
                      std::vector<Ablation> which, const std::string& ticket_dir,
                      std::vector<MetricsRecord>& out) {
  const TrainConfig retrain = quick_schedule(sc.train, sc.quick_factor);
  for (Ablation a : which) {
    Ticket t;
    ModelState start = res.rewound;
    if (a == Ablation::kShuffleLayerwise) {
      t = shuffle_layerwise(res.ticket, cell.seed);
    } else if (a == Ablation::kInvert) {
      t = invert_ticket(&res.dist, sc.kappa);
      t.arch = res.ticket.arch;
      t.method = res.ticket.method + "+invert";
    } else {
      t = res.ticket;
      t.method += "+reinit";
      start = reinit_model(res.rewound, reinit_seed(cell.seed));
      start.step = res.rewound.step;
    }
    MetricsRecord r = base_record(cell, base + "+" + ablation_name(a));
    r.base = base;
    auto t0 = std::chrono::steady_clock::now();
    r = retrain_row(cfg, data, retrain, start, t, sc.objective, std::move(r));
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_row_ticket(ticket_dir, r, t);
    out.push_back(std::move(r));
  }
}

MetricsRecord cts_record(const ExperimentConfig& cfg, const Dataset& data, const CellSpec& cell,
                         const std::string& method, const SearchConfig& sc, const CtsResult& res) {
  MetricsRecord r = base_record(cell, method);
  r.accuracy = res.eval.accuracy;
  r.test_loss = res.eval.loss;
  r.post_draw_loss = res.post_draw_loss;
  r.draw_objective = draw_objective(cfg, data, res.rewound, res.ticket, sc.objective);
  fill_ticket(r, res.ticket);
  return r;
}

std::vector<MetricsRecord> run_cts_cell(const ExperimentConfig& cfg, const Dataset& data, const CellSpec& cell,
                                        const MethodSpec& m, const std::string& ticket_dir) {
  std::vector<MetricsRecord> out;
  auto t0 = std::chrono::steady_clock::now();
  const SearchConfig sc = search_config_for(cfg, data, m, cell.density, cell.seed);
  const CtsResult res = run_cts(sc, cfg.arch, data);
  out.push_back(cts_record(cfg, data, cell, cell.method, sc, res));
  out.back().wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_row_ticket(ticket_dir, out.back(), res.ticket);
  if (cfg.mode != SweepMode::kSanity) return out;

  std::vector<Ablation> here, reinit;
  for (Ablation a : cfg.ablations) (a == Ablation::kReinit ? reinit : here).push_back(a);
  append_ablations(cfg, data, res, sc, cell.method, cell, here, ticket_dir, out);
  if (reinit.empty()) return out;
  if (sc.train.rewind_step == 0) {
    append_ablations(cfg, data, res, sc, cell.method, cell, reinit, ticket_dir, out);
    return out;
  }
  // Reinitialisation is compared at initialisation (k = 0).
  MethodSpec init = m;
  init.family = "cts-init";
  std::string init_name = "cts-init";
  if (m.objective) init_name += std::string(":") + objective_tag(*m.objective);
  auto t1 = std::chrono::steady_clock::now();
  const SearchConfig sc0 = search_config_for(cfg, data, init, cell.density, cell.seed);
  const CtsResult res0 = run_cts(sc0, cfg.arch, data);
  out.push_back(cts_record(cfg, data, cell, init_name, sc0, res0));
  out.back().base = cell.method;
  out.back().wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  save_row_ticket(ticket_dir, out.back(), res0.ticket);
  append_ablations(cfg, data, res0, sc0, init_name, cell, reinit, ticket_dir, out);
  return out;
}

std::vector<MetricsRecord> run_ltr_cell(const ExperimentConfig& cfg, const Dataset& data, const CellSpec& cell,
                                        const std::string& ticket_dir) {
  auto t0 = std::chrono::steady_clock::now();
  LtrConfig lc = cfg.ltr;
  lc.train = cfg.train;
  lc.train.seed = cell.seed;
  lc.rounds = std::max(1, static_cast<int>(std::lround(std::log(cell.density) / std::log1p(-lc.prune_fraction))));
  const LtrResult res = run_ltr(lc, cfg.arch, data);
  const LtrRound& last = res.rounds.back();
  MetricsRecord r = base_record(cell, cell.method);
  r.accuracy = last.eval.accuracy;
  r.test_loss = last.eval.loss;
  r.post_draw_loss = evaluate_ticket(res.rewound, last.ticket, data).loss;
  r.draw_objective = draw_objective(cfg, data, res.rewound, last.ticket, cfg.search.objective);
  fill_ticket(r, last.ticket);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_row_ticket(ticket_dir, r, last.ticket);
  return {r};
}

std::vector<MetricsRecord> run_baseline_cell(const ExperimentConfig& cfg, const Dataset& data,
                                             const CellSpec& cell, const MethodSpec& m,
                                             const std::string& ticket_dir) {
  auto t0 = std::chrono::steady_clock::now();
  BaselineConfig bc = cfg.baseline;
  bc.method = parse_baseline(m.family);
  bc.kappa = cell.density;
  bc.train = cfg.train;
  bc.train.seed = cell.seed;
  bc.prune_seed = cell.seed;
  bc.quick_factor = cfg.search.quick_factor;
  const BaselineResult res = run_baseline(bc, cfg.arch, data);
  MetricsRecord r = base_record(cell, cell.method);
  r.accuracy = res.eval.accuracy;
  r.test_loss = res.eval.loss;
  r.post_draw_loss = res.post_draw_loss;
  r.draw_objective = draw_objective(cfg, data, res.rewound, res.ticket, cfg.search.objective);
  fill_ticket(r, res.ticket);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_row_ticket(ticket_dir, r, res.ticket);
  return {r};
}

}  // namespace

// ---- CSV -----------------------------------------------------------------------------

std::string metrics_csv_header() {
  return "schema=1,method,base,density,sparsity,seed,status,accuracy,test_loss,post_draw_loss,"
         "draw_objective,achieved_density,retained,d";
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string s = std::to_string(kCsvSchema) + "," + r.method + "," + r.base + "," + num(r.density) + "," +
                  num(r.sparsity()) + "," + std::to_string(r.seed) + "," + r.status;
  if (r.status != "ok") return s + ",,,,,,,";
  return s + "," + num(r.accuracy) + "," + num(r.test_loss) + "," + num(r.post_draw_loss) + "," +
         num(r.draw_objective) + "," + num(r.achieved_density) + "," + std::to_string(r.retained) + "," +
         std::to_string(r.d);
}

std::string layers_csv_header() { return "schema=1,method,density,seed,layer,count,retained,layer_density"; }

std::vector<std::string> layers_csv_rows(const MetricsRecord& r) {
  std::vector<std::string> out;
  for (const auto& l : r.layers)
    out.push_back(std::to_string(kCsvSchema) + "," + r.method + "," + num(r.density) + "," +
                  std::to_string(r.seed) + "," + l.layer + "," + std::to_string(l.count) + "," +
                  std::to_string(l.retained) + "," + num(l.density));
  return out;
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::kParse, "empty metrics CSV");
  require(line == metrics_csv_header(), ErrorCode::kParse, "unexpected metrics CSV header: ", line);
  std::vector<MetricsRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 14, ErrorCode::kParse, "metrics CSV line ", lineno, ": expected 14 fields, got ",
            f.size());
    require(f[0] == std::to_string(kCsvSchema), ErrorCode::kParse, "metrics CSV line ", lineno,
            ": unsupported schema ", f[0]);
    MetricsRecord r;
    r.method = f[1];
    r.base = f[2];
    r.density = parse_double(f[3]);
    r.seed = std::stoull(f[5]);
    r.status = f[6];
    if (r.status == "ok") {
      r.accuracy = parse_double(f[7]);
      r.test_loss = parse_double(f[8]);
      r.post_draw_loss = parse_double(f[9]);
      r.draw_objective = parse_double(f[10]);
      r.achieved_density = parse_double(f[11]);
      r.retained = std::stoll(f[12]);
      r.d = std::stoll(f[13]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- cells -----------------------------------------------------------------------------

std::string CellSpec::id() const {
  char buf[48];
  std::snprintf(buf, sizeof buf, "_d%.6g_s%llu", density, static_cast<unsigned long long>(seed));
  return sanitize(method) + buf;
}

std::vector<CellSpec> plan_cells(const ExperimentConfig& cfg) {
  std::vector<CellSpec> cells;
  for (const auto& m : cfg.methods) {
    parse_method(m);
    if (cfg.mode == SweepMode::kSanity)
      require(m.rfind("cts", 0) == 0, ErrorCode::kInvalidArgument, "sanity mode needs cts methods, got '", m,
              "'");
    for (double k : cfg.densities)
      for (int r = 0; r < cfg.repeats; ++r) cells.push_back({m, k, cfg.seed + static_cast<std::uint64_t>(r)});
  }
  return cells;
}

std::vector<MetricsRecord> run_cell(const ExperimentConfig& cfg, const Dataset& data, const CellSpec& cell,
                                    const std::string& ticket_dir) {
  const MethodSpec m = parse_method(cell.method);
  if (m.family == "cts" || m.family == "cts-init") return run_cts_cell(cfg, data, cell, m, ticket_dir);
  require(cfg.mode == SweepMode::kGrid, ErrorCode::kInvalidArgument, "sanity mode needs cts methods");
  if (m.family == "ltr") return run_ltr_cell(cfg, data, cell, ticket_dir);
  return run_baseline_cell(cfg, data, cell, m, ticket_dir);
}

namespace {

struct CellOutput {
  std::vector<std::string> rows;
  std::vector<std::string> layer_rows;
  std::vector<MetricsRecord> records;
  double seconds = 0.0;
  bool failed = false;
  bool resumed = false;
};

std::string cell_body(const CellOutput& c) {
  std::string body;
  for (const auto& r : c.rows) body += "row," + r + "\n";
  for (const auto& r : c.layer_rows) body += "layer," + r + "\n";
  return body;
}

// Reads a finished cell; nullopt if missing or its checksum does not match.
std::optional<CellOutput> read_cell(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  const std::string text = read_text_file(path.string());
  const auto tail = text.rfind("crc32,");
  if (tail == std::string::npos || (tail != 0 && text[tail - 1] != '\n')) return std::nullopt;
  const std::string body = text.substr(0, tail);
  std::string stored = text.substr(tail + 6);
  while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
  if (stored != crc_hex(body)) return std::nullopt;
  CellOutput c;
  c.resumed = true;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("row,", 0) == 0) c.rows.push_back(line.substr(4));
    else if (line.rfind("layer,", 0) == 0) c.layer_rows.push_back(line.substr(6));
    else return std::nullopt;
  }
  if (c.rows.empty()) return std::nullopt;
  std::string csv = metrics_csv_header() + "\n";
  for (const auto& r : c.rows) csv += r + "\n";
  try {
    c.records = parse_metrics_csv(csv);
  } catch (const Error&) {
    return std::nullopt;
  }
  return c;
}

void write_cell(const fs::path& path, const CellOutput& c) {
  const std::string body = cell_body(c);
  const fs::path tmp = path.string() + ".tmp";
  write_text_file(tmp.string(), body + "crc32," + crc_hex(body) + "\n");
  fs::rename(tmp, path);
}

}  // namespace

SweepResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto cells = plan_cells(cfg);
  const fs::path root(cfg.out);
  fs::create_directories(root / "cells");
  const std::string ticket_dir = cfg.write_tickets ? (root / "tickets").string() : std::string();
  if (!ticket_dir.empty()) fs::create_directories(ticket_dir);

  std::optional<Dataset> data;
  if (!cells.empty()) data = load_dataset(cfg.dataset);

  std::vector<CellOutput> outputs(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const CellSpec& cell = cells[i];
      const fs::path path = root / "cells" / (cell.id() + ".txt");
      CellOutput& c = outputs[i];
      std::string note;
      if (auto done = read_cell(path)) {
        c = std::move(*done);
        note = "resumed";
      } else {
        auto t0 = std::chrono::steady_clock::now();
        try {
          c.records = run_cell(cfg, *data, cell, ticket_dir);
          for (const auto& r : c.records) {
            c.rows.push_back(metrics_csv_row(r));
            for (auto& l : layers_csv_rows(r)) c.layer_rows.push_back(std::move(l));
          }
          write_cell(path, c);
          note = "ok";
        } catch (const std::exception& e) {
          MetricsRecord r = base_record(cell, cell.method);
          const auto* err = dynamic_cast<const Error*>(&e);
          r.status = err ? error_code_name(err->code()) : "internal";
          c.records = {r};
          c.rows = {metrics_csv_row(r)};
          c.failed = true;
          note = std::string("FAILED: ") + e.what();
        }
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      if (log) {
        std::lock_guard<std::mutex> lock(log_mu);
        char buf[32];
        std::snprintf(buf, sizeof buf, " (%.1fs)", c.seconds);
        *log << "[" << (i + 1) << "/" << cells.size() << "] " << cell.id() << " " << note
             << (c.resumed ? "" : buf) << "\n";
        log->flush();
      }
    }
  };
  const int width = std::min<int>(cfg.workers, std::max<std::size_t>(cells.size(), 1));
  std::vector<std::thread> pool;
  for (int w = 1; w < width; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SweepResult result;
  std::string results = metrics_csv_header() + "\n";
  std::string layers = layers_csv_header() + "\n";
  std::string timing = "cell,status,wall_seconds\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const CellOutput& c = outputs[i];
    for (const auto& r : c.rows) results += r + "\n";
    for (const auto& r : c.layer_rows) layers += r + "\n";
    if (!c.resumed)
      timing += cells[i].id() + "," + (c.failed ? "failed" : "ok") + "," + num(c.seconds) + "\n";
    result.failed_cells += c.failed;
    result.resumed_cells += c.resumed;
    for (const auto& r : c.records) result.records.push_back(r);
  }
  write_text_file((root / "results.csv").string(), results);
  write_text_file((root / "layers.csv").string(), layers);
  write_text_file((root / "timing.csv").string(), timing);
  return result;
}

std::vector<MetricsRecord> run_sanity_suite(const ExperimentConfig& cfg, const Dataset& data,
                                            const Ticket& ticket, const ModelState& start,
                                            const MaskDistribution* dist, std::uint64_t seed) {
  require(ticket.size() == start.mask_size(), ErrorCode::kShapeMismatch, "ticket has d = ", ticket.size(),
          ", checkpoint has d = ", start.mask_size());
  TrainConfig tc = quick_schedule(cfg.train, cfg.search.quick_factor);
  tc.seed = seed;
  require(start.step < tc.steps, ErrorCode::kInvalidArgument, "checkpoint step ", start.step,
          " is not before the final step ", tc.steps);
  const CellSpec cell{ticket.method.empty() ? "ticket" : ticket.method, ticket.density, seed};
  const std::string base = cell.method;
  std::vector<MetricsRecord> out;
  out.push_back(retrain_row(cfg, data, tc, start, ticket, cfg.search.objective, base_record(cell, base)));
  for (Ablation a : cfg.ablations) {
    Ticket t = ticket;
    ModelState from = start;
    if (a == Ablation::kShuffleLayerwise) {
      t = shuffle_layerwise(ticket, seed);
    } else if (a == Ablation::kInvert) {
      t = invert_ticket(dist, ticket.density);
    } else {
      from = reinit_model(start, reinit_seed(seed));
      from.step = start.step;
    }
    MetricsRecord r = base_record(cell, base + "+" + ablation_name(a));
    r.base = base;
    out.push_back(retrain_row(cfg, data, tc, from, t, cfg.search.objective, std::move(r)));
  }
  return out;
}

// ---- report -------------------------------------------------------------------------------

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  if (values.empty()) return m;
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return m;
}

std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records) {
  std::map<std::pair<std::string, double>, std::vector<const MetricsRecord*>> groups;
  for (const auto& r : records)
    if (r.status == "ok") groups[{r.method, -r.density}].push_back(&r);
  std::vector<SummaryRow> out;
  for (const auto& [key, rows] : groups) {
    SummaryRow s;
    s.method = key.first;
    s.density = -key.second;
    s.n = rows.size();
    std::vector<double> acc, loss, post, obj;
    for (const auto* r : rows) {
      acc.push_back(r->accuracy);
      loss.push_back(r->test_loss);
      post.push_back(r->post_draw_loss);
      obj.push_back(r->draw_objective);
    }
    s.accuracy = mean_std(acc);
    s.test_loss = mean_std(loss);
    s.post_draw_loss = mean_std(post);
    s.draw_objective = mean_std(obj);
    out.push_back(std::move(s));
  }
  return out;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out =
      "schema=1,method,density,sparsity,n,accuracy_mean,accuracy_std,test_loss_mean,test_loss_std,"
      "post_draw_loss_mean,post_draw_loss_std,draw_objective_mean,draw_objective_std\n";
  for (const auto& s : rows)
    out += std::to_string(kCsvSchema) + "," + s.method + "," + num(s.density) + "," + num(1.0 - s.density) +
           "," + std::to_string(s.n) + "," + num(s.accuracy.mean) + "," + num(s.accuracy.std) + "," +
           num(s.test_loss.mean) + "," + num(s.test_loss.std) + "," + num(s.post_draw_loss.mean) + "," +
           num(s.post_draw_loss.std) + "," + num(s.draw_objective.mean) + "," + num(s.draw_objective.std) +
           "\n";
  return out;
}

std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::string out = "method                density    n   accuracy (%)        post-draw loss\n";
  char buf[160];
  for (const auto& s : rows) {
    std::snprintf(buf, sizeof buf, "%-20s  %-9.4g  %-3zu %6.2f +- %-6.2f     %.4f +- %.4f\n", s.method.c_str(),
                  s.density, s.n, 100.0 * s.accuracy.mean, 100.0 * s.accuracy.std, s.post_draw_loss.mean,
                  s.post_draw_loss.std);
    out += buf;
  }
  return out;
}

// ---- distribution files ---------------------------------------------------------------------

std::string distribution_to_json(const MaskDistribution& dist) {
  nlohmann::ordered_json j;
  j["format"] = "cts-distribution";
  j["version"] = 1;
  j["tau"] = dist.tau;
  j["d"] = dist.size();
  j["logits"] = dist.logits;
  return j.dump(1) + "\n";
}

MaskDistribution distribution_from_json(const std::string& text, const LayerLayout& layout) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, "distribution file: ", e.what());
  }
  try {
    require(j.at("format") == "cts-distribution", ErrorCode::kParse, "not a cts-distribution file");
    require(j.at("version") == 1, ErrorCode::kParse, "unsupported distribution version");
    MaskDistribution d;
    d.tau = j.at("tau").get<double>();
    d.logits = j.at("logits").get<std::vector<double>>();
    d.layout = layout;
    require(j.at("d").get<std::size_t>() == d.logits.size(), ErrorCode::kParse,
            "distribution d does not match its logits");
    std::int64_t total = 0;
    for (const auto& s : layout) total += s.count;
    require(total == static_cast<std::int64_t>(d.logits.size()), ErrorCode::kShapeMismatch,
            "distribution has ", d.logits.size(), " logits, layout covers ", total);
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, "distribution file: ", e.what());
  }
}

Batch scoring_batch(const Dataset& data, const TrainConfig& train, std::size_t factor) {
  return data.train_prefix(std::min(data.train_size(), factor * train.batch_size));
}

}  // namespace cts
