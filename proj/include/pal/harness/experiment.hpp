#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pal/harness/checkpoint.hpp"
#include "pal/harness/config.hpp"
#include "pal/train/trainer.hpp"

namespace pal::harness {

namespace fs = std::filesystem;

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ParamReport {
  std::size_t llm = 0;
  std::size_t connector = 0;
  std::size_t connector_if_separate = 0;
  std::size_t connector_if_shared = 0;
  std::size_t injection_layers = 0;
  std::size_t total() const { return llm + connector; }
};

inline ParamReport param_report(const ExperimentConfig& c, model::PalModel& m) {
  ParamReport r;
  m.visit_llm([&](const std::string&, Tensor& t) { r.llm += t.size(); });
  m.visit_connectors([&](const std::string&, Tensor& t) { r.connector += t.size(); });
  r.injection_layers = c.fusion.connector_count(c.model.n_layers);
  auto cc = m.connector_cfg;
  cc.shared = false;
  r.connector_if_separate = connector::connector_param_count(cc, m.connectors.encoders, r.injection_layers).total;
  cc.shared = true;
  r.connector_if_shared = connector::connector_param_count(cc, m.connectors.encoders, r.injection_layers).total;
  return r;
}

// One (config, stage) row of an ablation table.
struct ReportRow {
  std::string config;
  std::size_t stage = 0;
  DesignElements elements;
  bool shared_connector = false;
  double acc_classify = 0.0, acc_first_event = 0.0, acc_count = 0.0;
  double loss = 0.0;  // mean training loss over the last 100 steps of the stage
  std::size_t params_total = 0, params_connector = 0;
  double wall_seconds = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  train::CurriculumReport curriculum;
  ParamReport params;
  std::vector<ReportRow> rows;
  fs::path run_dir;
};

inline double tail_mean(const std::vector<double>& v, std::size_t window) {
  if (v.empty()) return 0.0;
  const std::size_t n = std::min(window, v.size());
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

inline const char* kReportHeader =
    "config,stage,baseline,delayed_fusion,attn_only,multi_enc,shared_connector,acc_classify,acc_first_event,acc_count,"
    "loss,params_total,params_connector,wall_seconds";

inline std::string row_csv(const ReportRow& r) {
  std::ostringstream os;
  os << r.config << ',' << r.stage << ',' << r.elements.baseline << ',' << r.elements.delayed << ','
     << r.elements.attention_only << ',' << r.elements.multi_encoder << ',' << r.shared_connector << ','
     << format_double(r.acc_classify) << ',' << format_double(r.acc_first_event) << ','
     << format_double(r.acc_count) << ',' << format_double(r.loss) << ',' << r.params_total << ','
     << r.params_connector << ',' << format_double(r.wall_seconds);
  return os.str();
}

inline fs::path stage_checkpoint_path(const fs::path& run_dir, std::size_t stage) {
  return run_dir / ("stage" + std::to_string(stage) + ".ckpt");
}

struct RunOptions {
  bool write_files = true;
  model::ForwardProbe* probe = nullptr;
  std::function<void(const std::string&)> log;
};

// Runs the three-stage curriculum, writing under output_dir/name:
// config.json, metrics.csv (step,stage,lr,loss), stage<N>.ckpt, report.csv, params.json.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  validate(cfg);
  ExperimentResult res;
  res.config = cfg;
  res.run_dir = fs::path(cfg.output_dir) / cfg.name;
  std::ofstream metrics;
  if (opts.write_files) {
    std::error_code ec;
    fs::create_directories(res.run_dir, ec);
    metrics.open(res.run_dir / "metrics.csv", std::ios::trunc);
    if (ec || !metrics) throw std::runtime_error(res.run_dir.string() + ": output directory not writable");
    std::ofstream(res.run_dir / "config.json") << serialize_config(cfg);
    metrics << "step,stage,lr,loss\n";
  }
  const auto encoders = make_encoders(cfg);
  auto m = build_model(cfg, encoders);
  res.params = param_report(cfg, m);
  const std::uint64_t fp = shape_fingerprint(cfg);

  train::CurriculumHooks hooks;
  hooks.probe = opts.probe;
  hooks.on_step = [&](const train::StepMetrics& s) {
    if (opts.write_files) {
      metrics << s.step << ',' << s.stage << ',' << format_double(s.lr) << ',' << format_double(s.loss) << '\n';
    }
  };
  hooks.on_stage_end = [&](const train::StageReport& r, model::PalModel& mm) {
    if (opts.write_files) save_checkpoint(mm, fp, stage_checkpoint_path(res.run_dir, r.stage_id).string());
    if (opts.log) {
      std::ostringstream os;
      os << cfg.name << " stage " << r.stage_id << ": classify " << std::fixed << std::setprecision(3)
         << r.accuracy.at(synth::TaskKind::classify) << ", first_event " << r.accuracy.at(synth::TaskKind::first_event)
         << ", count " << r.accuracy.at(synth::TaskKind::count) << " (" << std::setprecision(1) << r.wall_seconds
         << " s)";
      opts.log(os.str());
    }
  };
  res.curriculum = train::run_curriculum(cfg.stages, m, encoders, cfg.data(), hooks);

  for (const auto& st : res.curriculum.stages) {
    ReportRow r;
    r.config = cfg.name;
    r.stage = st.stage_id;
    r.elements = design_elements(cfg);
    r.shared_connector = cfg.shared_connector();
    r.acc_classify = st.accuracy.at(synth::TaskKind::classify);
    r.acc_first_event = st.accuracy.at(synth::TaskKind::first_event);
    r.acc_count = st.accuracy.at(synth::TaskKind::count);
    r.loss = tail_mean(st.losses, 100);
    r.params_total = res.params.total();
    r.params_connector = res.params.connector;
    r.wall_seconds = st.wall_seconds;
    res.rows.push_back(r);
  }
  if (opts.write_files) {
    std::ofstream rep(res.run_dir / "report.csv");
    rep << kReportHeader << '\n';
    for (const auto& r : res.rows) rep << row_csv(r) << '\n';
    std::ofstream pj(res.run_dir / "params.json");
    pj << json{{"llm", res.params.llm},
               {"connector", res.params.connector},
               {"connector_if_separate", res.params.connector_if_separate},
               {"connector_if_shared", res.params.connector_if_shared},
               {"injection_layers", res.params.injection_layers},
               {"total", res.params.total()}}
              .dump(2)
       << '\n';
  }
  return res;
}

// Rebuilds the model from a stage checkpoint and re-measures held-out accuracy.
inline std::map<synth::TaskKind, double> reevaluate_checkpoint(const ExperimentConfig& cfg, const fs::path& ckpt) {
  const auto encoders = make_encoders(cfg);
  auto m = build_model(cfg, encoders);
  load_checkpoint(m, shape_fingerprint(cfg), ckpt.string());
  return train::evaluate_all(m, encoders, cfg.data());
}

// Keeps large tape buffers on the heap instead of round-tripping them through
// mmap/munmap on every step; a process-wide setting for executables to opt into.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Number of experiments to run concurrently, from PAL_THREADS (default 1).
inline std::size_t experiment_threads() {
  if (const char* v = std::getenv("PAL_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

// Runs independent experiments on up to `threads` workers; results keep input order.
inline std::vector<ExperimentResult> run_experiments(const std::vector<ExperimentConfig>& cfgs, std::size_t threads,
                                                     const RunOptions& opts = {}) {
  std::vector<ExperimentResult> out(cfgs.size());
  std::vector<std::exception_ptr> errors(cfgs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  RunOptions local = opts;
  if (opts.log) {
    local.log = [&](const std::string& s) {
      std::lock_guard<std::mutex> lock(log_mu);
      opts.log(s);
    };
  }
  local.probe = nullptr;
  auto worker = [&] {
    for (std::size_t i = next++; i < cfgs.size(); i = next++) {
      try {
        out[i] = run_experiment(cfgs[i], local);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, cfgs.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

enum class TableLayout { design_grid, connector };

struct AblationTable {
  TableLayout layout = TableLayout::design_grid;
  std::vector<ReportRow> rows;  // grouped by stage, config order preserved within a stage
  // best[i][c]: row i holds the best value of metric column c within its stage.
  std::vector<std::array<bool, 4>> best;
};

inline std::vector<std::string> metric_columns() { return {"classify", "first_event", "count", "loss"}; }

inline AblationTable build_table(const std::vector<ExperimentResult>& results,
                                 TableLayout layout = TableLayout::design_grid) {
  std::set<std::string> names;
  for (const auto& r : results)
    if (!names.insert(r.config.name).second) throw ConfigError("duplicate config name '" + r.config.name + "'");
  AblationTable t;
  t.layout = layout;
  std::size_t max_stage = 0;
  for (const auto& r : results)
    for (const auto& row : r.rows) max_stage = std::max(max_stage, row.stage);
  for (std::size_t s = 1; s <= max_stage; ++s)
    for (const auto& r : results)
      for (const auto& row : r.rows)
        if (row.stage == s) t.rows.push_back(row);
  auto metric = [](const ReportRow& r, std::size_t c) {
    switch (c) {
      case 0: return r.acc_classify;
      case 1: return r.acc_first_event;
      case 2: return r.acc_count;
      default: return -r.loss;  // lower loss is better
    }
  };
  t.best.assign(t.rows.size(), {false, false, false, false});
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      double best = -1e300;
      for (const auto& o : t.rows)
        if (o.stage == t.rows[i].stage) best = std::max(best, metric(o, c));
      t.best[i][c] = metric(t.rows[i], c) == best;
    }
  return t;
}

inline std::string render_csv(const AblationTable& t) {
  std::ostringstream os;
  os << kReportHeader << ",best_classify,best_first_event,best_count,best_loss\n";
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    os << row_csv(t.rows[i]);
    for (bool b : t.best[i]) os << ',' << (b ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

// Aligned text rendering; '*' marks the best value per column within a stage.
inline std::string render_text(const AblationTable& t) {
  std::ostringstream os;
  auto mark = [](bool on) { return on ? "✓" : "✗"; };
  auto cell = [](double v, bool best, bool pct) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(pct ? 2 : 4) << (pct ? 100.0 * v : v) << (best ? "*" : " ");
    return c.str();
  };
  std::size_t name_w = 6;
  for (const auto& r : t.rows) name_w = std::max(name_w, r.config.size());
  if (t.layout == TableLayout::design_grid) {
    os << "Stage  " << std::left << std::setw(static_cast<int>(name_w)) << "Config"
       << "  Base  Delay  Attn  Multi   Classify  FirstEvent     Count      Loss\n";
  } else {
    os << "Stage  " << std::left << std::setw(static_cast<int>(name_w)) << "Config"
       << "  Connector   Classify  FirstEvent     Count      Loss\n";
  }
  std::size_t prev = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    if (i > 0 && r.stage != prev) os << '\n';
    prev = r.stage;
    os << std::left << std::setw(7) << r.stage << std::setw(static_cast<int>(name_w)) << r.config << "  ";
    if (t.layout == TableLayout::design_grid) {
      os << "  " << mark(r.elements.baseline) << "     " << mark(r.elements.delayed) << "     "
         << mark(r.elements.attention_only) << "     " << mark(r.elements.multi_encoder) << "  ";
    } else {
      os << std::setw(10) << (r.shared_connector ? "Shared" : "Separate");
    }
    os << std::right << std::setw(11) << cell(r.acc_classify, t.best[i][0], true) << std::setw(12)
       << cell(r.acc_first_event, t.best[i][1], true) << std::setw(10) << cell(r.acc_count, t.best[i][2], true)
       << std::setw(10) << cell(r.loss, t.best[i][3], false) << '\n';
  }
  return os.str();
}

// Loads every *.json in a directory (sorted by file name).
inline std::vector<ExperimentConfig> load_config_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError(dir.string() + ": no *.json configs");
  std::vector<ExperimentConfig> cfgs;
  std::set<std::string> names;
  for (const auto& f : files) {
    cfgs.push_back(load_config(f.string()));
    if (!names.insert(cfgs.back().name).second) {
      throw ConfigError(f.string() + ": duplicate config name '" + cfgs.back().name + "'");
    }
  }
  return cfgs;
}

}  // namespace pal::harness
