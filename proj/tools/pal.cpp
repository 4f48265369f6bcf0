// pal: experiment runner, ablation tables, invariant verification and dumps.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pal/harness/verify.hpp"
#include "pal/synth/dataset_io.hpp"

namespace fs = std::filesystem;
using namespace pal;
using namespace pal::harness;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kConfigError = 2;

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  auto cfg = load_config(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  RunOptions opt;
  opt.log = log_line;
  const auto res = run_experiment(cfg, opt);
  std::cout << kReportHeader << '\n';
  for (const auto& r : res.rows) std::cout << row_csv(r) << '\n';
  log_line("wrote " + res.run_dir.string());
  return kOk;
}

int cmd_ablate(const std::string& dir, const std::string& out, const std::string& layout, const std::string& out_dir) {
  auto cfgs = load_config_dir(dir);
  if (!out_dir.empty())
    for (auto& c : cfgs) c.output_dir = out_dir;
  RunOptions opt;
  opt.log = log_line;
  const auto results = run_experiments(cfgs, experiment_threads(), opt);
  const auto table = build_table(results, layout == "table6" ? TableLayout::connector : TableLayout::design_grid);
  write_file(out, render_csv(table));
  fs::path txt = out;
  txt.replace_extension(".txt");
  const auto text = render_text(table);
  write_file(txt, text);
  std::cout << text;
  log_line("wrote " + out + " and " + txt.string());
  return kOk;
}

int cmd_verify(const std::vector<std::string>& faults, const std::string& run_dir, std::size_t samples,
               const std::string& out) {
  VerifyOptions opt;
  opt.perturbation_samples = samples;
  opt.run_dir = run_dir;
  for (const auto& f : faults) {
    if (f == "audio-into-ffn") opt.faults.route_audio_into_ffn = true;
    else if (f == "audio-to-system") opt.faults.expose_audio_to_system = true;
  }
  const auto rep = run_verify(opt);
  const auto text = rep.render();
  std::cout << text;
  if (!out.empty()) write_file(out, text);
  return rep.passed() ? kOk : kVerifyFailed;
}

int cmd_gradcheck() {
  bool ok = true;
  for (const auto& nm : miniature_modes()) {
    const auto r = model_gradcheck(nm.mode);
    ok = ok && r.passed();
    std::cout << (r.passed() ? "PASS " : "FAIL ") << nm.name << ": " << r.tensors.size() << " tensors, max rel err "
              << r.max_rel_error() << '\n';
    for (const auto& f : r.failing()) std::cout << "  failing " << f << '\n';
  }
  return ok ? kOk : kVerifyFailed;
}

int cmd_dump_config(const std::string& which, std::uint64_t seed, const std::string& out) {
  std::vector<std::string> names;
  if (which == "all") names = canonical_names();
  else names.push_back(which);
  for (const auto& n : names) {
    const auto text = serialize_config(canonical_config(n, seed));
    if (out.empty()) {
      std::cout << text;
    } else if (names.size() == 1 && fs::path(out).extension() == ".json") {
      write_file(out, text);
    } else {
      write_file(fs::path(out) / (n + ".json"), text);
    }
  }
  return kOk;
}

int cmd_dump_dataset(const std::string& task, std::size_t n, std::uint64_t seed, double difficulty,
                     const std::string& out) {
  std::vector<synth::TaskKind> tasks;
  if (task == "all") tasks = {synth::TaskKind::classify, synth::TaskKind::first_event, synth::TaskKind::count};
  else tasks.push_back(synth::parse_task(task));
  std::vector<synth::SyntheticSample> samples;
  for (auto t : tasks) {
    train::DataConfig data;
    data.eval_seed = seed;
    data.difficulty = difficulty;
    for (std::size_t i = 0; i < n; ++i) samples.push_back(train::eval_sample(data, t, i));
  }
  if (out.empty()) {
    for (const auto& s : samples) std::cout << synth::record_to_json(synth::to_record(s)).dump() << '\n';
  } else {
    synth::dump_dataset(out, samples);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Desk-scale audio-LLM fusion experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto* run = app.add_subcommand("run", "Run the three-stage curriculum for one config");
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--output-dir", out_dir, "Override the config's output directory");

  std::string configs_dir, out_csv, layout = "table1";
  auto* ablate = app.add_subcommand("ablate", "Run every config in a directory and emit the comparison table");
  ablate->add_option("--configs", configs_dir, "Directory of *.json configs")->required();
  ablate->add_option("--out", out_csv, "CSV output path (an aligned .txt is written alongside)")->required();
  ablate->add_option("--layout", layout, "table1: design-element grid; table6: shared vs separate connector")
      ->check(CLI::IsMember({"table1", "table6"}));
  ablate->add_option("--output-dir", out_dir, "Override every config's output directory");

  std::vector<std::string> faults;
  std::string run_dir, verify_out;
  std::size_t samples = 50;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_option("--inject-fault", faults, "Negative control: audio-into-ffn, audio-to-system")
      ->check(CLI::IsMember({"audio-into-ffn", "audio-to-system"}));
  verify->add_option("--run-dir", run_dir, "Spot-check this run's report against its checkpoint");
  verify->add_option("--samples", samples, "Perturbation samples per fusion mode")->check(CLI::PositiveNumber);
  verify->add_option("--out", verify_out, "Also write the report here");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of every fusion mode");

  std::string canonical;
  std::uint64_t seed = 1;
  std::string dump_out;
  auto* dump_config = app.add_subcommand("dump-config", "Print canonical configs");
  dump_config->add_option("--canonical", canonical, "Config name or 'all'")->required();
  dump_config->add_option("--seed", seed, "Seed written into the config");
  dump_config->add_option("--out", dump_out, "Output file (.json) or directory");

  std::string task = "all";
  std::size_t n = 10;
  std::uint64_t data_seed = train::DataConfig{}.eval_seed;
  double difficulty = 0.0;
  auto* dump_dataset = app.add_subcommand("dump-dataset", "Write held-out samples as newline-delimited JSON");
  dump_dataset->add_option("--task", task, "classify, first_event, count or all");
  dump_dataset->add_option("--n", n, "Samples per task");
  dump_dataset->add_option("--seed", data_seed, "Dataset seed");
  dump_dataset->add_option("--difficulty", difficulty, "Difficulty knob");
  dump_dataset->add_option("--out", dump_out, "Output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, out_dir);
    if (*ablate) return cmd_ablate(configs_dir, out_csv, layout, out_dir);
    if (*verify) return cmd_verify(faults, run_dir, samples, verify_out);
    if (*gradcheck) return cmd_gradcheck();
    if (*dump_config) return cmd_dump_config(canonical, seed, dump_out);
    if (*dump_dataset) return cmd_dump_dataset(task, n, data_seed, difficulty, dump_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kOk;
}
