#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pal/harness/checkpoint.hpp"
#include "pal/harness/config.hpp"
#include "pal/harness/experiment.hpp"
#include "pal/tensor/gradcheck.hpp"

namespace pal::harness {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> f;
    for (const auto& c : checks)
      if (!c.passed) f.push_back(c.name);
    return f;
  }
  std::string render() const {
    std::ostringstream os;
    for (const auto& c : checks) {
      os << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << std::fixed << std::setprecision(2) << c.seconds
         << " s)";
      if (!c.detail.empty()) os << ": " << c.detail;
      os << '\n';
    }
    os << (passed() ? "all checks passed" : std::to_string(failing().size()) + " check(s) failed") << '\n';
    return os.str();
  }
};

struct VerifyOptions {
  model::FaultInjection faults{};
  std::size_t perturbation_samples = 50;
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path() / "pal_verify";
  std::filesystem::path run_dir;  // optional: spot-check this run's report against its checkpoint
};

// ----- miniature fixtures --------------------------------------------------

inline model::ModelConfig miniature_model_config() {
  model::ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_hidden = 16;
  return c;
}

inline connector::ConnectorConfig miniature_connector_config() {
  connector::ConnectorConfig c;
  c.latent_t = 2;
  c.latent_f = 1;
  c.latent_dim = 4;
  c.n_heads = 2;
  return c;
}

struct NamedMode {
  std::string name;
  model::FusionMode mode;
};

// Every wiring and both connector variants on a 2-layer model.
inline std::vector<NamedMode> miniature_modes() {
  using model::FusionMode;
  return {{"baseline", FusionMode::baseline()},
          {"delayed", FusionMode::delayed(2)},
          {"attention_only_separate", FusionMode::attention_only(1, false)},
          {"attention_only_shared", FusionMode::attention_only(1, true)}};
}

// End-to-end finite-difference check of every model parameter on a d=8,
// 2-layer, 2-latent miniature with a two-encoder ensemble.
inline GradcheckReport model_gradcheck(const model::FusionMode& mode) {
  std::vector<synth::EncoderProfile> enc{synth::make_profile("tiny_fine", 4, 2, 3, 5),
                                         synth::make_profile("tiny_global", 2, 1, 2, 6)};
  auto s1 = synth::generate_sample(1, synth::TaskKind::classify);
  auto s2 = synth::generate_sample(2, synth::TaskKind::first_event);
  auto a1 = synth::encode_all(enc, s1.grid), a2 = synth::encode_all(enc, s2.grid);
  const std::vector<model::ModelInput> batch{model::input_from_sample(s1, &a1), model::input_from_sample(s2, &a2)};
  const synth::SyntheticSample* ptrs[] = {&s1, &s2};
  const auto tgt = train::next_token_targets(ptrs);
  auto m = model::make_model(miniature_model_config(), mode, miniature_connector_config(),
                             connector::geometries_of(enc), 4);
  std::vector<NamedTensor> params;
  m.visit([&](const std::string& n, Tensor& t) { params.push_back({n, &t}); });
  return gradcheck(
      [&](Tape& t) { return train::masked_next_token_loss(model::forward_batch(t, m, batch).logits, tgt.targets, tgt.mask); },
      params);
}

namespace detail {

struct SmallWorld {
  std::vector<synth::EncoderProfile> encoders = synth::make_default_ensemble(7);
  std::vector<synth::SyntheticSample> samples;
  std::vector<std::vector<synth::EncoderOutput>> audio;

  SmallWorld(std::size_t n, std::uint64_t seed) {
    for (std::size_t i = 0; i < n; ++i) {
      samples.push_back(synth::generate_sample(mix_seed(seed, i), static_cast<synth::TaskKind>(i % 3)));
      audio.push_back(synth::encode_all(encoders, samples.back().grid));
    }
  }
  model::PalModel model(const model::FusionMode& mode, const model::ModelConfig& cfg = small_config()) const {
    return model::make_model(cfg, mode, connector::ConnectorConfig{}, connector::geometries_of(encoders), 11);
  }
  static model::ModelConfig small_config() {
    model::ModelConfig c;
    c.d_model = 16;
    c.n_layers = 4;
    c.n_heads = 2;
    c.ffn_hidden = 32;
    return c;
  }
};

inline double row_diff(const Tensor& a, const Tensor& b, std::size_t r0, std::size_t r1) {
  double m = 0.0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.at(r, c) - b.at(r, c)));
  return m;
}

inline CheckResult timed(const std::string& name, const std::function<std::string(bool&)>& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    bool ok = true;
    r.detail = body(ok);
    r.passed = ok;
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

// ----- individual checks ----------------------------------------------------

inline std::vector<CheckResult> check_gradients() {
  std::vector<CheckResult> out;
  for (const auto& nm : miniature_modes()) {
    out.push_back(detail::timed("gradcheck/" + nm.name, [&](bool& ok) {
      auto r = model_gradcheck(nm.mode);
      ok = r.passed();
      std::ostringstream os;
      os << r.tensors.size() << " tensors, max rel err " << std::scientific << std::setprecision(2)
         << r.max_rel_error();
      for (const auto& f : r.failing()) os << "; failing " << f;
      return os.str();
    }));
  }
  return out;
}

// Token-order causality and the audio visibility boundary, by perturbation.
inline CheckResult check_causality(const VerifyOptions& opt) {
  return detail::timed("causality_mask", [&](bool& ok) {
    detail::SmallWorld w(opt.perturbation_samples, 77);
    std::size_t token_viol = 0, sys_viol = 0, blind = 0, checked = 0;
    const model::ForwardOptions fo{nullptr, opt.faults};
    for (const auto& mode : {model::FusionMode::baseline(), model::FusionMode::delayed(3),
                             model::FusionMode::attention_only(3), model::FusionMode::attention_only(3, true)}) {
      auto m = w.model(mode);
      SplitMix64 rng(mix_seed(99, static_cast<std::uint64_t>(mode.kind), mode.shared));
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        auto in = model::input_from_sample(w.samples[i], &w.audio[i]);
        const Tensor base = model::forward(m, in, fo);
        // Later token changes never reach earlier logits.
        const std::size_t p = rng.below(in.tokens.size() - 1);
        auto pert = in;
        const std::size_t q = p + 1 + rng.below(in.tokens.size() - p - 1);
        pert.tokens[q] = static_cast<int>((pert.tokens[q] + 1 + rng.below(63)) % 64);
        if (detail::row_diff(base, model::forward(m, pert, fo), 0, p + 1) != 0.0) ++token_viol;
        // Audio changes reach user/response positions only.
        auto noisy = w.audio[i];
        for (auto& o : noisy)
          for (double& v : o.tokens.data()) v += rng.normal(0.0, 1.0);
        in.audio = &noisy;
        const Tensor y = model::forward(m, in, fo);
        if (detail::row_diff(base, y, 0, in.system_len) != 0.0) ++sys_viol;
        for (std::size_t r = in.system_len; r < y.rows(); ++r) blind += detail::row_diff(base, y, r, r + 1) == 0.0;
        ++checked;
      }
    }
    ok = token_viol == 0 && sys_viol == 0 && blind == 0;
    return std::to_string(checked) + " perturbations; token-order violations " + std::to_string(token_viol) +
           ", system rows reached by audio " + std::to_string(sys_viol) + ", audio-blind user/response rows " +
           std::to_string(blind);
  });
}

inline CheckResult check_ffn_exclusion(const VerifyOptions& opt) {
  return detail::timed("ffn_audio_exclusion", [&](bool& ok) {
    detail::SmallWorld w(16, 5);
    std::size_t audio_rows = 0, ffn_calls = 0;
    for (bool shared : {false, true}) {
      auto m = w.model(model::FusionMode::attention_only(3, shared));
      model::ForwardProbe probe;
      std::vector<model::ModelInput> batch;
      for (std::size_t i = 0; i < w.samples.size(); ++i) batch.push_back(model::input_from_sample(w.samples[i], &w.audio[i]));
      Tape t;
      auto res = model::forward_batch(t, m, batch, {&probe, opt.faults});
      t.backward(ops::sum(res.logits));
      audio_rows += probe.audio_rows_into_ffn();
      ffn_calls += probe.ffn_inputs.size();
    }
    ok = audio_rows == 0 && ffn_calls == 8;
    return std::to_string(ffn_calls) + " instrumented FFN calls, " + std::to_string(audio_rows) +
           " audio rows entered an FFN";
  });
}

inline CheckResult check_delayed_equivalence() {
  return detail::timed("delayed_fusion_equivalence", [&](bool& ok) {
    detail::SmallWorld w(8, 21);
    const model::ModelConfig full{};
    auto base = w.model(model::FusionMode::baseline(), full);
    auto k1 = w.model(model::FusionMode::delayed(1), full);
    auto k5 = w.model(model::FusionMode::delayed(5), full);
    double k1_diff = 0.0;
    std::size_t prefix_mismatch = 0, no_divergence = 0;
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      auto in = model::input_from_sample(w.samples[i], &w.audio[i]);
      const Tensor a = model::forward(base, in), b = model::forward(k1, in);
      k1_diff = std::max(k1_diff, detail::row_diff(a, b, 0, a.rows()));
      model::ForwardProbe with, without;
      with.record_hidden = without.record_hidden = true;
      model::forward(k5, in, {&with});
      auto text = in;
      text.audio = nullptr;
      model::forward(k5, text, {&without});
      for (std::size_t l = 0; l < 4; ++l) prefix_mismatch += !with.text_hidden[l].same_values(without.text_hidden[l]);
      no_divergence += with.text_hidden[4].same_values(without.text_hidden[4]);
    }
    ok = k1_diff <= 1e-12 && prefix_mismatch == 0 && no_divergence == 0;
    std::ostringstream os;
    os << "k=1 vs baseline max |dlogit| " << std::scientific << std::setprecision(1) << k1_diff
       << "; layers 1-4 mismatches " << prefix_mismatch << "; layer-5 non-divergent " << no_divergence;
    return os.str();
  });
}

inline CheckResult check_receptive_fields() {
  return detail::timed("connector_partition_ordering", [&](bool& ok) {
    std::size_t problems = 0, geometries = 0;
    const connector::ConnectorConfig cfg{};
    for (auto set : {EncoderSet::fine, EncoderSet::ensemble}) {
      ExperimentConfig c;
      c.encoders = set;
      const auto geo = connector::geometries_of(make_encoders(c));
      const auto map = connector::build_receptive_map(geo, cfg);
      for (const auto& e : map.encoders) {
        ++geometries;
        const std::size_t gt = e.geometry.grid_t, gf = e.geometry.grid_f;
        std::vector<int> seen(gt * gf, 0);
        for (const auto& toks : e.tokens)
          for (auto tok : toks) ++seen[tok];
        for (int s : seen) problems += s != 1;
        // Time order within each frequency row of latents.
        for (std::size_t lf = 0; lf < cfg.latent_f; ++lf)
          for (std::size_t a = 0; a < cfg.latent_t; ++a)
            for (std::size_t b = a + 1; b < cfg.latent_t; ++b) {
              const auto& ta = e.tokens[a * cfg.latent_f + lf];
              const auto& tb = e.tokens[b * cfg.latent_f + lf];
              if (ta.empty() || tb.empty()) continue;
              double max_a = 0.0, min_b = 1.0;
              for (auto tok : ta) max_a = std::max(max_a, static_cast<double>(tok / gf + 1) / gt);
              for (auto tok : tb) min_b = std::min(min_b, static_cast<double>(tok / gf) / gt);
              problems += max_a > min_b + 1e-12;
            }
      }
    }
    ok = problems == 0;
    return std::to_string(geometries) + " encoder geometries, " + std::to_string(problems) + " violations";
  });
}

inline CheckResult check_param_accounting() {
  return detail::timed("parameter_accounting", [&](bool& ok) {
    std::size_t mismatches = 0, cases = 0;
    for (auto set : {EncoderSet::fine, EncoderSet::ensemble}) {
      ExperimentConfig c;
      c.encoders = set;
      const auto geo = connector::geometries_of(make_encoders(c));
      for (std::size_t layers = 1; layers <= 8; ++layers) {
        connector::ConnectorConfig sep, sh;
        sh.shared = true;
        auto bs = connector::make_connector_bank(sep, geo, layers, 1);
        auto bh = connector::make_connector_bank(sh, geo, layers, 1);
        const auto fs = connector::connector_param_count(sep, geo, layers);
        const auto fh = connector::connector_param_count(sh, geo, layers);
        mismatches += bs.parameter_count() != fs.total || bh.parameter_count() != fh.total;
        mismatches += fs.total - fh.total != (layers - 1) * (fs.seed + fs.xattn);
        if (layers > 1) mismatches += !(fh.total < fs.total);
        ++cases;
      }
    }
    ok = mismatches == 0;
    return std::to_string(cases) + " cases, " + std::to_string(mismatches) + " mismatches";
  });
}

inline CheckResult check_freeze_integrity() {
  return detail::timed("freeze_integrity", [&](bool& ok) {
    detail::SmallWorld w(0, 0);
    auto enc = w.encoders;
    std::vector<Tensor> enc0;
    for (const auto& e : enc) enc0.push_back(e.projection.values_only());
    auto m = w.model(model::FusionMode::attention_only(3));
    std::vector<Tensor> llm0;
    m.visit_llm([&](const std::string&, Tensor& t) { llm0.push_back(t.values_only()); });
    train::DataConfig data;
    data.eval_samples = 10;
    auto s1 = train::default_stage(1);
    s1.steps = 4;
    train::run_stage(s1, m, enc, data);
    std::size_t i = 0, llm_changed = 0;
    m.visit_llm([&](const std::string&, Tensor& t) { llm_changed += !t.same_values(llm0[i++]); });
    auto s2 = train::default_stage(2);
    s2.steps = 2;
    train::run_stage(s2, m, enc, data);
    std::size_t enc_changed = 0;
    for (std::size_t e = 0; e < enc.size(); ++e) enc_changed += !enc[e].projection.same_values(enc0[e]);
    ok = llm_changed == 0 && enc_changed == 0;
    return "stage 1 changed " + std::to_string(llm_changed) + " transformer tensors; encoders changed " +
           std::to_string(enc_changed);
  });
}

inline CheckResult check_checkpoint(const VerifyOptions& opt) {
  return detail::timed("checkpoint_roundtrip", [&](bool& ok) {
    std::filesystem::create_directories(opt.scratch_dir);
    const auto path = (opt.scratch_dir / "roundtrip.ckpt").string();
    ExperimentConfig c = canonical_config("full_pal");
    c.model = detail::SmallWorld::small_config();
    c.fusion.start_layer = 3;
    const auto enc = make_encoders(c);
    auto m = build_model(c, enc);
    save_checkpoint(m, shape_fingerprint(c), path);
    ExperimentConfig c2 = c;
    c2.seed = c.seed + 1;
    auto m2 = build_model(c2, enc);
    load_checkpoint(m2, shape_fingerprint(c2), path);
    detail::SmallWorld w(3, 8);
    bool identical = true;
    for (std::size_t i = 0; i < 3; ++i) {
      auto in = model::input_from_sample(w.samples[i], &w.audio[i]);
      identical = identical && model::forward(m, in).same_values(model::forward(m2, in));
    }
    ExperimentConfig wide = c;
    wide.model.d_model = 32;
    bool fingerprint_guard = false, truncation_guard = false;
    try {
      auto m3 = build_model(wide, enc);
      load_checkpoint(m3, shape_fingerprint(wide), path);
    } catch (const CheckpointError& e) {
      fingerprint_guard = std::string(e.what()).find("fingerprint") != std::string::npos;
    }
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    try {
      load_checkpoint(m2, shape_fingerprint(c), path);
    } catch (const CheckpointError& e) {
      truncation_guard = std::string(e.what()).find("truncated") != std::string::npos;
    }
    ok = identical && fingerprint_guard && truncation_guard;
    return std::string("logits ") + (identical ? "bit-identical" : "differ") + ", fingerprint guard " +
           (fingerprint_guard ? "ok" : "missing") + ", truncation guard " + (truncation_guard ? "ok" : "missing");
  });
}

// Recomputes one report row's accuracy from the run's checkpoint.
inline CheckResult check_report_integrity(const VerifyOptions& opt) {
  return detail::timed("report_integrity", [&](bool& ok) {
    std::filesystem::path run = opt.run_dir;
    if (run.empty()) {
      ExperimentConfig c = canonical_config("full_pal", 3);
      c.name = "integrity_probe";
      c.model = detail::SmallWorld::small_config();
      c.fusion.start_layer = 3;
      for (auto& s : c.stages) s.steps = 3;
      c.eval_samples = 40;
      c.output_dir = opt.scratch_dir.string();
      run_experiment(c);
      run = std::filesystem::path(c.output_dir) / c.name;
    }
    const auto cfg = load_config((run / "config.json").string());
    std::ifstream rep(run / "report.csv");
    std::string header, line, last;
    std::getline(rep, header);
    while (std::getline(rep, line))
      if (!line.empty()) last = line;
    std::vector<std::string> f;
    std::stringstream ss(last);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 10) throw std::runtime_error("report.csv has no data rows");
    const std::size_t stage = std::stoul(f[1]);
    const auto acc = reevaluate_checkpoint(cfg, stage_checkpoint_path(run, stage));
    const double c1 = std::stod(f[7]), c2 = std::stod(f[8]), c3 = std::stod(f[9]);
    ok = acc.at(synth::TaskKind::classify) == c1 && acc.at(synth::TaskKind::first_event) == c2 &&
         acc.at(synth::TaskKind::count) == c3;
    return cfg.name + " stage " + std::to_string(stage) + " recomputed " +
           format_double(acc.at(synth::TaskKind::classify)) + " vs reported " + f[7];
  });
}

inline VerifyReport run_verify(const VerifyOptions& opt = {}) {
  VerifyReport rep;
  for (auto& c : check_gradients()) rep.checks.push_back(std::move(c));
  rep.checks.push_back(check_causality(opt));
  rep.checks.push_back(check_ffn_exclusion(opt));
  rep.checks.push_back(check_delayed_equivalence());
  rep.checks.push_back(check_receptive_fields());
  rep.checks.push_back(check_param_accounting());
  rep.checks.push_back(check_freeze_integrity());
  rep.checks.push_back(check_checkpoint(opt));
  rep.checks.push_back(check_report_integrity(opt));
  return rep;
}

}  // namespace pal::harness
