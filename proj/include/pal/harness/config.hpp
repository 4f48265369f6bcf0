#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pal/connector/connector.hpp"
#include "pal/model/layout.hpp"
#include "pal/synth/encoder.hpp"
#include "pal/train/trainer.hpp"

namespace pal::harness {

using nlohmann::json;

// Raised for any unreadable, malformed or invalid configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EncoderSet { fine, ensemble };

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  model::ModelConfig model;
  model::FusionMode fusion = model::FusionMode::attention_only(5);
  EncoderSet encoders = EncoderSet::ensemble;
  std::uint64_t encoder_seed = 7;
  connector::ConnectorConfig connector;
  std::vector<train::StageConfig> stages{train::default_stage(1), train::default_stage(2), train::default_stage(3)};
  std::uint64_t eval_seed = train::DataConfig{}.eval_seed;
  std::size_t eval_samples = 500;
  double difficulty = 0.0;
  std::string output_dir = "runs";

  bool shared_connector() const {
    return fusion.kind == model::FusionKind::attention_only && fusion.shared;
  }
  train::DataConfig data() const { return {seed, eval_seed, eval_samples, difficulty}; }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Table-1 style design-element flags derived from a configuration.
struct DesignElements {
  bool baseline = false, delayed = false, attention_only = false, multi_encoder = false;
};

inline DesignElements design_elements(const ExperimentConfig& c) {
  using model::FusionKind;
  DesignElements d;
  d.baseline = c.fusion.kind == FusionKind::baseline;
  d.delayed = c.fusion.kind == FusionKind::delayed ||
              (c.fusion.kind == FusionKind::attention_only && c.fusion.start_layer > 1);
  d.attention_only = c.fusion.kind == FusionKind::attention_only;
  d.multi_encoder = c.encoders == EncoderSet::ensemble;
  return d;
}

inline std::vector<synth::EncoderProfile> make_encoders(const ExperimentConfig& c) {
  auto all = synth::make_default_ensemble(c.encoder_seed);
  if (c.encoders == EncoderSet::fine) all.resize(1);
  return all;
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) { throw ConfigError(field + ": " + msg); };
  if (c.name.empty()) fail("name", "must be a non-empty string");
  for (char ch : c.name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.')) {
      fail("name", "may contain only letters, digits, '_', '-' and '.'");
    }
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    fail("model", e.what());
  }
  const std::size_t L = c.model.n_layers;
  if (c.fusion.kind == model::FusionKind::delayed && (c.fusion.k < 1 || c.fusion.k > L)) {
    fail("fusion.k", "k must be in [1, n_layers]");
  }
  if (c.fusion.kind == model::FusionKind::attention_only && (c.fusion.start_layer < 1 || c.fusion.start_layer > L)) {
    fail("fusion.start_layer", "start_layer must be in [1, n_layers]");
  }
  if (c.fusion.shared && c.fusion.kind != model::FusionKind::attention_only) {
    fail("connector.shared", "a shared connector requires fusion mode attention_only");
  }
  try {
    auto cc = c.connector;
    cc.llm_dim = c.model.d_model;
    cc.validate();
  } catch (const std::exception& e) {
    fail("connector", e.what());
  }
  if (c.stages.size() != 3) fail("stages", "exactly three stages are required");
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    try {
      c.stages[i].validate();
    } catch (const std::exception& e) {
      fail("stages[" + std::to_string(i) + "]", e.what());
    }
    if (c.stages[i].stage_id != i + 1) fail("stages[" + std::to_string(i) + "].stage", "stages must be 1, 2, 3 in order");
  }
  if (c.difficulty < 0.0) fail("eval.difficulty", "must be non-negative");
  if (c.output_dir.empty()) fail("output_dir", "must be non-empty");
}

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError((where.empty() ? "config" : where) + ": expected an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw ConfigError((where.empty() ? "" : where + ".") + key + ": unknown key");
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const std::string field = (where.empty() ? "" : where + ".") + key;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

inline void read_size(const json& obj, const char* key, std::size_t& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number_unsigned()) {
    throw ConfigError((where.empty() ? "" : where + ".") + key + ": must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

inline std::string line_info(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline json stage_to_json(const train::StageConfig& s) {
  json tasks = json::array();
  for (auto t : s.tasks) tasks.push_back(std::string(synth::task_name(t)));
  return {{"stage", s.stage_id},   {"steps", s.steps},         {"batch_size", s.batch_size},
          {"grad_accumulation", s.grad_accumulation},           {"peak_lr", s.peak_lr},
          {"warmup_ratio", s.warmup_ratio}, {"train_llm", s.train_llm}, {"tasks", tasks}};
}

inline json to_json(const ExperimentConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back(stage_to_json(s));
  return {{"name", c.name},
          {"seed", c.seed},
          {"model",
           {{"vocab", c.model.vocab},
            {"d_model", c.model.d_model},
            {"n_layers", c.model.n_layers},
            {"n_heads", c.model.n_heads},
            {"ffn_hidden", c.model.ffn_hidden},
            {"max_seq", c.model.max_seq},
            {"rope_base", c.model.rope_base}}},
          {"fusion", {{"mode", model::fusion_kind_name(c.fusion.kind)}, {"k", c.fusion.k}, {"start_layer", c.fusion.start_layer}}},
          {"encoders", c.encoders == EncoderSet::fine ? "fine" : "ensemble"},
          {"encoder_seed", c.encoder_seed},
          {"connector",
           {{"latent_t", c.connector.latent_t},
            {"latent_f", c.connector.latent_f},
            {"latent_dim", c.connector.latent_dim},
            {"n_heads", c.connector.n_heads},
            {"shared", c.fusion.shared}}},
          {"stages", stages},
          {"eval", {{"seed", c.eval_seed}, {"samples", c.eval_samples}, {"difficulty", c.difficulty}}},
          {"output_dir", c.output_dir}};
}

inline train::StageConfig stage_from_json(const json& j, std::size_t index) {
  const std::string where = "stages[" + std::to_string(index) + "]";
  detail::reject_unknown(j, {"stage", "steps", "batch_size", "grad_accumulation", "peak_lr", "warmup_ratio",
                             "train_llm", "tasks"},
                         where);
  std::size_t id = index + 1;
  detail::read_size(j, "stage", id, where);
  if (id < 1 || id > 3) throw ConfigError(where + ".stage: must be 1, 2 or 3");
  train::StageConfig s = train::default_stage(id);
  detail::read_size(j, "steps", s.steps, where);
  detail::read_size(j, "batch_size", s.batch_size, where);
  detail::read_size(j, "grad_accumulation", s.grad_accumulation, where);
  detail::read(j, "peak_lr", s.peak_lr, where);
  detail::read(j, "warmup_ratio", s.warmup_ratio, where);
  detail::read(j, "train_llm", s.train_llm, where);
  if (j.contains("tasks")) {
    std::vector<std::string> names;
    detail::read(j, "tasks", names, where);
    s.tasks.clear();
    for (const auto& n : names) {
      try {
        s.tasks.push_back(synth::parse_task(n));
      } catch (const std::exception&) {
        throw ConfigError(where + ".tasks: unknown task '" + n + "'");
      }
    }
  }
  return s;
}

inline ExperimentConfig from_json(const json& j) {
  detail::reject_unknown(j, {"name", "seed", "model", "fusion", "encoders", "encoder_seed", "connector", "stages",
                             "eval", "output_dir"},
                         "");
  ExperimentConfig c;
  if (!j.contains("name")) throw ConfigError("name: required");
  if (!j.contains("seed")) throw ConfigError("seed: required");
  detail::read(j, "name", c.name, "");
  if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed: must be a non-negative integer");
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"vocab", "d_model", "n_layers", "n_heads", "ffn_hidden", "max_seq", "rope_base"}, "model");
    detail::read_size(m, "vocab", c.model.vocab, "model");
    detail::read_size(m, "d_model", c.model.d_model, "model");
    detail::read_size(m, "n_layers", c.model.n_layers, "model");
    detail::read_size(m, "n_heads", c.model.n_heads, "model");
    detail::read_size(m, "ffn_hidden", c.model.ffn_hidden, "model");
    detail::read_size(m, "max_seq", c.model.max_seq, "model");
    detail::read(m, "rope_base", c.model.rope_base, "model");
  }
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    detail::reject_unknown(f, {"mode", "k", "start_layer"}, "fusion");
    std::string mode = model::fusion_kind_name(c.fusion.kind);
    detail::read(f, "mode", mode, "fusion");
    if (mode == "baseline") c.fusion.kind = model::FusionKind::baseline;
    else if (mode == "delayed") c.fusion.kind = model::FusionKind::delayed;
    else if (mode == "attention_only") c.fusion.kind = model::FusionKind::attention_only;
    else throw ConfigError("fusion.mode: expected baseline, delayed or attention_only, got '" + mode + "'");
    if (f.contains("k") && !f.at("k").is_number_integer()) throw ConfigError("fusion.k: must be an integer");
    if (f.contains("k") && f.at("k").get<long long>() < 1) throw ConfigError("fusion.k: k must be in [1, n_layers]");
    detail::read_size(f, "k", c.fusion.k, "fusion");
    if (f.contains("start_layer") && f.at("start_layer").is_number_integer() && f.at("start_layer").get<long long>() < 1) {
      throw ConfigError("fusion.start_layer: start_layer must be in [1, n_layers]");
    }
    detail::read_size(f, "start_layer", c.fusion.start_layer, "fusion");
  }
  if (j.contains("encoders")) {
    std::string e;
    detail::read(j, "encoders", e, "");
    if (e == "fine") c.encoders = EncoderSet::fine;
    else if (e == "ensemble") c.encoders = EncoderSet::ensemble;
    else throw ConfigError("encoders: expected 'fine' or 'ensemble', got '" + e + "'");
  }
  if (j.contains("encoder_seed") && !j.at("encoder_seed").is_number_unsigned()) {
    throw ConfigError("encoder_seed: must be a non-negative integer");
  }
  detail::read(j, "encoder_seed", c.encoder_seed, "");
  if (j.contains("connector")) {
    const auto& k = j.at("connector");
    detail::reject_unknown(k, {"latent_t", "latent_f", "latent_dim", "n_heads", "shared"}, "connector");
    detail::read_size(k, "latent_t", c.connector.latent_t, "connector");
    detail::read_size(k, "latent_f", c.connector.latent_f, "connector");
    detail::read_size(k, "latent_dim", c.connector.latent_dim, "connector");
    detail::read_size(k, "n_heads", c.connector.n_heads, "connector");
    detail::read(k, "shared", c.fusion.shared, "connector");
  }
  if (j.contains("stages")) {
    const auto& st = j.at("stages");
    if (!st.is_array()) throw ConfigError("stages: expected an array");
    c.stages.clear();
    for (std::size_t i = 0; i < st.size(); ++i) c.stages.push_back(stage_from_json(st[i], i));
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, {"seed", "samples", "difficulty"}, "eval");
    detail::read(e, "seed", c.eval_seed, "eval");
    detail::read_size(e, "samples", c.eval_samples, "eval");
    detail::read(e, "difficulty", c.difficulty, "eval");
  }
  detail::read(j, "output_dir", c.output_dir, "");
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": parse error at " + detail::line_info(text, e.byte) + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

// Hash of everything that determines parameter shapes.
inline std::uint64_t shape_fingerprint(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  mix(c.model.vocab);
  mix(c.model.d_model);
  mix(c.model.n_layers);
  mix(c.model.n_heads);
  mix(c.model.ffn_hidden);
  mix(static_cast<std::uint64_t>(c.fusion.kind));
  mix(c.fusion.kind == model::FusionKind::attention_only ? c.fusion.start_layer : 0);
  mix(c.shared_connector() ? 1 : 0);
  mix(c.encoders == EncoderSet::fine ? 1 : 4);
  mix(c.connector.latent_t);
  mix(c.connector.latent_f);
  mix(c.connector.latent_dim);
  return h;
}

inline const std::vector<std::string>& canonical_names() {
  static const std::vector<std::string> names{"baseline", "delayed", "attn_only", "full_pal",
                                              "connector_separate", "connector_shared"};
  return names;
}

// The four ablation-grid rows plus the shared/separate connector pair.
inline ExperimentConfig canonical_config(const std::string& name, std::uint64_t seed = 1) {
  ExperimentConfig c;
  c.name = name;
  c.seed = seed;
  if (name == "baseline") {
    c.fusion = model::FusionMode::baseline();
    c.encoders = EncoderSet::fine;
  } else if (name == "delayed") {
    c.fusion = model::FusionMode::delayed(5);
    c.encoders = EncoderSet::fine;
  } else if (name == "attn_only" || name == "connector_separate") {
    c.fusion = model::FusionMode::attention_only(5, false);
    c.encoders = EncoderSet::fine;
  } else if (name == "connector_shared") {
    c.fusion = model::FusionMode::attention_only(5, true);
    c.encoders = EncoderSet::fine;
  } else if (name == "full_pal") {
    c.fusion = model::FusionMode::attention_only(5, false);
    c.encoders = EncoderSet::ensemble;
  } else {
    throw ConfigError("unknown canonical config '" + name + "'");
  }
  validate(c);
  return c;
}

inline model::PalModel build_model(const ExperimentConfig& c, const std::vector<synth::EncoderProfile>& encoders) {
  return model::make_model(c.model, c.fusion, c.connector, connector::geometries_of(encoders), c.seed);
}

}  // namespace pal::harness
