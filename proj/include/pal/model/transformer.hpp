#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/connector/connector.hpp"
#include "pal/model/layout.hpp"
#include "pal/synth/sample.hpp"
#include "pal/tensor/ops.hpp"
#include "pal/tensor/random.hpp"

namespace pal::model {

using TensorVisitor = std::function<void(const std::string&, Tensor&)>;

struct LayerParams {
  Tensor attn_norm;             // [d]
  Tensor wq, wk, wv, wo;        // [d x d]
  Tensor ffn_norm;              // [d]
  Tensor w_gate, w_up;          // [d x ffn]
  Tensor w_down;                // [ffn x d]

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".attn_norm", attn_norm);
    fn(prefix + ".wq", wq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".ffn_norm", ffn_norm);
    fn(prefix + ".w_gate", w_gate);
    fn(prefix + ".w_up", w_up);
    fn(prefix + ".w_down", w_down);
  }
};

struct TransformerParams {
  Tensor embedding;  // [vocab x d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [d x vocab]

  void visit(const TensorVisitor& fn) {
    fn("llm.embedding", embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("llm.layer" + std::to_string(l + 1), fn);
    fn("llm.final_norm", final_norm);
    fn("llm.lm_head", lm_head);
  }
};

// Matrices ~ N(0, 1/fan_in); residual output projections further scaled by
// 1/sqrt(2L); embeddings ~ N(0, 1); norm gains 1.
inline TransformerParams init_transformer(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  const std::size_t d = cfg.d_model, f = cfg.ffn_hidden;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  TransformerParams p;
  p.embedding = random_normal({cfg.vocab, d}, rng, 1.0);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.attn_norm = Tensor::ones({d});
    lp.wq = random_normal({d, d}, rng, sd);
    lp.wk = random_normal({d, d}, rng, sd);
    lp.wv = random_normal({d, d}, rng, sd);
    lp.wo = random_normal({d, d}, rng, sd * depth);
    lp.ffn_norm = Tensor::ones({d});
    lp.w_gate = random_normal({d, f}, rng, sd);
    lp.w_up = random_normal({d, f}, rng, sd);
    lp.w_down = random_normal({f, d}, rng, sf * depth);
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = Tensor::ones({d});
  p.lm_head = random_normal({d, cfg.vocab}, rng, sd);
  p.visit([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return p;
}

struct PalModel {
  ModelConfig cfg;
  FusionMode mode;
  connector::ConnectorConfig connector_cfg;
  connector::ReceptiveFieldMap receptive_map;
  connector::ConnectorBank connectors;
  TransformerParams llm;

  std::size_t n_latents() const { return connector_cfg.n_latents(); }
  // Connector serving `layer` (1-based); only meaningful where audio enters.
  std::size_t connector_index(std::size_t layer) const {
    return mode.kind == FusionKind::attention_only ? layer - mode.start_layer : 0;
  }

  void visit_llm(const TensorVisitor& fn) { llm.visit(fn); }
  void visit_connectors(const TensorVisitor& fn) { connectors.visit(fn); }
  void visit(const TensorVisitor& fn) {
    visit_llm(fn);
    visit_connectors(fn);
  }
  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
  }
};

inline PalModel make_model(const ModelConfig& cfg, const FusionMode& mode, connector::ConnectorConfig ccfg,
                           const std::vector<connector::EncoderGeometry>& encoders, std::uint64_t seed) {
  cfg.validate();
  mode.validate(cfg.n_layers);
  ccfg.llm_dim = cfg.d_model;
  ccfg.shared = mode.kind == FusionKind::attention_only && mode.shared;
  ccfg.validate();
  PalModel m;
  m.cfg = cfg;
  m.mode = mode;
  m.connector_cfg = ccfg;
  m.receptive_map = connector::build_receptive_map(encoders, ccfg);
  m.connectors = connector::make_connector_bank(ccfg, encoders, mode.connector_count(cfg.n_layers), mix_seed(seed, 2));
  m.llm = init_transformer(cfg, mix_seed(seed, 1));
  return m;
}

// One sequence: system span, then user prompt, then (possibly empty) response.
struct ModelInput {
  std::vector<int> tokens;
  std::size_t system_len = 0;
  std::size_t user_len = 0;
  const std::vector<synth::EncoderOutput>* audio = nullptr;  // null: text only

  std::size_t response_len() const { return tokens.size() - system_len - user_len; }
};

inline ModelInput input_from_sample(const synth::SyntheticSample& s, const std::vector<synth::EncoderOutput>* audio,
                                    bool with_response = true) {
  ModelInput in;
  in.tokens = with_response ? s.text_tokens() : s.prompt_tokens;
  in.system_len = s.system_len;
  in.user_len = s.prompt_tokens.size() - s.system_len;
  in.audio = audio;
  return in;
}

struct FfnRecord {
  std::size_t layer = 0;
  std::size_t rows = 0;
  std::size_t audio_rows = 0;
};

// Instrumentation filled by forward passes; accumulates across calls.
struct ForwardProbe {
  bool record_hidden = false;
  std::vector<FfnRecord> ffn_inputs;
  std::vector<Tensor> text_hidden;  // after each layer: text rows in token order

  std::size_t audio_rows_into_ffn() const {
    std::size_t n = 0;
    for (const auto& r : ffn_inputs) n += r.audio_rows;
    return n;
  }
};

// Deliberate wiring faults used as negative controls by the verification suite.
struct FaultInjection {
  bool route_audio_into_ffn = false;
  bool expose_audio_to_system = false;
};

struct ForwardOptions {
  ForwardProbe* probe = nullptr;
  FaultInjection faults{};
};

struct ForwardResult {
  Var logits;                           // [sum of text lengths x vocab]
  std::vector<std::size_t> text_offset;  // first logits row of each sequence
};

namespace detail {

inline void check_input(const ModelConfig& cfg, const ModelInput& in, std::size_t n_audio) {
  if (in.system_len + in.user_len > in.tokens.size()) {
    throw std::invalid_argument("model input: spans exceed " + std::to_string(in.tokens.size()) + " tokens");
  }
  if (in.tokens.empty()) throw std::invalid_argument("model input: empty sequence");
  for (int t : in.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw std::invalid_argument("model input: token id " + std::to_string(t) + " outside vocabulary");
    }
  if (in.tokens.size() + n_audio > cfg.max_seq) {
    throw std::invalid_argument("model input: length " + std::to_string(in.tokens.size() + n_audio) +
                                " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
}

}  // namespace detail

// Packed forward pass over a batch; sequences never attend to one another.
inline ForwardResult forward_batch(Tape& tape, PalModel& model, std::span<const ModelInput> inputs,
                                   const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = model.cfg;
  const FusionMode& mode = model.mode;
  const std::size_t B = inputs.size(), L = cfg.n_layers, H = cfg.n_heads, n_lat = model.n_latents();
  if (B == 0) throw std::invalid_argument("forward: empty batch");

  std::vector<SequenceLayout> layouts;
  std::vector<const std::vector<synth::EncoderOutput>*> audio_batch;
  std::vector<std::size_t> audio_base(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& in = inputs[b];
    const std::size_t na = in.audio ? n_lat : 0;
    detail::check_input(cfg, in, na);
    layouts.push_back(make_layout(in.system_len, in.user_len, in.response_len(), na, mode));
    if (in.audio) {
      audio_base[b] = audio_batch.size() * n_lat;
      audio_batch.push_back(in.audio);
    }
  }
  const bool any_audio = !audio_batch.empty();

  // Connector outputs, [n_audio_samples * n_latents x d]; in shared mode the
  // latent states are computed once and re-projected per layer.
  std::vector<std::optional<Var>> latents(model.connectors.cores.size());
  auto connector_output = [&](std::size_t idx) {
    const std::size_t core = model.connector_cfg.shared ? 0 : idx;
    if (!latents[core]) {
      latents[core] = connector::connector_latents(tape, model.connectors.cores[core], model.receptive_map,
                                                   audio_batch, model.connector_cfg);
    }
    return connector::connector_project(tape, model.connectors.projections[idx], *latents[core]);
  };

  // Stream rows: one entry per hidden-state row, grouped by sequence.
  std::vector<AxisEntry> rows;
  std::vector<std::size_t> row_offset(B), row_count(B);
  std::vector<int> ids;
  for (std::size_t b = 0; b < B; ++b) {
    row_offset[b] = rows.size();
    for (std::size_t i = 0; i < inputs[b].tokens.size(); ++i) {
      rows.push_back({layouts[b].text_modality(i), i, layouts[b].compact_position(i)});
      ids.push_back(inputs[b].tokens[i]);
    }
    row_count[b] = inputs[b].tokens.size();
  }
  Var h = ops::embedding(tape.param(model.llm.embedding), ids);
  bool materialized = false;

  for (std::size_t l = 1; l <= L; ++l) {
    LayerParams& lp = model.llm.layers[l - 1];
    std::vector<AttentionMask> masks;
    for (std::size_t b = 0; b < B; ++b) masks.push_back(build_attention_mask(layouts[b], mode, l, L));

    const bool layer_audio = any_audio && mode.audio_in_layer(l);
    if (layer_audio && mode.audio_in_stream() && !materialized) {
      // Insert connector rows into the stream at each sequence's audio slot.
      Var a = connector_output(0);
      const std::size_t a_base = rows.size();
      std::vector<std::size_t> order;
      for (std::size_t b = 0; b < B; ++b)
        for (const auto& e : masks[b].rows)
          order.push_back(e.is_audio() ? a_base + audio_base[b] + e.index : row_offset[b] + e.index);
      h = ops::gather_rows(ops::concat({h, a}, 0), order);
      materialized = true;
    }
    rows.clear();
    for (std::size_t b = 0; b < B; ++b) {
      row_offset[b] = rows.size();
      row_count[b] = masks[b].rows.size();
      rows.insert(rows.end(), masks[b].rows.begin(), masks[b].rows.end());
    }
    const std::size_t R = rows.size();

    // Key/value rows: the stream itself, plus connector rows when audio is
    // supplied as keys/values only.
    const bool kv_audio = layer_audio && !mode.audio_in_stream();
    const std::size_t kv_rows = R + (kv_audio ? audio_batch.size() * n_lat : 0);
    ops::AllowMatrix allow(R, kv_rows);
    std::vector<int> audio_pos(kv_audio ? audio_batch.size() * n_lat : 0, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& m = masks[b];
      std::vector<std::size_t> text_row(layouts[b].text_len()), audio_row(layouts[b].n_audio);
      for (std::size_t r = 0; r < m.rows.size(); ++r)
        (m.rows[r].is_audio() ? audio_row : text_row)[m.rows[r].index] = row_offset[b] + r;
      std::vector<std::size_t> col_row(m.cols.size());
      for (std::size_t c = 0; c < m.cols.size(); ++c) {
        const auto& e = m.cols[c];
        if (e.is_audio() && kv_audio) {
          col_row[c] = R + audio_base[b] + e.index;
          audio_pos[audio_base[b] + e.index] = e.position;
        } else {
          col_row[c] = e.is_audio() ? audio_row[e.index] : text_row[e.index];
        }
      }
      for (std::size_t r = 0; r < m.rows.size(); ++r) {
        const bool sys_fault = opts.faults.expose_audio_to_system && m.rows[r].tag == Modality::system;
        for (std::size_t c = 0; c < m.cols.size(); ++c)
          if (m.allowed(r, c) || (sys_fault && m.cols[c].is_audio())) allow(row_offset[b] + r, col_row[c]) = 1;
      }
    }

    std::vector<int> pos(R);
    for (std::size_t r = 0; r < R; ++r) pos[r] = rows[r].position;
    Var x = ops::rmsnorm(h, tape.param(lp.attn_norm));
    Var wk = tape.param(lp.wk), wv = tape.param(lp.wv);
    Var q = ops::rope(ops::matmul(x, tape.param(lp.wq)), pos, H, cfg.rope_base);
    Var k = ops::rope(ops::matmul(x, wk), pos, H, cfg.rope_base);
    Var v = ops::matmul(x, wv);
    std::optional<Var> audio_rows;
    if (kv_audio) {
      audio_rows = connector_output(model.connector_index(l));
      Var xa = ops::rmsnorm(*audio_rows, tape.param(lp.attn_norm));
      k = ops::concat({k, ops::rope(ops::matmul(xa, wk), audio_pos, H, cfg.rope_base)}, 0);
      v = ops::concat({v, ops::matmul(xa, wv)}, 0);
    }
    Var att = ops::attention(q, k, v, allow, H);
    h = ops::add(h, ops::matmul(att, tape.param(lp.wo)));

    Var ffn_in = h;
    std::size_t ffn_audio = 0;
    for (const auto& e : rows) ffn_audio += e.is_audio() ? 1 : 0;
    if (opts.faults.route_audio_into_ffn && audio_rows) {
      ffn_in = ops::concat({h, *audio_rows}, 0);
      ffn_audio += audio_rows->rows();
    }
    Var f = ops::rmsnorm(ffn_in, tape.param(lp.ffn_norm));
    Var g = ops::mul(ops::silu(ops::matmul(f, tape.param(lp.w_gate))), ops::matmul(f, tape.param(lp.w_up)));
    Var out = ops::matmul(g, tape.param(lp.w_down));
    if (ffn_in.rows() != R) out = ops::slice(out, 0, 0, R);
    h = ops::add(h, out);

    if (opts.probe) {
      opts.probe->ffn_inputs.push_back({l, ffn_in.rows(), ffn_audio});
    }
    if (opts.probe && opts.probe->record_hidden) {
      std::vector<std::size_t> text_rows;
      for (std::size_t r = 0; r < R; ++r)
        if (!rows[r].is_audio()) text_rows.push_back(r);
      opts.probe->text_hidden.push_back(ops::gather_rows(h, text_rows).value().values_only());
    }
  }

  // Logits only for text rows, in token order.
  ForwardResult res;
  std::vector<std::size_t> text_rows;
  for (std::size_t b = 0; b < B; ++b) {
    res.text_offset.push_back(text_rows.size());
    std::vector<std::size_t> by_index(layouts[b].text_len());
    for (std::size_t r = 0; r < row_count[b]; ++r) {
      const auto& e = rows[row_offset[b] + r];
      if (!e.is_audio()) by_index[e.index] = row_offset[b] + r;
    }
    text_rows.insert(text_rows.end(), by_index.begin(), by_index.end());
  }
  bool identity = text_rows.size() == rows.size();
  for (std::size_t i = 0; identity && i < text_rows.size(); ++i) identity = text_rows[i] == i;
  Var ht = identity ? h : ops::gather_rows(h, text_rows);
  res.logits = ops::matmul(ops::rmsnorm(ht, tape.param(model.llm.final_norm)), tape.param(model.llm.lm_head));
  return res;
}

// Single-sequence logits [text_len x vocab].
inline Tensor forward(PalModel& model, const ModelInput& input, const ForwardOptions& opts = {}) {
  Tape tape(false);
  const ModelInput one[] = {input};
  return forward_batch(tape, model, one, opts).logits.value().values_only();
}

inline int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const double* p = logits.data().data() + row * v;
  return static_cast<int>(std::max_element(p, p + v) - p);
}

// Greedy decoding for a batch of prompts ending in the answer marker. Each
// output stops before the end-of-sequence token or after max_new tokens.
inline std::vector<std::vector<int>> decode_greedy_batch(PalModel& model, std::span<const ModelInput> prompts,
                                                         std::size_t max_new) {
  std::vector<ModelInput> cur(prompts.begin(), prompts.end());
  for (auto& p : cur) {
    if (p.tokens.empty() || p.tokens.back() != synth::kAnswer) {
      throw std::invalid_argument("decode: prompt must end with the answer marker");
    }
    if (p.response_len() != 0) throw std::invalid_argument("decode: prompt must not contain a response");
    detail::check_input(model.cfg, p, p.audio ? model.n_latents() : 0);
  }
  std::vector<std::vector<int>> out(cur.size());
  std::vector<std::size_t> active(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) active[i] = i;
  for (std::size_t step = 0; step < max_new && !active.empty(); ++step) {
    std::vector<ModelInput> batch;
    for (std::size_t i : active) batch.push_back(cur[i]);
    Tape tape(false);
    auto res = forward_batch(tape, model, batch);
    const Tensor& logits = res.logits.value();
    std::vector<std::size_t> next;
    for (std::size_t j = 0; j < active.size(); ++j) {
      const std::size_t i = active[j];
      const int tok = argmax_row(logits, res.text_offset[j] + batch[j].tokens.size() - 1);
      if (tok == synth::kEos) continue;
      out[i].push_back(tok);
      cur[i].tokens.push_back(tok);
      const std::size_t len = cur[i].tokens.size() + (cur[i].audio ? model.n_latents() : 0);
      if (len < model.cfg.max_seq) next.push_back(i);
    }
    active = std::move(next);
  }
  return out;
}

inline std::vector<int> decode_greedy(PalModel& model, const ModelInput& prompt, std::size_t max_new) {
  const ModelInput one[] = {prompt};
  return decode_greedy_batch(model, one, max_new)[0];
}

}  // namespace pal::model
