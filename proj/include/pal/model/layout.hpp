#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/tensor/ops.hpp"

namespace pal::model {

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 256;
  std::size_t max_seq = 128;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab == 0 || d_model == 0 || n_layers == 0 || ffn_hidden == 0 || max_seq == 0) {
      throw std::invalid_argument("model: dimensions must be positive");
    }
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw std::invalid_argument("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                  std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) throw std::invalid_argument("model: head dimension must be even for rotary positions");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class FusionKind { baseline, delayed, attention_only };

inline std::string fusion_kind_name(FusionKind k) {
  switch (k) {
    case FusionKind::baseline: return "baseline";
    case FusionKind::delayed: return "delayed";
    case FusionKind::attention_only: return "attention_only";
  }
  return "?";
}

// Layers are numbered 1..n_layers.
struct FusionMode {
  FusionKind kind = FusionKind::baseline;
  std::size_t k = 5;            // delayed: first layer that sees audio
  std::size_t start_layer = 5;  // attention_only: first layer with audio keys/values
  bool shared = false;          // attention_only: one connector core for all layers

  static FusionMode baseline() { return {}; }
  static FusionMode delayed(std::size_t k) { return {FusionKind::delayed, k, 5, false}; }
  static FusionMode attention_only(std::size_t start, bool shared = false) {
    return {FusionKind::attention_only, 5, start, shared};
  }

  // First layer at which audio participates.
  std::size_t injection_layer() const {
    switch (kind) {
      case FusionKind::baseline: return 1;
      case FusionKind::delayed: return k;
      case FusionKind::attention_only: return start_layer;
    }
    return 1;
  }
  bool audio_in_layer(std::size_t layer) const { return layer >= injection_layer(); }
  // Audio occupies rows of the hidden-state stream (as opposed to key/value rows only).
  bool audio_in_stream() const { return kind != FusionKind::attention_only; }
  std::size_t connector_count(std::size_t n_layers) const {
    return kind == FusionKind::attention_only ? n_layers - start_layer + 1 : 1;
  }

  void validate(std::size_t n_layers) const {
    if (kind == FusionKind::delayed && (k < 1 || k > n_layers)) throw std::invalid_argument("k must be in [1, n_layers]");
    if (kind == FusionKind::attention_only && (start_layer < 1 || start_layer > n_layers)) {
      throw std::invalid_argument("start_layer must be in [1, n_layers]");
    }
  }

  std::string describe() const {
    switch (kind) {
      case FusionKind::baseline: return "baseline";
      case FusionKind::delayed: return "delayed(k=" + std::to_string(k) + ")";
      case FusionKind::attention_only:
        return "attention_only(start=" + std::to_string(start_layer) + (shared ? ",shared)" : ")");
    }
    return "?";
  }

  friend bool operator==(const FusionMode&, const FusionMode&) = default;
};

enum class Modality : std::uint8_t { system, audio, user, response };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::system: return "system";
    case Modality::audio: return "audio";
    case Modality::user: return "user";
    case Modality::response: return "response";
  }
  return "?";
}

struct Span {
  std::size_t start = 0, length = 0;
  std::size_t end() const { return start + length; }
};

// Segment lengths of one sequence. The audio slot always reserves n_audio
// rotary positions between system and user; it occupies rows of the token
// stream only when audio_in_stream is set.
struct SequenceLayout {
  std::size_t system_len = 0;
  std::size_t n_audio = 0;
  std::size_t user_len = 0;
  std::size_t response_len = 0;
  bool audio_in_stream = true;

  std::size_t text_len() const { return system_len + user_len + response_len; }
  std::size_t stream_len() const { return text_len() + (audio_in_stream ? n_audio : 0); }
  // Total positions including the audio slot.
  std::size_t slotted_len() const { return text_len() + n_audio; }

  Span system() const { return {0, system_len}; }
  Span audio() const { return {system_len, audio_in_stream ? n_audio : 0}; }
  Span user() const { return {audio().end(), user_len}; }
  Span response() const { return {user().end(), response_len}; }

  Modality text_modality(std::size_t i) const {
    if (i < system_len) return Modality::system;
    if (i < system_len + user_len) return Modality::user;
    return Modality::response;
  }
  int compact_position(std::size_t text_index) const { return static_cast<int>(text_index); }
  int slotted_position(std::size_t text_index) const {
    return static_cast<int>(text_index < system_len ? text_index : text_index + n_audio);
  }
  int audio_position(std::size_t latent) const { return static_cast<int>(system_len + latent); }

  std::vector<Modality> stream_tags() const {
    std::vector<Modality> t(system_len, Modality::system);
    if (audio_in_stream) t.insert(t.end(), n_audio, Modality::audio);
    t.insert(t.end(), user_len, Modality::user);
    t.insert(t.end(), response_len, Modality::response);
    return t;
  }
};

inline SequenceLayout make_layout(std::size_t system_len, std::size_t user_len, std::size_t response_len,
                                  std::size_t n_audio, const FusionMode& mode) {
  return {system_len, n_audio, user_len, response_len, mode.audio_in_stream()};
}

// One query row or key column: its modality, its index within that modality's
// source (text token index, or latent index for audio) and its rotary position.
struct AxisEntry {
  Modality tag = Modality::system;
  std::size_t index = 0;
  int position = 0;

  bool is_audio() const { return tag == Modality::audio; }
  friend bool operator==(const AxisEntry&, const AxisEntry&) = default;
};

struct AttentionMask {
  std::vector<AxisEntry> rows;
  std::vector<AxisEntry> cols;
  ops::AllowMatrix allowed;
};

// Permitted attention at `layer` (1-based). Layers where audio does not take
// part see only text, at compact positions. Otherwise positions follow the
// slotted order system -> audio -> user -> response and a key is visible when
// its position does not exceed the query's; with audio as key/value rows only,
// no audio query rows exist.
inline AttentionMask build_attention_mask(const SequenceLayout& layout, const FusionMode& mode, std::size_t layer,
                                          std::size_t n_layers) {
  if (layer < 1 || layer > n_layers) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside [1, " + std::to_string(n_layers) + "]");
  }
  if (layout.n_audio > 0 && layout.audio_in_stream != mode.audio_in_stream()) {
    throw std::invalid_argument("layout does not match fusion mode " + mode.describe());
  }
  AttentionMask m;
  const bool with_audio = layout.n_audio > 0 && mode.audio_in_layer(layer);
  auto text_entry = [&](std::size_t i, bool slotted) {
    return AxisEntry{layout.text_modality(i), i, slotted ? layout.slotted_position(i) : layout.compact_position(i)};
  };
  std::vector<AxisEntry> slotted;
  if (with_audio) {
    for (std::size_t i = 0; i < layout.system_len; ++i) slotted.push_back(text_entry(i, true));
    for (std::size_t j = 0; j < layout.n_audio; ++j) slotted.push_back({Modality::audio, j, layout.audio_position(j)});
    for (std::size_t i = layout.system_len; i < layout.text_len(); ++i) slotted.push_back(text_entry(i, true));
  }
  if (!with_audio) {
    for (std::size_t i = 0; i < layout.text_len(); ++i) m.rows.push_back(text_entry(i, false));
    m.cols = m.rows;
  } else if (mode.audio_in_stream()) {
    m.rows = slotted;
    m.cols = slotted;
  } else {
    for (const auto& e : slotted)
      if (!e.is_audio()) m.rows.push_back(e);
    m.cols = slotted;
  }
  m.allowed = ops::AllowMatrix(m.rows.size(), m.cols.size());
  for (std::size_t r = 0; r < m.rows.size(); ++r)
    for (std::size_t c = 0; c < m.cols.size(); ++c)
      m.allowed(r, c) = m.cols[c].position <= m.rows[r].position ? 1 : 0;
  return m;
}

}  // namespace pal::model
