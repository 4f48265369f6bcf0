#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/synth/encoder.hpp"
#include "pal/tensor/ops.hpp"
#include "pal/tensor/random.hpp"

namespace pal::connector {

struct ConnectorConfig {
  std::size_t latent_t = 4;  // T'
  std::size_t latent_f = 2;  // F'
  std::size_t latent_dim = 32;
  std::size_t llm_dim = 64;
  std::size_t n_heads = 2;
  bool shared = false;

  std::size_t n_latents() const { return latent_t * latent_f; }

  void validate() const {
    if (latent_t == 0 || latent_f == 0) throw std::invalid_argument("connector: latent grid must be non-empty");
    if (n_heads == 0 || latent_dim % n_heads != 0) {
      throw std::invalid_argument("connector: latent_dim " + std::to_string(latent_dim) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (llm_dim == 0) throw std::invalid_argument("connector: llm_dim must be positive");
  }

  friend bool operator==(const ConnectorConfig&, const ConnectorConfig&) = default;
};

struct EncoderGeometry {
  std::string name;
  std::size_t grid_t = 0;
  std::size_t grid_f = 0;
  std::size_t dim = 0;

  friend bool operator==(const EncoderGeometry&, const EncoderGeometry&) = default;
};

inline EncoderGeometry geometry_of(const synth::EncoderProfile& p) { return {p.name, p.grid_t, p.grid_f, p.dim}; }
inline EncoderGeometry geometry_of(const synth::EncoderOutput& o) {
  return {o.profile_name, o.grid_t, o.grid_f, o.dim};
}

inline std::vector<EncoderGeometry> geometries_of(const std::vector<synth::EncoderProfile>& profiles) {
  std::vector<EncoderGeometry> g;
  for (const auto& p : profiles) g.push_back(geometry_of(p));
  return g;
}

// Per encoder: for each latent, the encoder token indices (t * grid_f + f)
// inside its receptive field.
struct ReceptiveFieldMap {
  struct EncoderRegions {
    EncoderGeometry geometry;
    std::vector<std::vector<std::size_t>> tokens;  // [n_latents][...]
  };
  std::size_t latent_t = 0;
  std::size_t latent_f = 0;
  std::vector<EncoderRegions> encoders;

  std::size_t n_latents() const { return latent_t * latent_f; }

  // Tokens pooled over all encoders for latent i.
  std::size_t pooled_size(std::size_t latent) const {
    std::size_t n = 0;
    for (const auto& e : encoders) n += e.tokens[latent].size();
    return n;
  }
};

namespace detail {

// Cell of a normalized token center (2i+1)/(2*grid) on a `cells`-way split.
// A center landing exactly on a boundary goes to the lower cell.
inline std::size_t center_cell(std::size_t i, std::size_t grid, std::size_t cells) {
  const std::size_t num = (2 * i + 1) * cells, den = 2 * grid;
  std::size_t c = num / den;
  if (num % den == 0 && c > 0) --c;
  return std::min(c, cells - 1);
}

}  // namespace detail

inline ReceptiveFieldMap build_receptive_map(const std::vector<EncoderGeometry>& encoders,
                                             const ConnectorConfig& cfg) {
  cfg.validate();
  ReceptiveFieldMap map;
  map.latent_t = cfg.latent_t;
  map.latent_f = cfg.latent_f;
  for (const auto& g : encoders) {
    if (g.grid_t == 0 || g.grid_f == 0) throw std::invalid_argument("encoder " + g.name + ": empty token grid");
    ReceptiveFieldMap::EncoderRegions r;
    r.geometry = g;
    r.tokens.resize(cfg.n_latents());
    for (std::size_t t = 0; t < g.grid_t; ++t) {
      const std::size_t lt = detail::center_cell(t, g.grid_t, cfg.latent_t);
      for (std::size_t f = 0; f < g.grid_f; ++f) {
        const std::size_t lf = detail::center_cell(f, g.grid_f, cfg.latent_f);
        r.tokens[lt * cfg.latent_f + lf].push_back(t * g.grid_f + f);
      }
    }
    map.encoders.push_back(std::move(r));
  }
  return map;
}

inline ReceptiveFieldMap build_receptive_map(const std::vector<synth::EncoderProfile>& profiles,
                                             const ConnectorConfig& cfg) {
  return build_receptive_map(geometries_of(profiles), cfg);
}

// Latent seed and cross-attention weights. Shared across layers in shared mode.
struct ConnectorCore {
  Tensor latent_seed;  // [1 x latent_dim]
  Tensor query;        // [latent_dim x latent_dim]
  struct EncoderMaps {
    Tensor key, key_bias, value, value_bias;  // [dim_e x latent_dim], [latent_dim]
  };
  std::vector<EncoderMaps> maps;

  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".latent_seed", latent_seed);
    fn(prefix + ".query", query);
    for (std::size_t e = 0; e < maps.size(); ++e) {
      const std::string p = prefix + ".enc" + std::to_string(e);
      fn(p + ".key", maps[e].key);
      fn(p + ".key_bias", maps[e].key_bias);
      fn(p + ".value", maps[e].value);
      fn(p + ".value_bias", maps[e].value_bias);
    }
  }
};

// Per-injection-layer projection to the LLM width.
struct ConnectorProjection {
  Tensor weight;  // [latent_dim x llm_dim]
  Tensor bias;    // [llm_dim]

  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

inline ConnectorCore init_core(const ConnectorConfig& cfg, const std::vector<EncoderGeometry>& encoders,
                               SplitMix64& rng) {
  const std::size_t d = cfg.latent_dim;
  ConnectorCore c;
  c.latent_seed = random_normal({1, d}, rng, 1.0);
  c.query = random_normal({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  for (const auto& g : encoders) {
    const double s = 1.0 / std::sqrt(static_cast<double>(g.dim));
    ConnectorCore::EncoderMaps m;
    m.key = random_normal({g.dim, d}, rng, s);
    m.key_bias = Tensor::zeros({d});
    m.value = random_normal({g.dim, d}, rng, s);
    m.value_bias = Tensor::zeros({d});
    c.maps.push_back(std::move(m));
  }
  return c;
}

inline ConnectorProjection init_projection(const ConnectorConfig& cfg, SplitMix64& rng) {
  return {random_normal({cfg.latent_dim, cfg.llm_dim}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim))),
          Tensor::zeros({cfg.llm_dim})};
}

// All connectors of a model: one projection per injection layer and either one
// core per injection layer (separate) or a single core (shared).
struct ConnectorBank {
  ConnectorConfig cfg;
  std::vector<EncoderGeometry> encoders;
  std::vector<ConnectorCore> cores;
  std::vector<ConnectorProjection> projections;

  std::size_t injection_layers() const { return projections.size(); }
  ConnectorCore& core_for(std::size_t injection) { return cores[cfg.shared ? 0 : injection]; }
  const ConnectorCore& core_for(std::size_t injection) const { return cores[cfg.shared ? 0 : injection]; }

  void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t i = 0; i < cores.size(); ++i) cores[i].visit("connector.core" + std::to_string(i), fn);
    for (std::size_t i = 0; i < projections.size(); ++i)
      projections[i].visit("connector.proj" + std::to_string(i), fn);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
  }
};

inline ConnectorBank make_connector_bank(const ConnectorConfig& cfg, const std::vector<EncoderGeometry>& encoders,
                                         std::size_t injection_layers, std::uint64_t seed) {
  cfg.validate();
  if (injection_layers == 0) throw std::invalid_argument("connector bank needs at least one injection layer");
  ConnectorBank bank;
  bank.cfg = cfg;
  bank.encoders = encoders;
  SplitMix64 rng(seed);
  const std::size_t n_cores = cfg.shared ? 1 : injection_layers;
  for (std::size_t i = 0; i < n_cores; ++i) bank.cores.push_back(init_core(cfg, encoders, rng));
  for (std::size_t i = 0; i < injection_layers; ++i) bank.projections.push_back(init_projection(cfg, rng));
  bank.visit([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return bank;
}

// Closed-form parameter count. separate = L * (seed + xattn + proj);
// shared = (seed + xattn) + L * proj.
struct ConnectorParamBreakdown {
  std::size_t seed = 0, xattn = 0, proj = 0, total = 0;
};

inline ConnectorParamBreakdown connector_param_count(const ConnectorConfig& cfg,
                                                     const std::vector<EncoderGeometry>& encoders,
                                                     std::size_t injection_layers) {
  const std::size_t d = cfg.latent_dim;
  ConnectorParamBreakdown b;
  b.seed = d;
  b.xattn = d * d;
  for (const auto& g : encoders) b.xattn += 2 * (g.dim * d + d);
  b.proj = d * cfg.llm_dim + cfg.llm_dim;
  b.total = cfg.shared ? (b.seed + b.xattn) + injection_layers * b.proj
                       : injection_layers * (b.seed + b.xattn + b.proj);
  return b;
}

inline void check_outputs_match(const ReceptiveFieldMap& map, const std::vector<synth::EncoderOutput>& outputs) {
  if (outputs.size() != map.encoders.size()) {
    throw std::invalid_argument("connector: " + std::to_string(outputs.size()) + " encoder outputs for a map of " +
                                std::to_string(map.encoders.size()) + " encoders");
  }
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    if (!(geometry_of(outputs[e]) == map.encoders[e].geometry)) {
      throw std::invalid_argument("connector: encoder output '" + outputs[e].profile_name +
                                  "' does not match map entry '" + map.encoders[e].geometry.name + "'");
    }
  }
}

// Attended latent states for a batch: row b * n + i is latent i of sample b,
// equal to seed + cross-attention over its pooled receptive field (seed alone
// when the field is empty).
inline Var connector_latents(Tape& tape, ConnectorCore& core, const ReceptiveFieldMap& map,
                             std::span<const std::vector<synth::EncoderOutput>* const> batch,
                             const ConnectorConfig& cfg) {
  const std::size_t n = map.n_latents(), B = batch.size();
  if (core.maps.size() != map.encoders.size()) {
    throw std::invalid_argument("connector: core has " + std::to_string(core.maps.size()) +
                                " encoder maps, receptive map has " + std::to_string(map.encoders.size()));
  }
  for (const auto* outs : batch) check_outputs_match(map, *outs);

  std::vector<Var> keys, values;
  std::vector<std::size_t> enc_offset;
  std::size_t total_rows = 0;
  for (std::size_t e = 0; e < map.encoders.size(); ++e) {
    const auto& g = map.encoders[e].geometry;
    const std::size_t tokens = g.grid_t * g.grid_f;
    Tensor x({B * tokens, g.dim});
    for (std::size_t b = 0; b < B; ++b) {
      const auto& src = (*batch[b])[e].tokens.storage();
      std::copy(src.begin(), src.end(), x.storage().begin() + static_cast<std::ptrdiff_t>(b * tokens * g.dim));
    }
    Var xv = tape.constant(std::move(x));
    keys.push_back(ops::add_bias(ops::matmul(xv, tape.param(core.maps[e].key)), tape.param(core.maps[e].key_bias)));
    values.push_back(
        ops::add_bias(ops::matmul(xv, tape.param(core.maps[e].value)), tape.param(core.maps[e].value_bias)));
    enc_offset.push_back(total_rows);
    total_rows += B * tokens;
  }

  ops::AllowMatrix mask(B * n, total_rows);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < map.encoders.size(); ++e) {
      const auto& g = map.encoders[e].geometry;
      const std::size_t base = enc_offset[e] + b * g.grid_t * g.grid_f;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t tok : map.encoders[e].tokens[i]) mask(b * n + i, base + tok) = 1;
    }

  Var seed = tape.param(core.latent_seed);
  Var seeds = ops::repeat_rows(seed, B * n);
  if (total_rows == 0) return seeds;
  Var q = ops::repeat_rows(ops::matmul(seed, tape.param(core.query)), B * n);
  Var attended = ops::attention(q, ops::concat(keys, 0), ops::concat(values, 0), mask, cfg.n_heads);
  return ops::add(seeds, attended);
}

inline Var connector_project(Tape& tape, ConnectorProjection& proj, const Var& latents) {
  return ops::add_bias(ops::matmul(latents, tape.param(proj.weight)), tape.param(proj.bias));
}

// Single-sample evaluation: [n_latents x llm_dim].
inline Tensor connector_forward(ConnectorCore& core, ConnectorProjection& proj,
                                const std::vector<synth::EncoderOutput>& outputs, const ReceptiveFieldMap& map,
                                const ConnectorConfig& cfg) {
  Tape tape(false);
  const std::vector<synth::EncoderOutput>* one[] = {&outputs};
  return connector_project(tape, proj, connector_latents(tape, core, map, one, cfg)).value().values_only();
}

}  // namespace pal::connector
