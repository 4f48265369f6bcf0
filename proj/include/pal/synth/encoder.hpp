#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/synth/sample.hpp"
#include "pal/tensor/random.hpp"
#include "pal/tensor/tensor.hpp"

namespace pal::synth {

// Frozen random patch encoder standing in for a pretrained audio encoder.
struct EncoderProfile {
  std::string name;
  std::size_t grid_t = 0;
  std::size_t grid_f = 0;
  std::size_t dim = 0;
  std::size_t input_t = kGridT;
  std::size_t input_f = kGridF;
  std::uint64_t seed = 0;
  Tensor projection;  // [patch_t * patch_f x dim], never trained

  std::size_t patch_t() const { return input_t / grid_t; }
  std::size_t patch_f() const { return input_f / grid_f; }
  std::size_t patch_size() const { return patch_t() * patch_f(); }
  std::size_t token_count() const { return grid_t * grid_f; }
};

inline EncoderProfile make_profile(std::string name, std::size_t grid_t, std::size_t grid_f, std::size_t dim,
                                   std::uint64_t seed, std::size_t input_t = kGridT, std::size_t input_f = kGridF) {
  if (grid_t == 0 || grid_f == 0 || dim == 0) throw std::invalid_argument("encoder " + name + ": empty geometry");
  if (input_t % grid_t != 0 || input_f % grid_f != 0) {
    throw std::invalid_argument("encoder " + name + ": grid " + std::to_string(grid_t) + "x" +
                                std::to_string(grid_f) + " does not tile input " + std::to_string(input_t) + "x" +
                                std::to_string(input_f));
  }
  EncoderProfile p;
  p.name = std::move(name);
  p.grid_t = grid_t;
  p.grid_f = grid_f;
  p.dim = dim;
  p.input_t = input_t;
  p.input_f = input_f;
  p.seed = seed;
  SplitMix64 rng(seed);
  p.projection = random_normal({p.patch_size(), dim}, rng, 1.0 / std::sqrt(static_cast<double>(p.patch_size())));
  return p;
}

struct EncoderOutput {
  std::string profile_name;
  std::size_t grid_t = 0;
  std::size_t grid_f = 0;
  std::size_t dim = 0;
  Tensor tokens;  // [grid_t x grid_f x dim]

  std::size_t token_count() const { return grid_t * grid_f; }
};

// Each (t, f) patch is flattened time-major and multiplied by the projection.
inline EncoderOutput encoder_forward(const EncoderProfile& profile, const FeatureGrid& grid) {
  const Tensor& g = grid.values;
  if (g.rank() != 2 || g.dim(0) != profile.input_t || g.dim(1) != profile.input_f) {
    throw DimensionError("encoder " + profile.name + ": expects grid [" + std::to_string(profile.input_t) + "x" +
                         std::to_string(profile.input_f) + "], got " + shape_str(g.shape()));
  }
  const std::size_t pt = profile.patch_t(), pf = profile.patch_f(), dim = profile.dim;
  EncoderOutput out;
  out.profile_name = profile.name;
  out.grid_t = profile.grid_t;
  out.grid_f = profile.grid_f;
  out.dim = dim;
  out.tokens = Tensor({profile.grid_t, profile.grid_f, dim});
  std::vector<double> patch(pt * pf);
  for (std::size_t t = 0; t < profile.grid_t; ++t) {
    for (std::size_t f = 0; f < profile.grid_f; ++f) {
      for (std::size_t a = 0; a < pt; ++a)
        for (std::size_t b = 0; b < pf; ++b) patch[a * pf + b] = g.at(t * pt + a, f * pf + b);
      double* tok = &out.tokens[(t * profile.grid_f + f) * dim];
      for (std::size_t k = 0; k < patch.size(); ++k) {
        const double x = patch[k];
        if (x == 0.0) continue;
        const double* row = profile.projection.data().data() + k * dim;
        for (std::size_t c = 0; c < dim; ++c) tok[c] += x * row[c];
      }
    }
  }
  return out;
}

// fine 8x4 (dim 48) plus three frequency-global 4x1 encoders (dim 32).
inline std::vector<EncoderProfile> make_default_ensemble(std::uint64_t master_seed) {
  std::vector<EncoderProfile> e;
  e.push_back(make_profile("fine", 8, 4, 48, mix_seed(master_seed, 1)));
  e.push_back(make_profile("general", 4, 1, 32, mix_seed(master_seed, 2)));
  e.push_back(make_profile("music", 4, 1, 32, mix_seed(master_seed, 3)));
  e.push_back(make_profile("speech", 4, 1, 32, mix_seed(master_seed, 4)));
  return e;
}

inline std::vector<EncoderOutput> encode_all(const std::vector<EncoderProfile>& profiles, const FeatureGrid& grid) {
  std::vector<EncoderOutput> out;
  out.reserve(profiles.size());
  for (const auto& p : profiles) out.push_back(encoder_forward(p, grid));
  return out;
}

}  // namespace pal::synth
