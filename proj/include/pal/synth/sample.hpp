#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pal/synth/vocabulary.hpp"
#include "pal/tensor/random.hpp"
#include "pal/tensor/tensor.hpp"

namespace pal::synth {

inline constexpr std::size_t kGridT = 16;
inline constexpr std::size_t kGridF = 8;
inline constexpr double kNoiseStd = 0.1;
inline constexpr double kGridBound = 4.0;
inline constexpr double kBandWidth = 0.6;   // Gaussian sigma along frequency, in bins
inline constexpr double kMaxBandJitter = 0.3;

enum class TaskKind { classify, first_event, count };

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::classify: return "classify";
    case TaskKind::first_event: return "first_event";
    case TaskKind::count: return "count";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view s) {
  if (s == "classify") return TaskKind::classify;
  if (s == "first_event") return TaskKind::first_event;
  if (s == "count") return TaskKind::count;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

// Classes share one of eight frequency bands; the upper half of the class
// range has negative polarity.
inline int class_band(int class_id) { return class_id % static_cast<int>(kGridF); }
inline double class_polarity(int class_id) { return class_id < kNumClasses / 2 ? 1.0 : -1.0; }

struct EventSpec {
  int class_id = 0;
  int onset = 0;
  int duration = 2;
  int band_center = 0;
  // Sub-bin render jitter, |band_offset| <= kMaxBandJitter.
  double band_offset = 0.0;
  double amplitude = 1.0;

  double rendered_center() const { return band_center + band_offset; }
  friend bool operator==(const EventSpec&, const EventSpec&) = default;
};

struct FeatureGrid {
  Tensor values;  // [T x F]
  std::size_t frames() const { return values.dim(0); }
  std::size_t bins() const { return values.dim(1); }
};

struct SyntheticSample {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::classify;
  double difficulty = 0.0;
  FeatureGrid grid;
  std::vector<EventSpec> events;  // sorted by onset
  std::vector<int> prompt_tokens;  // system span followed by the user question
  std::vector<int> response_tokens;
  std::size_t system_len = 0;
  // Over prompt_tokens ++ response_tokens; set exactly on response positions.
  std::vector<std::uint8_t> response_mask;

  std::vector<int> text_tokens() const {
    std::vector<int> t = prompt_tokens;
    t.insert(t.end(), response_tokens.begin(), response_tokens.end());
    return t;
  }

  // Response without the trailing end-of-sequence marker.
  std::vector<int> answer_tokens() const {
    std::vector<int> a = response_tokens;
    if (!a.empty() && a.back() == kEos) a.pop_back();
    return a;
  }
};

inline std::vector<int> system_prompt() {
  return {kBos, Vocabulary::instance().id("audio"), Vocabulary::instance().id("assistant")};
}

inline std::vector<int> question_for(TaskKind task) {
  const auto& v = Vocabulary::instance();
  switch (task) {
    case TaskKind::classify: return v.encode("<q> which sound is heard <a>");
    case TaskKind::first_event: return v.encode("<q> which sound happens first <a>");
    case TaskKind::count: return v.encode("<q> how many events <a>");
  }
  return {};
}

// The answer is a pure function of the events.
inline std::vector<int> answer_for(TaskKind task, const std::vector<EventSpec>& events) {
  switch (task) {
    case TaskKind::classify: return {class_token(events.at(0).class_id)};
    case TaskKind::first_event: {
      auto first = std::min_element(events.begin(), events.end(),
                                    [](const EventSpec& a, const EventSpec& b) { return a.onset < b.onset; });
      return {class_token(first->class_id)};
    }
    case TaskKind::count: return {count_token(static_cast<int>(events.size()))};
  }
  return {};
}

inline void render_event(Tensor& grid, const EventSpec& e) {
  const std::size_t f_bins = grid.dim(1);
  for (int t = e.onset; t < e.onset + e.duration; ++t) {
    const double w = std::sin(std::numbers::pi * (t - e.onset + 0.5) / e.duration);
    for (std::size_t f = 0; f < f_bins; ++f) {
      const double df = static_cast<double>(f) - e.rendered_center();
      grid.at(static_cast<std::size_t>(t), f) +=
          e.amplitude * class_polarity(e.class_id) * w * std::exp(-df * df / (2.0 * kBandWidth * kBandWidth));
    }
  }
}

namespace detail {

inline EventSpec draw_event(SplitMix64& rng, int class_id, int onset, int duration) {
  EventSpec e;
  e.class_id = class_id;
  e.onset = onset;
  e.duration = duration;
  e.band_center = class_band(class_id);
  e.band_offset = rng.uniform(-kMaxBandJitter, kMaxBandJitter);
  e.amplitude = rng.uniform(1.2, 2.0);
  return e;
}

// Two time-disjoint events with distinct classes.
inline std::vector<EventSpec> draw_event_pair(SplitMix64& rng) {
  const int T = static_cast<int>(kGridT);
  const int c1 = static_cast<int>(rng.below(kNumClasses));
  int c2 = static_cast<int>(rng.below(kNumClasses - 1));
  if (c2 >= c1) ++c2;
  const int d1 = rng.range(2, 5), d2 = rng.range(2, 5);
  const int a = rng.range(0, T - d1 - d2);
  const int b = rng.range(a + d1, T - d2);
  return {draw_event(rng, c1, a, d1), draw_event(rng, c2, b, d2)};
}

}  // namespace detail

// Deterministic in (seed, task, difficulty). Difficulty scales the noise.
inline SyntheticSample generate_sample(std::uint64_t seed, TaskKind task, double difficulty = 0.0) {
  if (difficulty < 0.0) throw std::invalid_argument("difficulty must be non-negative");
  SplitMix64 rng(mix_seed(seed, 0x5A3D1Eull));
  SyntheticSample s;
  s.seed = seed;
  s.task = task;
  s.difficulty = difficulty;

  const int T = static_cast<int>(kGridT);
  switch (task) {
    case TaskKind::classify: {
      const int c = static_cast<int>(rng.below(kNumClasses));
      const int d = rng.range(2, 6);
      s.events.push_back(detail::draw_event(rng, c, rng.range(0, T - d), d));
      break;
    }
    case TaskKind::first_event: s.events = detail::draw_event_pair(rng); break;
    case TaskKind::count: {
      if (rng.below(2) == 0) {
        const int c = static_cast<int>(rng.below(kNumClasses));
        const int d = rng.range(2, 6);
        s.events.push_back(detail::draw_event(rng, c, rng.range(0, T - d), d));
      } else {
        s.events = detail::draw_event_pair(rng);
      }
      break;
    }
  }

  Tensor g({kGridT, kGridF});
  for (const auto& e : s.events) render_event(g, e);
  const double noise = kNoiseStd * (1.0 + difficulty);
  for (double& v : g.data()) v = std::clamp(v + rng.normal(0.0, noise), -kGridBound, kGridBound);
  s.grid.values = std::move(g);

  s.prompt_tokens = system_prompt();
  s.system_len = s.prompt_tokens.size();
  const auto q = question_for(task);
  s.prompt_tokens.insert(s.prompt_tokens.end(), q.begin(), q.end());
  s.response_tokens = answer_for(task, s.events);
  s.response_tokens.push_back(kEos);
  s.response_mask.assign(s.prompt_tokens.size(), 0);
  s.response_mask.insert(s.response_mask.end(), s.response_tokens.size(), 1);
  return s;
}

}  // namespace pal::synth
