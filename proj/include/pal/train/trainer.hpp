#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/model/transformer.hpp"
#include "pal/synth/encoder.hpp"
#include "pal/synth/sample.hpp"
#include "pal/tensor/ops.hpp"

namespace pal::train {

using synth::TaskKind;

// Mean cross-entropy of next-token predictions over masked positions; other
// positions receive exactly zero gradient.
inline Var masked_next_token_loss(const Var& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  return ops::cross_entropy(logits, targets, mask);
}

// Next-token targets for a packed batch: row p of sequence b predicts token
// p+1, and counts toward the loss when that token is part of the response.
struct NextTokenTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

inline NextTokenTargets next_token_targets(std::span<const synth::SyntheticSample* const> samples) {
  NextTokenTargets t;
  for (const auto* s : samples) {
    const auto toks = s->text_tokens();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const bool has_next = i + 1 < toks.size();
      t.targets.push_back(has_next ? toks[i + 1] : synth::kPad);
      t.mask.push_back(has_next ? s->response_mask[i + 1] : 0);
    }
  }
  return t;
}

// Linear warmup over round(warmup_ratio * total_steps) steps, then cosine decay to 0.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double peak, double warmup_ratio) {
  if (total_steps == 0) return peak;
  step = std::min(step, total_steps);
  const auto warm = static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return peak;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainableParam {
  std::string name;
  Tensor* tensor = nullptr;
};

// Decoupled weight decay: p <- p - lr*wd*p, then the bias-corrected Adam step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  void step(std::span<const TrainableParam> params, double lr) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor->size(), 0.0);
        v_.emplace_back(p.tensor->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter set changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].tensor;
      if (m_[i].size() != p.size()) throw std::invalid_argument("AdamW: shape of " + params[i].name + " changed");
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        w[j] -= lr * cfg_.weight_decay * w[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t stage, std::size_t step, const std::string& what)
      : std::runtime_error("stage " + std::to_string(stage) + " step " + std::to_string(step) + ": " + what),
        stage_(stage), step_(step) {}
  std::size_t stage() const { return stage_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t stage_, step_;
};

struct StageConfig {
  std::size_t stage_id = 1;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t grad_accumulation = 4;
  double peak_lr = 1e-3;
  double warmup_ratio = 0.05;
  bool train_llm = false;  // connectors are always trained; encoders never
  std::vector<TaskKind> tasks{TaskKind::classify};

  std::size_t micro_batch() const { return batch_size / grad_accumulation; }

  void validate() const {
    if (stage_id < 1 || stage_id > 3) throw std::invalid_argument("stage id must be 1, 2 or 3");
    if (grad_accumulation == 0 || batch_size == 0 || batch_size % grad_accumulation != 0) {
      throw std::invalid_argument("batch_size must be a positive multiple of grad_accumulation");
    }
    if (tasks.empty()) throw std::invalid_argument("stage task mix is empty");
    if (peak_lr < 0.0 || warmup_ratio < 0.0 || warmup_ratio > 1.0) throw std::invalid_argument("bad stage schedule");
  }

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

inline StageConfig default_stage(std::size_t id) {
  StageConfig s;
  s.stage_id = id;
  switch (id) {
    case 1: break;
    case 2:
      s.peak_lr = 1e-4;
      s.warmup_ratio = 0.03;
      s.train_llm = true;
      s.tasks = {TaskKind::classify, TaskKind::first_event};
      break;
    case 3:
      s.steps = 3000;
      s.peak_lr = 1e-4;
      s.warmup_ratio = 0.03;
      s.train_llm = true;
      s.tasks = {TaskKind::classify, TaskKind::first_event, TaskKind::count};
      break;
    default: throw std::invalid_argument("stage id must be 1, 2 or 3");
  }
  return s;
}

struct StepMetrics {
  std::size_t step = 0;  // global, across stages
  std::size_t stage = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct StageReport {
  std::size_t stage_id = 0;
  std::vector<double> losses;
  std::map<TaskKind, double> accuracy;  // held-out exact match, all tasks
  double wall_seconds = 0.0;
};

struct CurriculumReport {
  std::vector<StageReport> stages;
};

struct DataConfig {
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 0x5eed0e7a1ULL;
  std::size_t eval_samples = 500;
  double difficulty = 0.0;
};

// Held-out sample i of a task; shared by every configuration and seed.
inline synth::SyntheticSample eval_sample(const DataConfig& data, TaskKind task, std::size_t i) {
  return synth::generate_sample(mix_seed(data.eval_seed, static_cast<std::uint64_t>(task), i), task, data.difficulty);
}

inline synth::SyntheticSample train_sample(const DataConfig& data, const StageConfig& stage, std::size_t step,
                                           std::size_t i) {
  SplitMix64 rng(mix_seed(data.train_seed, stage.stage_id, step, i));
  const TaskKind task = stage.tasks[rng.below(stage.tasks.size())];
  return synth::generate_sample(rng(), task, data.difficulty);
}

// Exact-match accuracy of greedy decoding with max_new = answer length.
inline double evaluate_task(model::PalModel& m, const std::vector<synth::EncoderProfile>& encoders,
                            const DataConfig& data, TaskKind task, std::size_t chunk = 100) {
  std::size_t correct = 0;
  for (std::size_t base = 0; base < data.eval_samples; base += chunk) {
    const std::size_t n = std::min(chunk, data.eval_samples - base);
    std::vector<synth::SyntheticSample> samples;
    std::vector<std::vector<synth::EncoderOutput>> audio;
    samples.reserve(n);
    audio.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      samples.push_back(eval_sample(data, task, base + i));
      audio.push_back(synth::encode_all(encoders, samples.back().grid));
    }
    std::vector<model::ModelInput> prompts;
    std::size_t max_new = 0;
    for (std::size_t i = 0; i < n; ++i) {
      prompts.push_back(model::input_from_sample(samples[i], &audio[i], false));
      max_new = std::max(max_new, samples[i].answer_tokens().size());
    }
    auto out = model::decode_greedy_batch(m, prompts, max_new);
    for (std::size_t i = 0; i < n; ++i) {
      auto answer = samples[i].answer_tokens();
      if (out[i].size() > answer.size()) out[i].resize(answer.size());
      correct += out[i] == answer ? 1 : 0;
    }
  }
  return data.eval_samples ? static_cast<double>(correct) / static_cast<double>(data.eval_samples) : 0.0;
}

inline std::map<TaskKind, double> evaluate_all(model::PalModel& m, const std::vector<synth::EncoderProfile>& encoders,
                                               const DataConfig& data) {
  std::map<TaskKind, double> acc;
  for (TaskKind t : {TaskKind::classify, TaskKind::first_event, TaskKind::count})
    acc[t] = evaluate_task(m, encoders, data, t);
  return acc;
}

// Marks the stage's trainable set and returns it in visiting order.
inline std::vector<TrainableParam> select_trainable(model::PalModel& m, const StageConfig& stage) {
  std::vector<TrainableParam> out;
  m.visit_llm([&](const std::string& n, Tensor& t) {
    t.clear_grad();
    t.set_requires_grad(stage.train_llm);
    if (stage.train_llm) out.push_back({n, &t});
  });
  m.visit_connectors([&](const std::string& n, Tensor& t) {
    t.clear_grad();
    t.set_requires_grad(true);
    out.push_back({n, &t});
  });
  return out;
}

struct StageHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::size_t global_step_offset = 0;
  model::ForwardProbe* probe = nullptr;  // instruments every training forward pass
};

// One curriculum stage: `steps` AdamW updates of batch_size samples each,
// accumulated over grad_accumulation micro-batches, then held-out evaluation.
inline StageReport run_stage(const StageConfig& stage, model::PalModel& m,
                             const std::vector<synth::EncoderProfile>& encoders, const DataConfig& data,
                             const StageHooks& hooks = {}, const AdamWConfig& opt_cfg = {}) {
  stage.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto params = select_trainable(m, stage);
  AdamW opt(opt_cfg);
  StageReport rep;
  rep.stage_id = stage.stage_id;
  const std::size_t micro = stage.micro_batch();
  for (std::size_t step = 0; step < stage.steps; ++step) {
    const double lr = cosine_lr(step, stage.steps, stage.peak_lr, stage.warmup_ratio);
    for (auto& p : params) p.tensor->zero_grad();
    double loss_sum = 0.0;
    try {
      for (std::size_t a = 0; a < stage.grad_accumulation; ++a) {
        std::vector<synth::SyntheticSample> samples;
        std::vector<std::vector<synth::EncoderOutput>> audio;
        samples.reserve(micro);
        audio.reserve(micro);
        for (std::size_t i = 0; i < micro; ++i) {
          samples.push_back(train_sample(data, stage, step, a * micro + i));
          audio.push_back(synth::encode_all(encoders, samples.back().grid));
        }
        std::vector<model::ModelInput> inputs;
        std::vector<const synth::SyntheticSample*> ptrs;
        for (std::size_t i = 0; i < micro; ++i) {
          inputs.push_back(model::input_from_sample(samples[i], &audio[i]));
          ptrs.push_back(&samples[i]);
        }
        const auto tgt = next_token_targets(ptrs);
        Tape tape;
        auto res = model::forward_batch(tape, m, inputs, {hooks.probe});
        Var loss = masked_next_token_loss(res.logits, tgt.targets, tgt.mask);
        loss_sum += loss.value().item();
        tape.backward(ops::scale(loss, 1.0 / static_cast<double>(stage.grad_accumulation)));
      }
    } catch (const NonFiniteError& e) {
      throw TrainingError(stage.stage_id, step, e.what());
    }
    const double loss = loss_sum / static_cast<double>(stage.grad_accumulation);
    if (!std::isfinite(loss)) throw TrainingError(stage.stage_id, step, "non-finite loss");
    opt.step(params, lr);
    rep.losses.push_back(loss);
    if (hooks.on_step) hooks.on_step({hooks.global_step_offset + step, stage.stage_id, lr, loss});
  }
  for (auto& p : params) {
    p.tensor->clear_grad();
    p.tensor->set_requires_grad(false);
  }
  rep.accuracy = evaluate_all(m, encoders, data);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct CurriculumHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const StageReport&, model::PalModel&)> on_stage_end;
  model::ForwardProbe* probe = nullptr;
};

// Stages run in order with parameters carried forward and a fresh optimizer
// per stage.
inline CurriculumReport run_curriculum(const std::vector<StageConfig>& stages, model::PalModel& m,
                                       const std::vector<synth::EncoderProfile>& encoders, const DataConfig& data,
                                       const CurriculumHooks& hooks = {}) {
  CurriculumReport rep;
  std::size_t offset = 0;
  for (const auto& s : stages) {
    rep.stages.push_back(run_stage(s, m, encoders, data, {hooks.on_step, offset, hooks.probe}));
    offset += s.steps;
    if (hooks.on_stage_end) hooks.on_stage_end(rep.stages.back(), m);
  }
  return rep;
}

}  // namespace pal::train
