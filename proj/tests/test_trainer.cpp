#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pal/train/trainer.hpp"

using namespace pal;
using namespace pal::train;

namespace {

model::PalModel mini_model(const model::FusionMode& mode, const std::vector<synth::EncoderProfile>& enc,
                           std::uint64_t seed = 1) {
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 32;
  connector::ConnectorConfig ccfg;
  ccfg.latent_dim = 8;
  return model::make_model(cfg, mode, ccfg, connector::geometries_of(enc), seed);
}

StageConfig short_stage(std::size_t id, std::size_t steps) {
  StageConfig s = default_stage(id);
  s.steps = steps;
  return s;
}

std::vector<Tensor> snapshot(model::PalModel& m, bool llm) {
  std::vector<Tensor> out;
  auto take = [&](const std::string&, Tensor& t) { out.push_back(t.values_only()); };
  if (llm) m.visit_llm(take);
  else m.visit_connectors(take);
  return out;
}

bool unchanged(model::PalModel& m, bool llm, const std::vector<Tensor>& before) {
  std::size_t i = 0;
  bool same = true;
  auto cmp = [&](const std::string&, Tensor& t) { same = same && t.same_values(before[i++]); };
  if (llm) m.visit_llm(cmp);
  else m.visit_connectors(cmp);
  return same;
}

}  // namespace

TEST(LossTest, UniformLogitsGiveLogVocab) {
  Tape t;
  Var logits = t.constant(Tensor::zeros({5, 64}));
  std::vector<int> targets{1, 2, 3, 4, 5};
  std::vector<std::uint8_t> mask{0, 1, 1, 0, 1};
  EXPECT_NEAR(masked_next_token_loss(logits, targets, mask).value().item(), std::log(64.0), 1e-9);
}

TEST(LossTest, ConfidentCorrectPredictionIsNearZero) {
  Tensor l = Tensor::zeros({4, 64});
  std::vector<int> targets{7, 0, 63, 21};
  for (std::size_t r = 0; r < 4; ++r) l[r * 64 + static_cast<std::size_t>(targets[r])] = 30.0;
  Tape t;
  std::vector<std::uint8_t> mask{1, 1, 1, 1};
  EXPECT_LT(masked_next_token_loss(t.constant(l), targets, mask).value().item(), 1e-6);
}

TEST(LossTest, MatchesScalarOracle) {
  SplitMix64 rng(4);
  Tensor l = random_normal({6, 64}, rng, 2.0);
  std::vector<int> targets{3, 9, 60, 0, 12, 33};
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  double total = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (!mask[r]) continue;
    double mx = -1e300;
    for (std::size_t c = 0; c < 64; ++c) mx = std::max(mx, l.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < 64; ++c) z += std::exp(l.at(r, c) - mx);
    total += mx + std::log(z) - l.at(r, static_cast<std::size_t>(targets[r]));
    ++n;
  }
  Tape t;
  EXPECT_NEAR(masked_next_token_loss(t.constant(l), targets, mask).value().item(), total / n, 1e-12);
}

TEST(LossTest, UnmaskedRowsGetExactlyZeroGradient) {
  SplitMix64 rng(5);
  Tensor l = random_normal({5, 64}, rng, 1.0);
  l.set_requires_grad(true);
  std::vector<int> targets{1, 2, 3, 4, 5};
  std::vector<std::uint8_t> mask{0, 1, 0, 0, 1};
  Tape t;
  t.backward(masked_next_token_loss(t.param(l), targets, mask));
  for (std::size_t r = 0; r < 5; ++r) {
    if (mask[r]) continue;
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(l.grad()[r * 64 + c], 0.0);
  }
  EXPECT_NE(l.grad()[64 + 2], 0.0);
}

TEST(LossTest, EmptyMaskIsError) {
  Tape t;
  std::vector<int> targets{1, 2};
  std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(masked_next_token_loss(t.constant(Tensor::zeros({2, 64})), targets, mask), std::invalid_argument);
}

TEST(LossTest, TargetsCoverResponseOnly) {
  auto s = synth::generate_sample(3, synth::TaskKind::count);
  const synth::SyntheticSample* one[] = {&s};
  auto t = next_token_targets(one);
  const auto toks = s.text_tokens();
  ASSERT_EQ(t.targets.size(), toks.size());
  std::size_t masked = 0;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (!t.mask[i]) continue;
    ++masked;
    EXPECT_GE(i + 1, s.prompt_tokens.size());
    EXPECT_EQ(t.targets[i], toks[i + 1]);
  }
  EXPECT_EQ(masked, s.response_tokens.size());
  EXPECT_EQ(t.targets[s.prompt_tokens.size() - 1], s.response_tokens[0]);
}

TEST(ScheduleTest, CosineBoundaries) {
  EXPECT_EQ(cosine_lr(0, 2000, 1e-3, 0.05), 0.0);
  EXPECT_EQ(cosine_lr(100, 2000, 1e-3, 0.05), 1e-3);
  EXPECT_NEAR(cosine_lr(50, 2000, 1e-3, 0.05), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(2000, 2000, 1e-3, 0.05), 0.0, 1e-12);
  EXPECT_NEAR(cosine_lr(1050, 2000, 1e-3, 0.05), 5e-4, 1e-9);
  EXPECT_NEAR(cosine_lr(90, 3000, 1e-4, 0.03), 1e-4, 0.0);
  for (std::size_t s = 100; s < 2000; ++s) EXPECT_LE(cosine_lr(s + 1, 2000, 1e-3, 0.05), cosine_lr(s, 2000, 1e-3, 0.05));
}

TEST(OptimizerTest, FirstStepOnQuadraticMatchesHand) {
  // f(x) = 0.5 * sum a_i x_i^2, gradient a_i x_i.
  Tensor x(Shape{4}, std::vector<double>{1.5, -0.3, 2.0, 1e-9});
  const std::vector<double> a{2.0, 5.0, 0.1, 1.0};
  const auto x0 = std::vector<double>(x.data().begin(), x.data().end());
  x.set_requires_grad(true);
  Tape t;
  Var xv = t.param(x);
  Var ac = t.constant(Tensor(Shape{4}, a));
  t.backward(ops::scale(ops::sum(ops::mul(ac, ops::mul(xv, xv))), 0.5));
  AdamW opt;
  std::vector<TrainableParam> ps{{"x", &x}};
  const double lr = 0.01;
  opt.step(ps, lr);
  for (std::size_t i = 0; i < 4; ++i) {
    const double g = a[i] * x0[i];
    // m_hat = g, v_hat = g^2 after bias correction on the first step.
    const double expect = x0[i] * (1.0 - lr * 0.01) - lr * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(x[i], expect, 1e-10) << i;
  }
  EXPECT_EQ(opt.steps(), 1u);
  EXPECT_NEAR(opt.first_moment(0)[0], 0.1 * a[0] * x0[0], 1e-15);
}

TEST(StageTest, DefaultsFollowCurriculum) {
  auto s1 = default_stage(1), s2 = default_stage(2), s3 = default_stage(3);
  EXPECT_EQ(s1.steps, 2000u);
  EXPECT_EQ(s2.steps, 2000u);
  EXPECT_EQ(s3.steps, 3000u);
  EXPECT_EQ(s1.peak_lr, 1e-3);
  EXPECT_EQ(s2.peak_lr, 1e-4);
  EXPECT_EQ(s1.warmup_ratio, 0.05);
  EXPECT_EQ(s3.warmup_ratio, 0.03);
  EXPECT_FALSE(s1.train_llm);
  EXPECT_TRUE(s2.train_llm && s3.train_llm);
  EXPECT_EQ(s1.batch_size, 16u);
  EXPECT_EQ(s1.grad_accumulation, 4u);
  EXPECT_EQ(s3.tasks.size(), 3u);
  EXPECT_THROW(default_stage(4), std::invalid_argument);
}

TEST(StageTest, FreezeIntegrity) {
  auto enc = synth::make_default_ensemble(7);
  const auto enc_before = enc[0].projection.values_only();
  auto m = mini_model(model::FusionMode::attention_only(1), enc);
  DataConfig data;
  data.eval_samples = 10;
  auto llm0 = snapshot(m, true), conn0 = snapshot(m, false);
  run_stage(short_stage(1, 5), m, enc, data);
  EXPECT_TRUE(unchanged(m, true, llm0));
  EXPECT_FALSE(unchanged(m, false, conn0));
  auto conn1 = snapshot(m, false);
  run_stage(short_stage(2, 5), m, enc, data);
  EXPECT_FALSE(unchanged(m, true, llm0));
  EXPECT_FALSE(unchanged(m, false, conn1));
  EXPECT_TRUE(enc[0].projection.same_values(enc_before));
}

TEST(StageTest, SharedCoreStaysSingleAfterUpdates) {
  auto enc = synth::make_default_ensemble(7);
  auto m = mini_model(model::FusionMode::attention_only(1, true), enc);
  DataConfig data;
  data.eval_samples = 5;
  auto seed0 = m.connectors.cores[0].latent_seed.values_only();
  run_stage(short_stage(1, 3), m, enc, data);
  ASSERT_EQ(m.connectors.cores.size(), 1u);
  EXPECT_EQ(&m.connectors.core_for(0), &m.connectors.core_for(1));
  EXPECT_FALSE(m.connectors.cores[0].latent_seed.same_values(seed0));
}

TEST(StageTest, LossTrendsDown) {
  auto enc = synth::make_default_ensemble(7);
  auto m = mini_model(model::FusionMode::attention_only(1), enc);
  DataConfig data;
  data.eval_samples = 10;
  auto stage = short_stage(1, 150);
  stage.peak_lr = 1e-2;
  auto rep = run_stage(stage, m, enc, data);
  const double head = std::accumulate(rep.losses.begin(), rep.losses.begin() + 20, 0.0) / 20;
  const double tail = std::accumulate(rep.losses.end() - 20, rep.losses.end(), 0.0) / 20;
  EXPECT_LT(tail, head);
}

TEST(StageTest, SameSeedSameNumbers) {
  auto enc = synth::make_default_ensemble(7);
  DataConfig data;
  data.train_seed = 9;
  data.eval_samples = 20;
  std::vector<StageConfig> stages{short_stage(1, 4), short_stage(2, 3), short_stage(3, 3)};
  std::vector<std::vector<double>> runs;
  for (int r = 0; r < 2; ++r) {
    auto m = mini_model(model::FusionMode::delayed(2), enc, 5);
    std::vector<double> trace;
    auto rep = run_curriculum(stages, m, enc, data, {[&](const StepMetrics& s) {
                                trace.push_back(static_cast<double>(s.step));
                                trace.push_back(s.lr);
                                trace.push_back(s.loss);
                              }, nullptr});
    ASSERT_EQ(rep.stages.size(), 3u);
    for (const auto& st : rep.stages)
      for (const auto& [task, acc] : st.accuracy) trace.push_back(acc);
    runs.push_back(trace);
  }
  EXPECT_EQ(runs[0], runs[1]);
  EXPECT_EQ(runs[0][3 * 9], 9.0);  // global step counter continues across stages
}

TEST(StageTest, NonFiniteAbortsWithStep) {
  auto enc = synth::make_default_ensemble(7);
  auto m = mini_model(model::FusionMode::baseline(), enc);
  for (double& v : m.llm.embedding.data()) v = std::numeric_limits<double>::infinity();
  DataConfig data;
  try {
    run_stage(short_stage(1, 3), m, enc, data);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 0u);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(EvalTest, HeldOutSetIsFixedAndAccuracyBounded) {
  DataConfig a, b;
  b.train_seed = 12345;
  EXPECT_EQ(eval_sample(a, TaskKind::classify, 3).seed, eval_sample(b, TaskKind::classify, 3).seed);
  auto enc = synth::make_default_ensemble(7);
  auto m = mini_model(model::FusionMode::baseline(), enc);
  a.eval_samples = 30;
  const double acc = evaluate_task(m, enc, a, TaskKind::count);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}
