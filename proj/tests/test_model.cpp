#include <gtest/gtest.h>

#include <cmath>

#include "pal/model/transformer.hpp"
#include "pal/synth/encoder.hpp"
#include "pal/tensor/gradcheck.hpp"

using namespace pal;
using namespace pal::model;

namespace {

struct Fixture {
  std::vector<synth::EncoderProfile> encoders = synth::make_default_ensemble(7);
  std::vector<synth::SyntheticSample> samples;
  std::vector<std::vector<synth::EncoderOutput>> audio;

  explicit Fixture(std::size_t n, std::uint64_t seed = 100) {
    for (std::size_t i = 0; i < n; ++i) {
      auto s = synth::generate_sample(seed + i, static_cast<synth::TaskKind>(i % 3));
      audio.push_back(synth::encode_all(encoders, s.grid));
      samples.push_back(std::move(s));
    }
  }
  ModelInput input(std::size_t i, bool with_audio = true) const {
    return input_from_sample(samples[i], with_audio ? &audio[i] : nullptr);
  }
};

PalModel default_model(const FusionMode& mode, const Fixture& fx, std::uint64_t seed = 3) {
  return make_model(ModelConfig{}, mode, connector::ConnectorConfig{}, connector::geometries_of(fx.encoders), seed);
}

std::vector<FusionMode> all_modes() {
  return {FusionMode::baseline(), FusionMode::delayed(5), FusionMode::attention_only(5),
          FusionMode::attention_only(5, true)};
}

double max_abs_diff_rows(const Tensor& a, const Tensor& b, std::size_t r0, std::size_t r1) {
  double m = 0.0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.at(r, c) - b.at(r, c)));
  return m;
}

// Straightforward single-sequence text decoder written directly against the
// primitives, used as the reference for the audio-free reduction.
Tensor reference_text_decoder(PalModel& m, const std::vector<int>& tokens) {
  Tape t(false);
  const std::size_t n = tokens.size();
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);
  ops::AllowMatrix causal(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal(i, j) = 1;
  Var h = ops::embedding(t.param(m.llm.embedding), tokens);
  for (auto& lp : m.llm.layers) {
    Var x = ops::rmsnorm(h, t.param(lp.attn_norm));
    Var q = ops::rope(ops::matmul(x, t.param(lp.wq)), pos, m.cfg.n_heads);
    Var k = ops::rope(ops::matmul(x, t.param(lp.wk)), pos, m.cfg.n_heads);
    Var v = ops::matmul(x, t.param(lp.wv));
    h = ops::add(h, ops::matmul(ops::attention(q, k, v, causal, m.cfg.n_heads), t.param(lp.wo)));
    Var f = ops::rmsnorm(h, t.param(lp.ffn_norm));
    Var g = ops::mul(ops::silu(ops::matmul(f, t.param(lp.w_gate))), ops::matmul(f, t.param(lp.w_up)));
    h = ops::add(h, ops::matmul(g, t.param(lp.w_down)));
  }
  return ops::matmul(ops::rmsnorm(h, t.param(m.llm.final_norm)), t.param(m.llm.lm_head)).value().values_only();
}

}  // namespace

TEST(MaskTest, NoAudioIsCausalTriangle) {
  for (const auto& mode : all_modes()) {
    auto layout = make_layout(3, 6, 2, 0, mode);
    for (std::size_t l = 1; l <= 8; ++l) {
      auto m = build_attention_mask(layout, mode, l, 8);
      ASSERT_EQ(m.rows.size(), 11u);
      ASSERT_EQ(m.cols.size(), 11u);
      for (std::size_t r = 0; r < 11; ++r)
        for (std::size_t c = 0; c < 11; ++c) EXPECT_EQ(m.allowed(r, c), c <= r ? 1 : 0);
    }
  }
}

TEST(MaskTest, BaselineUserRowSeesSystemAudioAndItself) {
  auto mode = FusionMode::baseline();
  auto layout = make_layout(3, 5, 4, 8, mode);
  auto m = build_attention_mask(layout, mode, 1, 8);
  ASSERT_EQ(m.rows.size(), 20u);
  // Brute force over the materialized stream order sys(3) audio(8) user(5) resp(4).
  const auto tags = layout.stream_tags();
  for (std::size_t r = 0; r < 20; ++r) {
    EXPECT_EQ(m.rows[r].tag, tags[r]);
    for (std::size_t c = 0; c < 20; ++c) EXPECT_EQ(m.allowed(r, c), c <= r ? 1 : 0);
  }
  std::size_t user0 = layout.user().start, allowed = 0;
  for (std::size_t c = 0; c < 20; ++c) allowed += m.allowed(user0, c);
  EXPECT_EQ(allowed, 12u);
}

TEST(MaskTest, DelayedPreInjectionLayersHaveNoAudio) {
  auto mode = FusionMode::delayed(5);
  auto layout = make_layout(3, 5, 4, 8, mode);
  for (std::size_t l = 1; l <= 8; ++l) {
    auto m = build_attention_mask(layout, mode, l, 8);
    std::size_t audio = 0;
    for (const auto& e : m.cols) audio += e.is_audio();
    EXPECT_EQ(audio, l < 5 ? 0u : 8u) << "layer " << l;
    EXPECT_EQ(m.rows.size(), l < 5 ? 12u : 20u);
  }
}

TEST(MaskTest, AttentionOnlyAudioIsKeyValueOnly) {
  auto mode = FusionMode::attention_only(5);
  auto layout = make_layout(3, 5, 4, 8, mode);
  EXPECT_EQ(layout.audio().length, 0u);
  auto m = build_attention_mask(layout, mode, 6, 8);
  ASSERT_EQ(m.rows.size(), 12u);
  ASSERT_EQ(m.cols.size(), 20u);
  for (const auto& e : m.rows) EXPECT_FALSE(e.is_audio());
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    for (std::size_t c = 0; c < m.cols.size(); ++c) {
      bool expect;
      if (m.cols[c].is_audio()) expect = m.rows[r].tag != Modality::system;
      else expect = m.cols[c].index <= m.rows[r].index;
      EXPECT_EQ(m.allowed(r, c), expect ? 1 : 0) << r << "," << c;
    }
  }
  auto early = build_attention_mask(layout, mode, 4, 8);
  EXPECT_EQ(early.cols.size(), 12u);
}

TEST(MaskTest, LayerOutOfRangeAndInconsistentLayoutThrow) {
  auto mode = FusionMode::baseline();
  auto layout = make_layout(3, 5, 4, 8, mode);
  EXPECT_THROW(build_attention_mask(layout, mode, 0, 8), std::out_of_range);
  EXPECT_THROW(build_attention_mask(layout, mode, 9, 8), std::out_of_range);
  EXPECT_THROW(build_attention_mask(layout, FusionMode::attention_only(5), 6, 8), std::invalid_argument);
}

TEST(FusionModeTest, BoundsAndConnectorCounts) {
  EXPECT_THROW(FusionMode::delayed(0).validate(8), std::invalid_argument);
  EXPECT_THROW(FusionMode::delayed(9).validate(8), std::invalid_argument);
  EXPECT_NO_THROW(FusionMode::delayed(8).validate(8));
  EXPECT_THROW(FusionMode::attention_only(0).validate(8), std::invalid_argument);
  EXPECT_EQ(FusionMode::baseline().connector_count(8), 1u);
  EXPECT_EQ(FusionMode::delayed(5).connector_count(8), 1u);
  EXPECT_EQ(FusionMode::attention_only(5).connector_count(8), 4u);
  EXPECT_EQ(FusionMode::attention_only(1).connector_count(8), 8u);
}

TEST(ForwardTest, AudioFreeInputReducesToPlainDecoder) {
  Fixture fx(3);
  Tensor ref;
  for (const auto& mode : all_modes()) {
    auto m = default_model(mode, fx);
    for (std::size_t i = 0; i < 3; ++i) {
      Tensor y = forward(m, fx.input(i, false));
      Tensor r = reference_text_decoder(m, fx.samples[i].text_tokens());
      ASSERT_EQ(y.shape(), r.shape());
      EXPECT_TRUE(y.same_values(r)) << mode.describe();
    }
  }
}

TEST(ForwardTest, DelayedAtOneEqualsBaseline) {
  Fixture fx(6);
  auto base = default_model(FusionMode::baseline(), fx, 9);
  auto del = default_model(FusionMode::delayed(1), fx, 9);
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor a = forward(base, fx.input(i)), b = forward(del, fx.input(i));
    EXPECT_LE(max_abs_diff_rows(a, b, 0, a.rows()), 1e-12);
  }
}

TEST(ForwardTest, DelayedPrefixMatchesTextOnlyRun) {
  Fixture fx(4);
  auto m = default_model(FusionMode::delayed(5), fx);
  for (std::size_t i = 0; i < 4; ++i) {
    ForwardProbe with, without;
    with.record_hidden = without.record_hidden = true;
    forward(m, fx.input(i), {&with});
    forward(m, fx.input(i, false), {&without});
    ASSERT_EQ(with.text_hidden.size(), 8u);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_TRUE(with.text_hidden[l].same_values(without.text_hidden[l])) << l;
    const std::size_t sys = fx.samples[i].system_len;
    EXPECT_EQ(max_abs_diff_rows(with.text_hidden[4], without.text_hidden[4], 0, sys), 0.0);
    EXPECT_GT(max_abs_diff_rows(with.text_hidden[4], without.text_hidden[4], sys, with.text_hidden[4].rows()), 0.0);
  }
}

TEST(ForwardTest, BatchedMatchesSingleSequence) {
  Fixture fx(5);
  for (const auto& mode : all_modes()) {
    auto m = default_model(mode, fx);
    std::vector<ModelInput> batch;
    for (std::size_t i = 0; i < 5; ++i) batch.push_back(fx.input(i, i != 2));
    Tape t(false);
    auto res = forward_batch(t, m, batch);
    for (std::size_t i = 0; i < 5; ++i) {
      Tensor y = forward(m, batch[i]);
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c)
          ASSERT_NEAR(res.logits.value().at(res.text_offset[i] + r, c), y.at(r, c), 1e-12) << mode.describe();
    }
  }
}

TEST(ForwardTest, CausalityUnderTokenPerturbation) {
  Fixture fx(50, 500);
  for (const auto& mode : all_modes()) {
    auto m = default_model(mode, fx);
    SplitMix64 rng(mode.start_layer * 7 + static_cast<int>(mode.kind));
    std::size_t violations = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      ModelInput in = fx.input(i);
      Tensor base = forward(m, in);
      const std::size_t p = rng.below(in.tokens.size() - 1);
      ModelInput pert = in;
      const std::size_t q = p + 1 + rng.below(in.tokens.size() - p - 1);
      pert.tokens[q] = static_cast<int>((pert.tokens[q] + 1 + rng.below(63)) % 64);
      Tensor y = forward(m, pert);
      if (max_abs_diff_rows(base, y, 0, p + 1) != 0.0) ++violations;
      EXPECT_GT(max_abs_diff_rows(base, y, q, q + 1), 0.0);
    }
    EXPECT_EQ(violations, 0u) << mode.describe();
  }
}

TEST(ForwardTest, AudioVisibleOnlyAfterSystemSpan) {
  Fixture fx(20, 900);
  for (const auto& mode : all_modes()) {
    auto m = default_model(mode, fx);
    for (std::size_t i = 0; i < 20; ++i) {
      ModelInput in = fx.input(i);
      Tensor base = forward(m, in);
      auto noisy = fx.audio[i];
      SplitMix64 rng(i);
      for (auto& o : noisy)
        for (double& v : o.tokens.data()) v += rng.normal(0.0, 0.5);
      in.audio = &noisy;
      Tensor y = forward(m, in);
      const std::size_t sys = in.system_len;
      EXPECT_EQ(max_abs_diff_rows(base, y, 0, sys), 0.0) << mode.describe();
      for (std::size_t r = sys; r < y.rows(); ++r) EXPECT_GT(max_abs_diff_rows(base, y, r, r + 1), 0.0);
    }
  }
}

TEST(ForwardTest, AudioNeverEntersFfnInAttentionOnlyMode) {
  Fixture fx(8);
  std::vector<ModelInput> batch;
  for (std::size_t i = 0; i < 8; ++i) batch.push_back(fx.input(i));
  for (bool shared : {false, true}) {
    auto m = default_model(FusionMode::attention_only(5, shared), fx);
    ForwardProbe probe;
    Tape t(false);
    forward_batch(t, m, batch, {&probe});
    ASSERT_EQ(probe.ffn_inputs.size(), 8u);
    EXPECT_EQ(probe.audio_rows_into_ffn(), 0u);
  }
  auto base = default_model(FusionMode::baseline(), fx);
  ForwardProbe probe;
  Tape t(false);
  forward_batch(t, base, batch, {&probe});
  EXPECT_EQ(probe.audio_rows_into_ffn(), 8u * 8u * 8u);
}

TEST(ForwardTest, FaultInjectionsAreDetectable) {
  Fixture fx(2);
  auto m = default_model(FusionMode::attention_only(5), fx);
  ForwardProbe probe;
  ForwardOptions opts{&probe, {.route_audio_into_ffn = true}};
  forward(m, fx.input(0), opts);
  EXPECT_EQ(probe.audio_rows_into_ffn(), 4u * 8u);

  ForwardOptions leak{nullptr, {.expose_audio_to_system = true}};
  ModelInput in = fx.input(0);
  Tensor a = forward(m, in, leak);
  in.audio = &fx.audio[1];
  Tensor b = forward(m, in, leak);
  EXPECT_GT(max_abs_diff_rows(a, b, 0, in.system_len), 0.0);
}

TEST(ForwardTest, RejectsOverlongAndInvalidInputs) {
  Fixture fx(1);
  auto m = default_model(FusionMode::baseline(), fx);
  ModelInput in = fx.input(0);
  in.tokens.resize(125, synth::kPad);
  EXPECT_THROW(forward(m, in), std::invalid_argument);  // 125 + 8 audio rows > 128
  in = fx.input(0);
  in.tokens[4] = 64;
  EXPECT_THROW(forward(m, in), std::invalid_argument);
}

TEST(DecodeTest, SpikeLogitsRepeatToken) {
  Fixture fx(1);
  auto m = default_model(FusionMode::attention_only(5), fx);
  m.visit([](const std::string&, Tensor& t) {
    for (double& v : t.data()) v = 0.0;
  });
  for (double& v : m.llm.embedding.data()) v = 1.0;
  for (auto* g : {&m.llm.final_norm}) for (double& v : g->data()) v = 1.0;
  const int spike = synth::class_token(11);
  for (std::size_t r = 0; r < 64; ++r) m.llm.lm_head[r * 64 + spike] = 1.0;
  auto out = decode_greedy(m, input_from_sample(fx.samples[0], &fx.audio[0], false), 5);
  EXPECT_EQ(out, std::vector<int>(5, spike));
}

TEST(DecodeTest, DeterministicAndValidated) {
  Fixture fx(3);
  auto m = default_model(FusionMode::delayed(5), fx);
  auto p = input_from_sample(fx.samples[1], &fx.audio[1], false);
  EXPECT_EQ(decode_greedy(m, p, 4), decode_greedy(m, p, 4));
  auto bad = p;
  bad.tokens.pop_back();
  bad.user_len -= 1;
  EXPECT_THROW(decode_greedy(m, bad, 2), std::invalid_argument);
  auto longp = p;
  longp.tokens.insert(longp.tokens.begin() + 3, 120, synth::kPad);
  longp.user_len += 120;
  EXPECT_THROW(decode_greedy(m, longp, 2), std::invalid_argument);
}

TEST(ModelGradTest, EndToEndGradcheckInEveryMode) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 16;
  connector::ConnectorConfig ccfg;
  ccfg.latent_t = 2;
  ccfg.latent_f = 1;
  ccfg.latent_dim = 4;
  ccfg.n_heads = 2;
  std::vector<synth::EncoderProfile> enc{synth::make_profile("tiny", 4, 2, 3, 5)};
  auto s1 = synth::generate_sample(1, synth::TaskKind::classify);
  auto s2 = synth::generate_sample(2, synth::TaskKind::count);
  auto a1 = synth::encode_all(enc, s1.grid), a2 = synth::encode_all(enc, s2.grid);
  const std::vector<ModelInput> batch{input_from_sample(s1, &a1), input_from_sample(s2, &a2)};
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  for (const auto* s : {&s1, &s2}) {
    auto toks = s->text_tokens();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      targets.push_back(i + 1 < toks.size() ? toks[i + 1] : 0);
      mask.push_back(i + 1 < toks.size() ? s->response_mask[i + 1] : 0);
    }
  }
  for (const auto& mode : {FusionMode::baseline(), FusionMode::delayed(2), FusionMode::attention_only(1, false),
                           FusionMode::attention_only(1, true)}) {
    auto m = make_model(cfg, mode, ccfg, connector::geometries_of(enc), 4);
    std::vector<std::string> names;
    std::vector<NamedTensor> params;
    m.visit([&](const std::string& n, Tensor&) { names.push_back(n); });
    std::size_t k = 0;
    m.visit([&](const std::string&, Tensor& t) { params.push_back({names[k++], &t}); });
    auto r = gradcheck(
        [&](Tape& t) { return ops::cross_entropy(forward_batch(t, m, batch).logits, targets, mask); }, params);
    EXPECT_TRUE(r.passed()) << mode.describe() << " worst " << r.max_rel_error();
    for (const auto& n : r.failing()) ADD_FAILURE() << mode.describe() << ": " << n;
  }
}
