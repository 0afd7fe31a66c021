#include <gtest/gtest.h>

#include <cmath>

#include "margingate/corpus.hpp"
#include "margingate/engines.hpp"
#include "margingate/errors.hpp"
#include "margingate/model.hpp"

using namespace margingate;

namespace {

const Weights& shipped_weights() {
  static const Weights w = build_model(ModelSpec{});
  return w;
}

StepOutput first_step(const Weights& w, int token, const NumericsProfile& prof, int batch) {
  KVCache cache(w.spec.layers, 1, 8, w.spec.heads, w.spec.head_dim());
  return forward_step(w, cache, 0, token, 0, prof, BatchContext{batch, 0, 0});
}

}  // namespace

TEST(BuildModel, GoldenConstants) {
  const Weights& w = shipped_weights();
  EXPECT_EQ(w.token_embedding.data[0].bits, 0x3dd4u);
  EXPECT_EQ(w.token_embedding.data[0].to_float(), 0.103515625f);
  EXPECT_EQ(w.position_embedding.data[0].bits, 0xbe6cu);
  EXPECT_EQ(w.layers[0].wq.data[0].bits, 0x3e1eu);
}

TEST(BuildModel, DeterministicAndNormGainsAreOne) {
  ModelSpec spec;
  spec.layers = 2;
  spec.vocab = 64;
  spec.max_positions = 32;
  const Weights a = build_model(spec);
  const Weights b = build_model(spec);
  EXPECT_EQ(a.token_embedding.data, b.token_embedding.data);
  EXPECT_EQ(a.layers[1].w_out.data, b.layers[1].w_out.data);
  for (const auto& layer : a.layers) {
    for (Bf16 g : layer.attn_norm) EXPECT_EQ(g.to_float(), 1.0f);
    for (Bf16 g : layer.mlp_norm) EXPECT_EQ(g.to_float(), 1.0f);
  }
  for (Bf16 g : a.final_norm) EXPECT_EQ(g.to_float(), 1.0f);
  spec.seed = 43;
  EXPECT_NE(build_model(spec).token_embedding.data, a.token_embedding.data);
}

TEST(BuildModel, RejectsBadSpecs) {
  ModelSpec spec;
  spec.heads = 3;
  EXPECT_THROW(build_model(spec), InvalidArgument);
  spec = ModelSpec{};
  spec.vocab = 1;
  EXPECT_THROW(build_model(spec), InvalidArgument);
}

TEST(ForwardStep, DeterministicUnderReference) {
  const Weights& w = shipped_weights();
  const auto a = first_step(w, 17, NumericsProfile::reference(), 1);
  const auto b = first_step(w, 17, NumericsProfile::reference(), 1);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.columns, b.columns);
  EXPECT_EQ(first_step(w, 17, NumericsProfile::reference(), 16).logits, a.logits);
  for (float l : a.logits) EXPECT_TRUE(std::isfinite(l));
}

TEST(ForwardStep, Errors) {
  const Weights& w = shipped_weights();
  KVCache cache(w.spec.layers, 1, 8, w.spec.heads, w.spec.head_dim());
  EXPECT_THROW(forward_step(w, cache, 0, w.spec.vocab, 0, NumericsProfile::reference(), {}), InvalidArgument);
  EXPECT_THROW(forward_step(w, cache, 0, -1, 0, NumericsProfile::reference(), {}), InvalidArgument);
  EXPECT_THROW(forward_step(w, cache, 0, 1, w.spec.max_positions, NumericsProfile::reference(), {}), CapacityError);
  KVCache wrong(w.spec.layers + 1, 1, 8, w.spec.heads, w.spec.head_dim());
  EXPECT_THROW(forward_step(w, wrong, 0, 1, 0, NumericsProfile::reference(), {}), InvalidArgument);
}

// Shipped corpus prompt 0, step 0: logits at batch 1 and batch 8 differ in
// 54 vocabulary entries, the first at id 8.
TEST(ForwardStep, BatchEightPerturbsLogits) {
  const Weights& w = shipped_weights();
  const Corpus corpus = generate_corpus(CorpusSpec{}, w.spec.vocab);
  DecodeConfig cfg;
  cfg.max_new_tokens = 1;
  cfg.keep_logits = true;
  const auto prof = NumericsProfile::reduction_order({{1, 1}, {8, 8}});
  const auto solo = decode_batched(w, BatchLayout::replicated(corpus.prompts[0], 1), cfg, prof);
  const auto eight = decode_batched(w, BatchLayout::replicated(corpus.prompts[0], 8), cfg, prof);
  const auto& a = solo[0].logits[0];
  const auto& b = eight[0].logits[0];
  int differing = 0, first = -1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      ++differing;
      if (first < 0) first = static_cast<int>(i);
    }
  }
  EXPECT_EQ(differing, 54);
  EXPECT_EQ(first, 8);
}

TEST(ForwardStep, SoftmaxRowsSumToOne) {
  const Weights& w = shipped_weights();
  const Corpus corpus = generate_corpus(CorpusSpec{4, 32, 0, 77}, w.spec.vocab);
  for (const auto& prompt : corpus.prompts) {
    for (const auto& prof : {NumericsProfile::reference(), NumericsProfile::reduction_order()}) {
      KVCache cache(w.spec.layers, 1, 64, w.spec.heads, w.spec.head_dim());
      ForwardProbe probe;
      for (std::size_t p = 0; p < prompt.size(); ++p) {
        const auto out = forward_step(w, cache, 0, prompt[p], static_cast<int>(p), prof, {8, 0, 0}, &probe);
        cache.append_column(0, out.columns);
      }
      EXPECT_GT(probe.softmax_rows, 0);
      EXPECT_LE(probe.max_softmax_sum_error, std::ldexp(1.0, -7));
    }
  }
}

TEST(ForwardStep, InjectedNoiseOnlyTouchesLogits) {
  const Weights& w = shipped_weights();
  const auto noisy = NumericsProfile::injected_noise(0x1.0p-7, 5);
  const auto ref = first_step(w, 3, NumericsProfile::reference(), 1);
  const auto solo = first_step(w, 3, noisy, 1);
  const auto batched = first_step(w, 3, noisy, 4);
  EXPECT_EQ(solo.logits, ref.logits);
  EXPECT_EQ(batched.columns, ref.columns);
  EXPECT_NE(batched.logits, ref.logits);
}
