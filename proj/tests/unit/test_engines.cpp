#include <gtest/gtest.h>

#include "margingate/corpus.hpp"
#include "margingate/diagnostics.hpp"
#include "margingate/engines.hpp"
#include "margingate/errors.hpp"
#include "margingate/hash.hpp"

using namespace margingate;

namespace {

const Weights& weights() {
  static const Weights w = build_model(ModelSpec{});
  return w;
}

const Corpus& corpus() {
  static const Corpus c = generate_corpus(CorpusSpec{}, ModelSpec{}.vocab);
  return c;
}

const NumericsProfile kShipped = NumericsProfile::reduction_order({{1, 1}, {2, 2}, {4, 4}, {8, 8}, {16, 16}});

void expect_same_steps(const DecodeTrace& a, const DecodeTrace& b) {
  ASSERT_EQ(a.length(), b.length());
  for (std::size_t i = 0; i < a.length(); ++i) {
    ASSERT_EQ(a.steps[i].token, b.steps[i].token) << "step " << i;
    ASSERT_EQ(a.steps[i].topk_values, b.steps[i].topk_values) << "step " << i;
    ASSERT_EQ(a.steps[i].topk_ids, b.steps[i].topk_ids) << "step " << i;
  }
  EXPECT_EQ(a.stop, b.stop);
}

}  // namespace

TEST(DecodeReference, GoldenSequence) {
  const auto ref = decode_reference(weights(), corpus().prompts[0], DecodeConfig{});
  ASSERT_EQ(ref.length(), 128u);
  const std::vector<int> head{7, 142, 42, 311, 403, 306, 196, 349, 349, 416, 298, 59, 59, 59, 59, 59};
  const auto tokens = ref.tokens();
  EXPECT_EQ(std::vector<int>(tokens.begin(), tokens.begin() + 16), head);
  Fnv1a64 h;
  for (int t : ref.tokens()) h.update_value(t);
  EXPECT_EQ(hex64(h.value()), "c55ba0582f1c9e00");
  EXPECT_EQ(ref.stop, StopReason::cap);
}

TEST(DecodeReference, RepeatableAndMarginsNonNegative) {
  const auto a = decode_reference(weights(), corpus().prompts[1], DecodeConfig{});
  const auto b = decode_reference(weights(), corpus().prompts[1], DecodeConfig{});
  expect_same_steps(a, b);
  for (const auto& s : a.steps) {
    EXPECT_GE(s.margin, 0.0f);
    EXPECT_EQ(s.margin, s.topk_values[0] - s.topk_values[1]);
    EXPECT_EQ(s.token, s.topk_ids[0]);
  }
}

TEST(DecodeReference, SingleTokenPromptSingleStep) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 1;
  const auto t = decode_reference(weights(), std::vector<int>{5}, cfg);
  EXPECT_EQ(t.length(), 1u);
  EXPECT_THROW(decode_reference(weights(), std::vector<int>{}, cfg), InvalidArgument);
}

TEST(DecodeReference, StopsAtEos) {
  DecodeConfig cfg;
  cfg.eos_token = 311;
  const auto t = decode_reference(weights(), corpus().prompts[0], cfg);
  EXPECT_EQ(t.length(), 4u);
  EXPECT_EQ(t.stop, StopReason::eos);
}

TEST(DecodeReference, CapacityOverflow) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 500;
  EXPECT_THROW(decode_reference(weights(), corpus().prompts[0], cfg), CapacityError);
}

TEST(DecodeBatched, ReferenceProfileIsBatchInvariant) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 48;
  for (int p = 0; p < 4; ++p) {
    const auto ref = decode_reference(weights(), corpus().prompts[p], cfg);
    for (int bs : {1, 2, 4, 8, 16}) {
      const auto traces = decode_batched(weights(), BatchLayout::replicated(corpus().prompts[p], bs), cfg,
                                         NumericsProfile::reference());
      expect_same_steps(traces[0], ref);
    }
  }
}

TEST(DecodeBatched, SingleRowMatchesReference) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 32;
  const auto ref = decode_reference(weights(), corpus().prompts[2], cfg);
  const auto solo = decode_batched(weights(), BatchLayout::replicated(corpus().prompts[2], 1), cfg,
                                   NumericsProfile::reduction_order({{1, 1}}));
  expect_same_steps(solo[0], ref);
}

TEST(DecodeBatched, LeftPaddingIsExact) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 40;
  for (int p = 0; p < 3; ++p) {
    const auto ref = decode_reference(weights(), corpus().prompts[p], cfg);
    for (int pads : {1, 5, 17}) {
      BatchLayout layout = BatchLayout::replicated(corpus().prompts[p], 1);
      layout.extra_left_pad = pads;
      EXPECT_EQ(layout.pad_count(0), pads);
      expect_same_steps(decode_batched(weights(), layout, cfg, NumericsProfile::reference())[0], ref);
      expect_same_steps(decode_batched(weights(), layout, cfg, kShipped)[0], ref);
    }
  }
}

TEST(DecodeBatched, ProtectedRowIgnoresOtherRowsContent) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 40;
  const auto& c = corpus().prompts;
  BatchLayout a;
  a.rows = {c[0], c[1], c[2], std::vector<int>(c[3].begin(), c[3].begin() + 9)};
  BatchLayout b;
  b.rows = {c[0], c[5], std::vector<int>(c[6].begin(), c[6].begin() + 20), c[7]};
  expect_same_steps(decode_batched(weights(), a, cfg, kShipped)[0], decode_batched(weights(), b, cfg, kShipped)[0]);
}

TEST(DecodeBatched, RowSharingIsExact) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 64;
  for (int bs : {2, 8}) {
    const auto layout = BatchLayout::replicated(corpus().prompts[4], bs);
    const auto shared = decode_batched(weights(), layout, cfg, kShipped, EngineOptions{true});
    const auto separate = decode_batched(weights(), layout, cfg, kShipped, EngineOptions{false});
    for (int r = 0; r < bs; ++r) expect_same_steps(shared[r], separate[r]);
  }
}

TEST(DecodeBatched, FinishedRowsKeepTheBatchShape) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 16;
  cfg.eos_token = 311;
  BatchLayout layout;
  layout.rows = {corpus().prompts[1], corpus().prompts[0]};
  const auto traces = decode_batched(weights(), layout, cfg, NumericsProfile::reference());
  EXPECT_EQ(traces[1].stop, StopReason::eos);
  EXPECT_EQ(traces[1].length(), 4u);
  EXPECT_EQ(traces[0].tokens(), decode_reference(weights(), corpus().prompts[1], cfg).tokens());
}

TEST(DecodeBatched, ShippedProfileFlipsSomewhere) {
  DecodeConfig cfg;
  int diverging = 0;
  for (int p = 0; p < 8; ++p) {
    const auto ref = decode_reference(weights(), corpus().prompts[p], cfg);
    const auto b = decode_batched(weights(), BatchLayout::replicated(corpus().prompts[p], 8), cfg, kShipped)[0];
    const auto p_div = find_first_divergence(b, ref);
    if (p_div) {
      ++diverging;
      for (int i = 0; i < *p_div; ++i) ASSERT_EQ(b.steps[i].token, ref.steps[i].token);
    }
  }
  EXPECT_GT(diverging, 0);
}

TEST(VerifyStep, AgreesWithReferenceTrajectory) {
  DecodeConfig cfg;
  cfg.max_new_tokens = 24;
  const auto& prompt = corpus().prompts[3];
  cfg.snapshot_kv = true;
  const auto ref = decode_reference(weights(), prompt, cfg);
  std::vector<int> prefix = prompt;
  for (std::size_t t = 0; t < ref.length(); ++t) {
    const auto v = verify_step(weights(), prefix);
    ASSERT_EQ(v.token, ref.steps[t].token) << "step " << t;
    ASSERT_EQ(v.columns, ref.columns[prefix.size() - 1]);
    prefix.push_back(ref.steps[t].token);
  }
  const auto again = verify_step(weights(), prompt);
  EXPECT_EQ(again.logits, verify_step(weights(), prompt).logits);
  EXPECT_THROW(verify_step(weights(), std::vector<int>{}), InvalidArgument);
}

TEST(Verifier, IncrementalMatchesFullRecompute) {
  Verifier full(weights(), Verifier::Strategy::full_recompute);
  Verifier inc(weights(), Verifier::Strategy::incremental);
  std::vector<int> prefix = corpus().prompts[5];
  std::int64_t charged = 0;
  for (int t = 0; t < 20; ++t) {
    const auto a = full.verify(prefix);
    const auto b = inc.verify(prefix);
    ASSERT_EQ(a.token, b.token);
    ASSERT_EQ(a.columns, b.columns);
    ASSERT_EQ(a.logits, b.logits);
    charged += static_cast<std::int64_t>(prefix.size());
    // Occasionally branch away from the cached prefix.
    prefix.push_back(t % 7 == 3 ? (a.token + 1) % 512 : a.token);
  }
  EXPECT_EQ(full.charged_prefix_tokens(), charged);
  EXPECT_EQ(inc.charged_prefix_tokens(), charged);
  EXPECT_LT(inc.forward_calls(), full.forward_calls());
}

TEST(BatchLayout, ValidatesRows) {
  BatchLayout layout;
  EXPECT_THROW(layout.validate(512), InvalidArgument);
  layout.rows = {{1, 2}, {}};
  EXPECT_THROW(layout.validate(512), InvalidArgument);
  layout.rows = {{1, 600}};
  EXPECT_THROW(layout.validate(512), InvalidArgument);
  layout.rows = {{1, 2}, {3}};
  layout.protected_row = 2;
  EXPECT_THROW(layout.validate(512), InvalidArgument);
  layout.protected_row = 0;
  EXPECT_NO_THROW(layout.validate(512));
  EXPECT_EQ(layout.storage_length(), 2);
  EXPECT_EQ(layout.pad_count(1), 1);
}
