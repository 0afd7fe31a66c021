#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "margingate/config.hpp"
#include "margingate/errors.hpp"

using namespace margingate;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "test.cfg");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.decode.max_new_tokens, 128);
  EXPECT_TRUE(c.decode.snapshot_kv);
  EXPECT_EQ(c.corpus.prompt_count, 64);
  EXPECT_EQ(c.corpus.prompt_length, 32);
  EXPECT_EQ(c.batch_sizes, (std::vector<int>{2, 4, 8, 16}));
  EXPECT_EQ(c.transfer_corpora.size(), 2u);
}

TEST(Config, TextRoundTrips) {
  RunConfig c = parse(
      "# comment\n"
      "model.seed = 99\n"
      "numerics.chunk_schedule = 1=1, 2=3, 16=5\n"
      "batch.sizes = 2, 16\n"
      "gate.tau = 1/8\n"
      "sweep.grid = 0.5, 1, 2\n"
      "transfer.tau = 0.25\n"
      "transfer.corpora = a:5:8:16:2\n"
      "decode.eos = 7   # trailing comment\n");
  EXPECT_EQ(c.model.seed, 99u);
  EXPECT_EQ(c.gate.tau, 0.125);
  EXPECT_EQ(c.decode.eos_token, 7);
  ASSERT_EQ(c.transfer_corpora.size(), 1u);
  EXPECT_EQ(c.transfer_corpora[0].name, "a");
  EXPECT_EQ(c.transfer_corpora[0].corpus.seed, 5u);
  EXPECT_EQ(c.transfer_corpora[0].corpus.length_jitter, 2);
  const std::string text = c.to_text();
  const RunConfig again = parse(text);
  EXPECT_EQ(again.to_text(), text);
  EXPECT_EQ(again.hash(), c.hash());
  EXPECT_NE(c.hash(), RunConfig{}.hash());
}

TEST(Config, InfinityAndNone) {
  RunConfig c = parse("gate.tau = inf\ndecode.eos = none\ntransfer.tau = auto\n");
  EXPECT_TRUE(std::isinf(c.gate.tau));
  EXPECT_FALSE(c.decode.eos_token);
  EXPECT_FALSE(c.transfer_tau);
  EXPECT_EQ(parse(c.to_text()).to_text(), c.to_text());
}

TEST(Config, HashIgnoresRunSection) {
  RunConfig a;
  RunConfig b;
  set_config_value(b, "run.workers", "4");
  set_config_value(b, "run.out", "elsewhere");
  EXPECT_EQ(a.hash(), b.hash());
  set_config_value(b, "corpus.seed", "1");
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, Errors) {
  EXPECT_NE(error_of("model.layers = 2\nmodel.layers = 3\n").find("test.cfg:2"), std::string::npos);
  EXPECT_NE(error_of("nope.key = 1\n").find("test.cfg:1"), std::string::npos);
  EXPECT_FALSE(error_of("model.layers\n").empty());
  EXPECT_FALSE(error_of("model.layers = two\n").empty());
  EXPECT_FALSE(error_of("model.layers = 0\n").empty());
  EXPECT_FALSE(error_of("gate.tau = -1\n").empty());
  EXPECT_FALSE(error_of("gate.mode = sometimes\n").empty());
  EXPECT_FALSE(error_of("batch.sizes =\n").empty());
  EXPECT_FALSE(error_of("batch.protected_row = 5\nbatch.sizes = 2\n").empty());
  EXPECT_FALSE(error_of("numerics.chunk_schedule = 1:1\n").empty());
  EXPECT_FALSE(error_of("sweep.grid = 1, 0.5\n").empty());
  EXPECT_FALSE(error_of("decode.max_new_tokens = 0\n").empty());
  EXPECT_THROW(load_config("/nonexistent/file.cfg"), ConfigError);
}

TEST(Config, GridScaling) {
  RunConfig c;
  const auto g = c.sweep_grid_base();
  ASSERT_EQ(g.size(), 7u);
  EXPECT_EQ(g.front(), 0.25 / 64);
  EXPECT_EQ(g.back(), 0.25);
}

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(2.0), "2");
  EXPECT_EQ(format_double(0.0625), "0.0625");
  EXPECT_EQ(format_double(INFINITY), "inf");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}
