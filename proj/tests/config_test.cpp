#include <gtest/gtest.h>

#include "hici/config.hpp"

using namespace hici;

TEST(Config, ParsesAllFields) {
  const auto c = parse_config_text(R"(
# micro
S = 4
M = 2
K = 2
H = 2
d = 16
d_b = 8
d_s = 4
causal_segment_mask = off
global_scope = preceding_segments
ln_eps = 1e-6
)");
  EXPECT_EQ(c.S, 4u);
  EXPECT_EQ(c.d_s, 4u);
  EXPECT_FALSE(c.causal_segment_mask);
  EXPECT_EQ(c.global_scope, GlobalScope::preceding_segments);
  EXPECT_DOUBLE_EQ(c.ln_eps, 1e-6);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTrip) {
  const HiCIConfig c = HiCIConfig::llama2_13b();
  EXPECT_EQ(parse_config_text(to_text(c)), c);
}

TEST(Config, UnknownDuplicateAndMissingKeysRejected) {
  const std::string base = "S = 4\nM = 2\nK = 2\nH = 2\nd = 16\nd_b = 8\nd_s = 4\n";
  EXPECT_THROW(parse_config_text(base + "dropout = 0.1\n"), config_error);
  EXPECT_THROW(parse_config_text(base + "S = 8\n"), config_error);
  EXPECT_THROW(parse_config_text("S = 4\n"), config_error);
  EXPECT_THROW(parse_config_text(base + "causal_segment_mask = maybe\n"), config_error);
  EXPECT_THROW(parse_config_text("S = -4\n"), config_error);
  EXPECT_THROW(parse_config_text("S 4\n"), config_error);
  try {
    parse_config_text(base + "widht = 3\n");
  } catch (const config_error& e) {
    EXPECT_NE(std::string(e.what()).find("widht"), std::string::npos);
  }
}

TEST(Config, Validation) {
  HiCIConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d_b = 9;
  EXPECT_THROW(c.validate(), config_error);  // not divisible by H
  c = {};
  c.d_s = 8;
  EXPECT_THROW(c.validate(), config_error);  // d_s < d_b violated
  c = {};
  c.M = 0;
  EXPECT_THROW(c.validate(), config_error);  // K > 0 needs slots to pool
  c.K = 0;
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(HiCIConfig::llama2_7b().validate());
  EXPECT_NO_THROW(HiCIConfig::llama2_13b().validate());
}
