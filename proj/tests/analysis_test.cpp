#include <gtest/gtest.h>

#include <cmath>

#include "hici/analysis.hpp"

using namespace hici;
using namespace hici::analysis;

namespace {

// Rounds to the table's displayed precision in units of `unit`.
double shown(std::uint64_t v, double unit, int digits) {
  const double scale = std::pow(10.0, digits);
  return std::round(static_cast<double>(v) / unit * scale) / scale;
}

HiCIConfig random_config(Rng& rng, bool allow_empty_stage) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  HiCIConfig c;
  c.H = pick(1, 3);
  c.d_s = pick(1, 4);
  c.d_b = c.H * pick(c.d_s / c.H + 1, c.d_s / c.H + 3);
  c.d = c.H * pick(c.d_b / c.H + 1, c.d_b / c.H + 4);
  c.S = pick(1, 6);
  c.M = pick(allow_empty_stage ? 0 : 1, 4);
  c.K = c.M == 0 ? 0 : pick(allow_empty_stage ? 0 : 1, 4);
  c.validate();
  return c;
}

}  // namespace

TEST(CountParams, SevenBillionTable) {
  const Preset p = llama2_7b();
  const ParamBreakdown b = count_params(p.cfg, p.dims.n_layers, p.dims.base_params);
  EXPECT_EQ(b.slots, 32'768u);
  EXPECT_EQ(b.local_attention, 8'388'608u);
  EXPECT_EQ(b.local_subtotal(), 8'421'376u);
  EXPECT_EQ(b.compression, 591'104u);
  EXPECT_EQ(b.queries, 2'048u);
  EXPECT_EQ(b.lightweight_attention, 1'048'576u);
  EXPECT_EQ(b.expansion, 2'097'153u);
  EXPECT_EQ(b.global_subtotal(), 3'738'881u);
  EXPECT_EQ(b.total(), 389'128'224u);

  EXPECT_EQ(shown(b.local_subtotal(), 1e6, 1), 8.4);
  EXPECT_EQ(shown(b.global_subtotal(), 1e6, 1), 3.7);
  EXPECT_EQ(shown(b.per_layer(), 1e6, 1), 12.2);
  EXPECT_EQ(shown(b.total(), 1e6, 1), 389.1);
  EXPECT_EQ(shown(b.local_subtotal() * 32, 1e6, 1), 269.5);
  EXPECT_EQ(shown(b.global_subtotal() * 32, 1e6, 1), 119.6);
  EXPECT_NEAR(100.0 * b.overhead(), 5.46, 0.01);
  // Measured against the base alone the figure would be 5.77%.
  EXPECT_NEAR(100.0 * static_cast<double>(b.total()) / static_cast<double>(p.dims.base_params), 5.77, 0.01);
}

TEST(CountParams, SubtotalsSumToTotal) {
  const Preset p = llama2_13b();
  const ParamBreakdown b = count_params(p.cfg, p.dims.n_layers, p.dims.base_params);
  EXPECT_EQ(b.slots + b.local_attention + b.compression + b.queries + b.lightweight_attention + b.expansion,
            b.per_layer());
  EXPECT_EQ(b.per_layer() * 40, b.total());
  EXPECT_GT(b.overhead(), 0.0);
  EXPECT_LT(b.overhead(), 0.1);
}

TEST(CountParams, DegenerateConfigHasNoParameters) {
  HiCIConfig c;
  c.M = 0;
  c.K = 0;
  c.d_b = 0;
  c.d_s = 0;
  const ParamBreakdown b = count_params(c, 32, 1000);
  EXPECT_EQ(b.total(), 0u);
  EXPECT_EQ(b.overhead(), 0.0);
}

TEST(CountParams, MatchesConstructedParameterCensus) {
  Rng rng(2024);
  for (int i = 0; i < 20; ++i) {
    const HiCIConfig c = random_config(rng, i % 4 == 3);
    HiCIParams params = HiCIParams::init(c, rng);
    const ParamBreakdown b = count_params(c, 1, 0);
    EXPECT_EQ(b.per_layer_with_broadcast(), params.parameter_count()) << to_text(c);
  }
}

TEST(CountFlops, FullAttentionAtEightK) {
  const Preset p = llama2_7b();
  const CostBreakdown b = count_flops(Method::full, 8192, p.dims, p.cfg);
  EXPECT_EQ(shown(b.attn, 1e12, 1), 35.2);
  EXPECT_EQ(shown(b.proj, 1e12, 1), 35.2);
  EXPECT_EQ(shown(b.ffn, 1e12, 1), 70.9);
  EXPECT_EQ(shown(b.others, 1e12, 1), 2.1);
  EXPECT_EQ(shown(b.total(), 1e12, 1), 143.4);
  EXPECT_EQ(b.lcgi, 0u);
}

TEST(CountFlops, SegmentedAndHiciAtEightK) {
  const Preset p = llama2_7b();
  const CostBreakdown seg = count_flops(Method::segmented, 8192, p.dims, p.cfg);
  EXPECT_EQ(shown(seg.attn, 1e12, 1), 8.8);
  const CostBreakdown h = count_flops(Method::hici, 8192, p.dims, p.cfg);
  EXPECT_EQ(shown(h.lcgi, 1e12, 1), 2.2);
  EXPECT_EQ(h.lcgi_items.front().name, "local K/V projection");
  std::uint64_t sum = 0;
  for (const auto& item : h.lcgi_items) sum += item.flops;
  EXPECT_EQ(sum, h.lcgi);
  EXPECT_GT(static_cast<double>(h.lcgi_items.front().flops), 0.95 * static_cast<double>(h.lcgi));
  EXPECT_EQ(h.total(), h.attn + h.proj + h.ffn + h.others + h.lcgi);
}

TEST(CountFlops, HiciOverheadStaysWithinThreePercent) {
  for (const Preset& p : {llama2_7b(), llama2_13b()})
    for (const FlopsRow& r : flops_table(p, reference_contexts())) {
      const double ratio = static_cast<double>(r.hici.total()) / static_cast<double>(r.segmented.total());
      EXPECT_GE(ratio, 1.0) << p.dims.name << " T=" << r.hici.T;
      EXPECT_LE(ratio, 1.03) << p.dims.name << " T=" << r.hici.T;
    }
}

TEST(CountFlops, IndivisibleContextRejected) {
  const Preset p = llama2_7b();
  EXPECT_NO_THROW(count_flops(Method::full, 1000, p.dims, p.cfg));
  EXPECT_THROW(count_flops(Method::hici, 1000, p.dims, p.cfg), dimension_error);
  EXPECT_THROW(flops_table(p, {1002}), dimension_error);
}

TEST(CountFlops, AnalyticTallyMatchesInstrumentedCounter) {
  Rng rng(77);
  for (int i = 0; i < 12; ++i) {
    HiCIConfig c = random_config(rng, i % 4 == 3);
    c.global_scope = i % 2 ? GlobalScope::preceding_segments : GlobalScope::all_segments;
    const std::size_t T = c.S * (1 + i % 4);
    const auto row = scaling_probe(c, {T}, static_cast<std::uint64_t>(i)).front();
    const FlopTally expected = expected_layer_tally(T, c);
    for (FlopBucket b : {FlopBucket::broadcast_attention, FlopBucket::broadcast_projection, FlopBucket::local_global})
      EXPECT_EQ(row.counted[b], expected[b]) << to_text(c) << " bucket " << static_cast<int>(b);
    EXPECT_EQ(row.counted[FlopBucket::other], 0u);
  }
}

TEST(ScalingProbe, DoublingLengthDoublesWork) {
  HiCIConfig c;
  c.S = 64;
  const std::size_t S = c.S;
  const auto rows = scaling_probe(c, {2 * S, 4 * S, 8 * S, 16 * S});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GE(rows[i].ratio, 1.98) << rows[i].T;
    EXPECT_LE(rows[i].ratio, 2.02) << rows[i].T;
  }
  for (const auto& r : rows) {
    EXPECT_EQ(r.global_rows, c.K);
    EXPECT_EQ(r.global_bytes, c.K * c.d * sizeof(double));
  }
}

TEST(ScalingProbe, ShortSegmentsCarryVisibleFixedCost) {
  HiCIConfig c;  // S = 4: global integration is a sizeable share at T = 2S
  const auto rows = scaling_probe(c, {2 * c.S, 4 * c.S});
  const double expected = static_cast<double>(expected_layer_tally(4 * c.S, c).total()) /
                          static_cast<double>(expected_layer_tally(2 * c.S, c).total());
  EXPECT_DOUBLE_EQ(rows[1].ratio, expected);
  EXPECT_LT(rows[1].ratio, 1.98);
}

TEST(ScalingProbe, DoublingSegmentDoublesAttentionAtFixedLength) {
  HiCIConfig small;
  small.S = 64;
  HiCIConfig large = small;
  large.S = 128;
  const std::size_t T = 512;
  const auto a = scaling_probe(small, {T}).front();
  const auto b = scaling_probe(large, {T}).front();
  // Total segment-attention work over a fixed T grows linearly in S.
  const double total_ratio = static_cast<double>(b.counted[FlopBucket::broadcast_attention]) /
                             static_cast<double>(a.counted[FlopBucket::broadcast_attention]);
  EXPECT_NEAR(total_ratio, (128.0 + 4) / (64.0 + 4), 1e-12);
  EXPECT_NEAR(total_ratio, 2.0, 0.07);
}

TEST(Tables, RoundedLayouts) {
  const Preset p = llama2_7b();
  const std::string params =
      format_params(count_params(p.cfg, p.dims.n_layers, p.dims.base_params), p.cfg, p.dims.name, TableFormat::rounded);
  for (const char* cell : {"32.8K", "268.4M", "269.5M", "591.1K", "2.0K", "33.6M", "67.1M", "119.6M", "12.2M",
                           "389.1M", "6.74B", "5.46%"})
    EXPECT_NE(params.find(cell), std::string::npos) << cell << "\n" << params;

  const std::string flops = format_flops(flops_table(p, reference_contexts()), TableFormat::rounded);
  for (const char* cell : {"35.2", "143.4", "117.0", "140.7", "357.2", "251.7", "996.0", "573.7", "2251.8", "3117.8",
                           "1429.0", "5497.6", "6850.7", "2727.5", "100K"})
    EXPECT_NE(flops.find(cell), std::string::npos) << cell << "\n" << flops;
}

TEST(Tables, CsvIsMachineReadable) {
  const Preset p = llama2_7b();
  const std::string csv = format_flops(flops_table(p, {8192}), TableFormat::csv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "context,method,attn,proj,ffn,others,lcgi,total");
  EXPECT_NE(csv.find("8192,full,35184372088832,"), std::string::npos) << csv;
  EXPECT_THROW(parse_table_format("markdown"), config_error);
  EXPECT_THROW(preset("gpt2"), config_error);
}
