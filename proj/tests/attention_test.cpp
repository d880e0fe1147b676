#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hici/attention.hpp"
#include "hici/gradcheck.hpp"
#include "oracles.hpp"

using namespace hici;

namespace {

HiCIConfig micro() {
  HiCIConfig c;  // d=16, d_b=8, d_s=4, M=2, K=2, S=4, H=2
  return c;
}

HiCIConfig no_context(std::size_t S, std::size_t d, std::size_t H) {
  HiCIConfig c;
  c.S = S, c.d = d, c.H = H, c.M = 0, c.K = 0, c.d_b = d / 2, c.d_s = d / 4;
  c.causal_segment_mask = false;
  return c;
}

Tensor swap_segments(const Tensor& x, std::size_t S, std::size_t a, std::size_t b) {
  Tensor out = x;
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out(a * S + r, j) = x(b * S + r, j);
      out(b * S + r, j) = x(a * S + r, j);
    }
  return out;
}

}  // namespace

TEST(Partition, Examples) {
  Rng rng(1);
  const Tensor x = randn({8, 3}, rng);
  const auto segs = partition(x, 4);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0], slice_rows(x, 0, 4));
  EXPECT_EQ(segs[1], slice_rows(x, 4, 8));

  const Tensor y = randn({4, 3}, rng);
  const auto one = partition(y, 4);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], y);

  try {
    partition(randn({7, 3}, rng), 4);
    FAIL();
  } catch (const dimension_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("T=7"), std::string::npos);
    EXPECT_NE(msg.find("S=4"), std::string::npos);
  }
}

TEST(LocalConstruct, IdenticalKeysCollapseToValueProjection) {
  const HiCIConfig c = micro();
  Rng rng(2);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor v = randn({1, c.d}, rng);
  Tensor seg({c.S, c.d});
  for (std::size_t r = 0; r < c.S; ++r) std::copy(v.data().begin(), v.data().end(), seg.row(r).begin());
  const Tensor expected_row = ops::matmul(ops::matmul(v, p.local.w_v), p.local.w_o);
  const Tensor out = local_construct(seg, p.local, c);
  ASSERT_EQ(out.shape(), (Shape{c.M, c.d}));
  for (std::size_t m = 0; m < c.M; ++m)
    for (std::size_t j = 0; j < c.d; ++j) EXPECT_NEAR(out(m, j), expected_row[j], 1e-14);
}

TEST(LocalConstruct, SingleSlotSingleKey) {
  HiCIConfig c = micro();
  c.M = 1, c.S = 1;
  Rng rng(3);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor x = randn({1, c.d}, rng);
  const Tensor expected = ops::matmul(ops::matmul(x, p.local.w_v), p.local.w_o);
  EXPECT_LE(max_abs_diff(local_construct(x, p.local, c), expected), 1e-14);
}

TEST(LocalConstruct, WeightsPerSlotPerHeadSumToOne) {
  HiCIConfig c = micro();
  c.M = 3, c.S = 5;
  Rng rng(4);
  const HiCIParams p = HiCIParams::init(c, rng);
  std::size_t seen = 0;
  AttentionObserver obs = [&](AttentionSite site, std::size_t, std::size_t, const Tensor& probs) {
    EXPECT_EQ(site, AttentionSite::local);
    ASSERT_EQ(probs.shape(), (Shape{3, 5}));
    for (std::size_t m = 0; m < 3; ++m) {
      double s = 0.0;
      for (double w : probs.row(m)) s += w;
      EXPECT_NEAR(s, 1.0, 1e-14);
    }
    ++seen;
  };
  local_construct(randn({5, c.d}, rng), p.local, c, obs);
  EXPECT_EQ(seen, c.H);
}

TEST(LocalConstruct, ShapeMismatch) {
  const HiCIConfig c = micro();
  Rng rng(5);
  const HiCIParams p = HiCIParams::init(c, rng);
  EXPECT_THROW(local_construct(randn({4, c.d + 1}, rng), p.local, c), dimension_error);
}

TEST(IntegrateGlobal, ConstantLocalsGiveDegenerateStatistics) {
  const Tensor c_row = Tensor::matrix({{1.0, -2.0, 2.0, 0.5}});
  std::vector<Tensor> locals(3, Tensor({2, 4}));
  for (Tensor& l : locals)
    for (std::size_t r = 0; r < 2; ++r) std::copy_n(c_row.data().begin(), 4, l.row(r).begin());
  const Tensor z = statistics_matrix(locals);
  ASSERT_EQ(z.shape(), (Shape{5, 4}));
  const double norm = std::sqrt(1.0 + 4.0 + 4.0 + 0.25);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(z(0, j), c_row[j]);
    EXPECT_EQ(z(1, j), c_row[j]);
    EXPECT_EQ(z(2, j), c_row[j]);
    EXPECT_EQ(z(3, j), 0.0);
    EXPECT_NEAR(z(4, j), c_row[j] / norm, 1e-15);
  }
}

TEST(IntegrateGlobal, GateIsLinearInAlpha) {
  const HiCIConfig c = micro();
  Rng rng(6);
  HiCIParams p = HiCIParams::init(c, rng);
  const std::vector<Tensor> locals = {randn({c.M, c.d}, rng), randn({c.M, c.d}, rng)};
  p.global.beta[0] = 0.0;
  const Tensor g0 = integrate_global(locals, p.global, c);
  p.global.beta[0] = std::log(std::exp(1.0) - 1.0);  // alpha = 1
  const Tensor g1 = integrate_global(locals, p.global, c);
  ASSERT_EQ(g0.shape(), (Shape{c.K, c.d}));
  for (std::size_t i = 0; i < g0.size(); ++i) EXPECT_NEAR(g0[i], std::log(2.0) * g1[i], 1e-14 * std::abs(g1[i]) + 1e-16);
}

TEST(IntegrateGlobal, SegmentPermutationInvariance) {
  const HiCIConfig c = micro();
  Rng rng(7);
  const HiCIParams p = HiCIParams::init(c, rng);
  std::vector<Tensor> locals;
  for (int i = 0; i < 5; ++i) locals.push_back(randn({c.M, c.d}, rng));
  const Tensor g = integrate_global(locals, p.global, c);
  std::vector<std::size_t> order(5);
  std::iota(order.begin(), order.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor> permuted;
    for (auto i : order) permuted.push_back(locals[i]);
    EXPECT_LE(max_abs_diff(integrate_global(permuted, p.global, c), g), 1e-12);
  }
}

TEST(IntegrateGlobal, EmptyInputRejected) {
  const HiCIConfig c = micro();
  Rng rng(8);
  const HiCIParams p = HiCIParams::init(c, rng);
  EXPECT_THROW(integrate_global(std::vector<Tensor>{}, p.global, c), dimension_error);
}

TEST(Broadcast, WithoutContextEqualsSelfAttention) {
  const HiCIConfig c = no_context(6, 8, 2);
  Rng rng(9);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor x = randn({6, 8}, rng);
  const Tensor ref = oracle::self_attention(x, p.broadcast.w_q, p.broadcast.w_k, p.broadcast.w_v, 2, false);
  EXPECT_LE(max_abs_diff(broadcast(x, Tensor(), Tensor(), p.broadcast, c), ref), 1e-12);
}

TEST(Broadcast, CausalRowZeroIgnoresLaterTokens) {
  const HiCIConfig c = micro();
  Rng rng(10);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor x = randn({c.S, c.d}, rng), l = randn({c.M, c.d}, rng), g = randn({c.K, c.d}, rng);
  Tensor x2 = x;
  for (std::size_t j = 0; j < c.d; ++j) x2(1, j) += 3.0;
  const Tensor a = broadcast(x, l, g, p.broadcast, c), b = broadcast(x2, l, g, p.broadcast, c);
  for (std::size_t j = 0; j < c.d; ++j) EXPECT_EQ(a(0, j), b(0, j));
  double moved = 0.0;
  for (std::size_t j = 0; j < c.d; ++j) moved += std::abs(a(1, j) - b(1, j));
  EXPECT_GT(moved, 0.0);
}

TEST(Broadcast, WeightsOverVisiblePositionsSumToOne) {
  for (bool causal : {false, true}) {
    HiCIConfig c = micro();
    c.causal_segment_mask = causal;
    Rng rng(11);
    const HiCIParams p = HiCIParams::init(c, rng);
    ForwardOptions fopt;
    std::size_t calls = 0;
    fopt.observer = [&](AttentionSite, std::size_t, std::size_t, const Tensor& probs) {
      ASSERT_EQ(probs.shape(), (Shape{c.S, c.K + c.M + c.S}));
      for (std::size_t t = 0; t < c.S; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < probs.cols(); ++j) {
          s += probs(t, j);
          if (causal && j >= c.K + c.M + t + 1) {
            EXPECT_EQ(probs(t, j), 0.0);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-14);
      }
      ++calls;
    };
    broadcast(randn({c.S, c.d}, rng), randn({c.M, c.d}, rng), randn({c.K, c.d}, rng), p.broadcast, c, fopt);
    EXPECT_EQ(calls, c.H);
  }
}

TEST(Broadcast, ShapeMismatch) {
  const HiCIConfig c = micro();
  Rng rng(12);
  const HiCIParams p = HiCIParams::init(c, rng);
  EXPECT_THROW(broadcast(randn({c.S, c.d}, rng), randn({c.M, c.d - 1}, rng), randn({c.K, c.d}, rng), p.broadcast, c),
               dimension_error);
}

TEST(HiCIForward, SingleSegmentWithoutSlotsIsFullAttention) {
  const HiCIConfig c = no_context(8, 8, 4);
  Rng rng(13);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor x = randn({8, 8}, rng);
  const Tensor ref = oracle::self_attention(x, p.broadcast.w_q, p.broadcast.w_k, p.broadcast.w_v, 4, false);
  EXPECT_LE(max_abs_diff(hici_forward(x, p, c), ref), 1e-12);
}

TEST(HiCIForward, OutputShapeForValidConfigs) {
  Rng rng(14);
  for (auto scope : {GlobalScope::all_segments, GlobalScope::preceding_segments})
    for (std::size_t n : {1u, 2u, 5u}) {
      HiCIConfig c = micro();
      c.global_scope = scope;
      const HiCIParams p = HiCIParams::init(c, rng);
      EXPECT_EQ(hici_forward(randn({n * c.S, c.d}, rng), p, c).shape(), (Shape{n * c.S, c.d}));
    }
}

TEST(HiCIForward, RejectsIndivisibleLength) {
  const HiCIConfig c = micro();
  Rng rng(15);
  const HiCIParams p = HiCIParams::init(c, rng);
  EXPECT_THROW(hici_forward(randn({c.S + 1, c.d}, rng), p, c), dimension_error);
}

TEST(HiCIForward, SegmentSwapSwapsOutputs) {
  const HiCIConfig c = micro();
  Rng rng(16);
  const HiCIParams p = HiCIParams::init(c, rng);
  const Tensor x = randn({4 * c.S, c.d}, rng);
  const Tensor y = hici_forward(x, p, c);
  const Tensor ys = hici_forward(swap_segments(x, c.S, 0, 2), p, c);
  EXPECT_LE(max_abs_diff(swap_segments(y, c.S, 0, 2), ys), 1e-12);
}

TEST(HiCIForward, PrecedingScopeFirstSegmentSeesZeroContext) {
  HiCIConfig c = micro();
  c.global_scope = GlobalScope::preceding_segments;
  Rng rng(17);
  const HiCIParams p = HiCIParams::init(c, rng);
  HiCITrace trace;
  ForwardOptions fopt;
  fopt.trace = &trace;
  hici_forward(randn({3 * c.S, c.d}, rng), p, c, fopt);
  ASSERT_EQ(trace.globals.size(), 3u);
  EXPECT_EQ(trace.globals[0], Tensor::zeros(c.K, c.d));
  EXPECT_GT(max_abs(trace.globals[1]), 0.0);
}

TEST(HiCIForward, GradientsMatchFiniteDifferences) {
  for (auto scope : {GlobalScope::all_segments, GlobalScope::preceding_segments}) {
    HiCIConfig c = micro();
    c.global_scope = scope;
    Rng rng(18);
    HiCIParams p = HiCIParams::init(c, rng);
    p.global.beta[0] = 0.3;
    const Tensor x = randn({2 * c.S, c.d}, rng);
    const Tensor w = randn({2 * c.S, c.d}, rng);
    auto loss = [&](Graph& g) {
      Var y = layer::hici_forward(g.constant(x), layer::bind(g, p), c);
      return ag::sum(ag::hadamard(y, g.constant(w)));
    };
    for (const auto& e : gradcheck_all(p.named(), loss)) EXPECT_LE(e.rel_error, 1e-6) << e.name;
  }
}

TEST(AttnMass, UniformProbeBaselines) {
  for (std::size_t S : {1024u, 2048u}) {
    HiCIConfig c;
    c.S = S, c.M = 8, c.K = 4, c.H = 2, c.d = 8, c.d_b = 4, c.d_s = 2;
    c.causal_segment_mask = false;
    Rng rng(19);
    const HiCIParams p = HiCIParams::init(c, rng);
    const auto recs = collect_attn_mass(randn({S, c.d}, rng), p, c, true);
    ASSERT_EQ(recs.size(), c.H);
    const double expected = 4.0 / static_cast<double>(4 + 8 + S);
    for (const auto& r : recs) {
      EXPECT_NEAR(r.frac_global, expected, 1e-12);
      EXPECT_NEAR(r.frac_local, 8.0 / (12.0 + static_cast<double>(S)), 1e-12);
    }
  }
}

TEST(AttnMass, FractionsPartitionUnitMass) {
  HiCIConfig c = micro();
  Rng rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    const HiCIParams p = HiCIParams::init(c, rng);
    for (const auto& r : collect_attn_mass(randn({3 * c.S, c.d}, rng, 2.0), p, c)) {
      EXPECT_NEAR(r.frac_global + r.frac_local + r.frac_segment, 1.0, 1e-9);
      EXPECT_GE(r.frac_global, 0.0);
      EXPECT_LE(r.frac_segment, 1.0);
    }
  }
}
