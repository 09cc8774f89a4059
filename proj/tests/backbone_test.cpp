// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <numeric>

#include "ssm/backbone.hpp"
#include "ssm/numerics/grad_check.hpp"

namespace ssm::backbone {
namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.d_raw = 5;
  c.d = 6;
  c.d_hidden = 4;
  c.experts = 4;
  c.top_k = 2;
  c.temporal_hidden = 5;
  return c;
}

Var project(Tape& tape, Var v, std::uint64_t seed) {
  Rng rng(seed, "projection");
  return sum_all(mul(v, tape.constant(rng.normal_matrix(v.rows(), v.cols(), 1.0))));
}

TEST(TopK, ClosedFormRenormalization) {
  Tape tape;
  Var gates = row_softmax(tape.constant(Tensor::matrix(1, 4, std::vector<double>{2, 1, 0, 0})), 1.0);
  std::vector<std::vector<std::size_t>> selected;
  const Tensor w = topk_renormalize(gates, 2, &selected).value();
  const double e = std::exp(1.0), e2 = std::exp(2.0);
  EXPECT_NEAR(w(0, 0), e2 / (e2 + e), 1e-15);
  EXPECT_NEAR(w(0, 1), e / (e2 + e), 1e-15);
  EXPECT_NEAR(w(0, 0), 0.7311, 1e-4);
  EXPECT_EQ(w(0, 2), 0.0);
  EXPECT_EQ(w(0, 3), 0.0);
  EXPECT_EQ(selected[0], std::vector<std::size_t>{0});
  EXPECT_EQ(selected[1], std::vector<std::size_t>{0});
  EXPECT_TRUE(selected[2].empty());
}

TEST(TopK, TiesGoToLowerIndex) {
  Tape tape;
  const Tensor w = topk_renormalize(tape.constant(Tensor::matrix(1, 4, 0.25)), 2).value();
  EXPECT_EQ(w(0, 0), 0.5);
  EXPECT_EQ(w(0, 1), 0.5);
  EXPECT_EQ(w(0, 2), 0.0);
}

TEST(TopK, RejectsOutOfRangeK) {
  Tape tape;
  Var g = tape.constant(Tensor::matrix(1, 4, 0.25));
  EXPECT_THROW(topk_renormalize(g, 0), InvalidArgument);
  EXPECT_THROW(topk_renormalize(g, 5), InvalidArgument);
}

TEST(Moe, ZeroGammaGivesSharedExpertExactly) {
  const BackboneConfig cfg = small_config();
  Rng rng(1);
  MoeLayer moe(cfg, rng);
  Rng data(2);
  const Tensor x = data.normal_matrix(10, cfg.d, 1.0);
  Tape tape;
  Var y = moe.forward(tape, tape.constant(x));
  Var shared = moe.shared_expert()(tape, layer_norm_rows(tape.constant(x)));
  EXPECT_TRUE(bitwise_equal(y.value(), shared.value()));
}

TEST(Moe, ExactlyTopKExpertsPerToken) {
  const BackboneConfig cfg = small_config();
  Rng rng(3);
  MoeLayer moe(cfg, rng);
  Rng data(4);
  Tape tape;
  for (int batch = 0; batch < 5; ++batch) moe.forward(tape, tape.constant(data.normal_matrix(17, cfg.d, 1.0)));
  const MoeStats& s = moe.stats();
  EXPECT_EQ(s.tokens, 85u);
  EXPECT_EQ(s.total_evaluations(), 2u * 85u);
  EXPECT_EQ(s.min_experts_per_token, 2u);
  EXPECT_EQ(s.max_experts_per_token, 2u);
}

TEST(Moe, InvalidTopKIsConfigError) {
  BackboneConfig cfg = small_config();
  cfg.top_k = 5;
  Rng rng(1);
  EXPECT_THROW(MoeLayer(cfg, rng), ConfigError);
}

TEST(Moe, SharedExpertIsFrozen) {
  Rng rng(1);
  MoeLayer moe(small_config(), rng);
  for (Parameter* p : moe.shared_expert().parameters()) EXPECT_FALSE(p->trainable);
  EXPECT_TRUE(moe.gamma().trainable);
  for (double v : moe.gamma().value.values()) EXPECT_EQ(v, 0.0);
}

// gamma is set away from zero so expert gradients are non-trivial; the
// router gradient flows through the renormalized gate values.
class MoeGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(MoeGradients, RouterExpertsAndGamma) {
  const BackboneConfig cfg = small_config();
  Rng rng(GetParam());
  MoeLayer moe(cfg, rng);
  for (double& v : moe.gamma().value.values()) v = rng.normal();
  for (double& v : moe.router().value.values()) v = rng.normal();
  const Tensor x = rng.normal_matrix(7, cfg.d, 1.0);
  std::vector<Parameter*> params;
  for (Parameter* p : moe.parameters())
    if (p->trainable) params.push_back(p);
  const auto report = grad_check([&](Tape& t) { return project(t, moe.forward(t, t.constant(x)), GetParam()); }, params);
  EXPECT_TRUE(report.passed()) << report.worst_parameter << " " << report.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, MoeGradients, ::testing::Range<std::uint64_t>(1, 11));

TEST(FrameEncoder, SixteenFramesInSixteenOut) {
  BackboneConfig cfg;
  FrameEncoder enc(cfg, 7);
  Rng rng(1);
  Tape tape;
  Var f = enc.encode(tape, rng.normal_matrix(16, cfg.d_raw, 1.0));
  EXPECT_EQ(f.rows(), 16u);
  EXPECT_EQ(f.cols(), cfg.d);
}

TEST(FrameEncoder, PerFrameAndDeterministic) {
  BackboneConfig cfg;
  FrameEncoder a(cfg, 7), b(cfg, 7);
  Rng rng(2);
  const Tensor frames = rng.normal_matrix(6, cfg.d_raw, 1.0);
  Tensor single = Tensor::matrix(1, cfg.d_raw);
  std::copy_n(frames.data() + 3 * cfg.d_raw, cfg.d_raw, single.data());
  Tape tape;
  const Tensor fa = a.encode(tape, frames).value();
  const Tensor fb = b.encode(tape, frames).value();
  const Tensor f1 = a.encode(tape, single).value();
  EXPECT_TRUE(bitwise_equal(fa, fb));
  // Batched and single-row products may round differently.
  for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(f1(0, c), fa(3, c), 1e-12);
}

TEST(FrameEncoder, WidthMismatchIsConfigError) {
  BackboneConfig cfg;
  FrameEncoder enc(cfg, 7);
  Tape tape;
  EXPECT_THROW(enc.encode(tape, Tensor::matrix(4, cfg.d_raw + 1)), ConfigError);
}

TEST(FrameEncoder, ZeroGammaMatchesMoeFreeTrunk) {
  BackboneConfig cfg;
  FrameEncoder enc(cfg, 9);
  Rng rng(3);
  const Tensor frames = rng.normal_matrix(8, cfg.d_raw, 1.0);
  Tape tape;
  EXPECT_TRUE(bitwise_equal(enc.encode(tape, frames).value(), enc.encode_shared_only(tape, frames).value()));
}

TEST(Temporal, CenterIndex) {
  EXPECT_EQ(center_index(16), 8u);
  EXPECT_EQ(center_index(1), 0u);
  EXPECT_EQ(center_index(5), 2u);
}

TEST(Temporal, SingleFrameReducesToProjectionsAndFeedForward) {
  BackboneConfig cfg = small_config();
  cfg.positional = false;
  TemporalBlock block(cfg, "t", 3);
  Rng rng(4);
  const Tensor x = rng.normal_matrix(1, cfg.d, 1.0);
  Tape tape;
  const Tensor pooled = block.pooled(tape, tape.constant(x), 1).value();
  const Tensor center = block.center(tape, tape.constant(x), 1).value();
  // Attention over one key has weight 1: h1 = x + Wo Wv x, out = h1 + FFN(h1).
  auto ps = block.parameters();
  const Tensor& wv = ps[2]->value;
  const Tensor& wo = ps[3]->value;
  const Tensor& w1 = ps[4]->value;
  const Tensor& b1 = ps[5]->value;
  const Tensor& w2 = ps[6]->value;
  const Tensor& b2 = ps[7]->value;
  std::vector<double> v(cfg.d, 0.0), h1(cfg.d, 0.0), hid(cfg.temporal_hidden, 0.0), out(cfg.d, 0.0);
  for (std::size_t i = 0; i < cfg.d; ++i)
    for (std::size_t j = 0; j < cfg.d; ++j) v[i] += wv(i, j) * x[j];
  for (std::size_t i = 0; i < cfg.d; ++i) {
    h1[i] = x[i];
    for (std::size_t j = 0; j < cfg.d; ++j) h1[i] += wo(i, j) * v[j];
  }
  for (std::size_t i = 0; i < cfg.temporal_hidden; ++i) {
    double s = b1[i];
    for (std::size_t j = 0; j < cfg.d; ++j) s += w1(i, j) * h1[j];
    hid[i] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
  }
  for (std::size_t i = 0; i < cfg.d; ++i) {
    out[i] = h1[i] + b2[i];
    for (std::size_t j = 0; j < cfg.temporal_hidden; ++j) out[i] += w2(i, j) * hid[j];
  }
  for (std::size_t i = 0; i < cfg.d; ++i) {
    EXPECT_NEAR(pooled[i], out[i], 1e-12);
    EXPECT_NEAR(center[i], out[i], 1e-12);
  }
}

TEST(Temporal, PermutationInvariantWithoutPositions) {
  BackboneConfig cfg = small_config();
  cfg.positional = false;
  TemporalBlock block(cfg, "t", 5);
  Rng rng(6);
  const Tensor x = rng.normal_matrix(8, cfg.d, 1.0);
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tape tape;
  const Tensor a = block.pooled(tape, tape.constant(x), 8).value();
  const Tensor b = block.pooled(tape, gather_rows(tape.constant(x), perm), 8).value();
  for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
}

TEST(Temporal, PositionsBreakPermutationInvariance) {
  BackboneConfig cfg = small_config();
  TemporalBlock block(cfg, "t", 5);
  Rng rng(6);
  const Tensor x = rng.normal_matrix(8, cfg.d, 1.0);
  std::vector<std::size_t> perm{7, 6, 5, 4, 3, 2, 1, 0};
  Tape tape;
  const Tensor a = block.pooled(tape, tape.constant(x), 8).value();
  const Tensor b = block.pooled(tape, gather_rows(tape.constant(x), perm), 8).value();
  EXPECT_GT(frobenius_distance(a, b), 1e-9);
}

TEST(Temporal, CenterMatchesFullSequenceRow) {
  BackboneConfig cfg = small_config();
  TemporalBlock block(cfg, "t", 8);
  Rng rng(9);
  const Tensor x = rng.normal_matrix(3 * 16, cfg.d, 1.0);
  Tape tape;
  const Tensor full = block.sequence(tape, tape.constant(x), 16).value();
  const Tensor center = block.center(tape, tape.constant(x), 16).value();
  ASSERT_EQ(center.rows(), 3u);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(center(b, c), full(b * 16 + 8, c), 1e-12);
}

TEST(Temporal, CenterDependsOnFirstFrame) {
  BackboneConfig cfg = small_config();
  TemporalBlock block(cfg, "t", 8);
  Rng rng(10);
  Parameter x("x", rng.normal_matrix(16, cfg.d, 1.0), ParamGroup::head);
  Tape tape;
  tape.backward(project(tape, block.center(tape, tape.param(x), 16), 10));
  double frame0 = 0.0;
  for (std::size_t c = 0; c < cfg.d; ++c) frame0 += x.grad(0, c) * x.grad(0, c);
  EXPECT_GT(frame0, 0.0);
  // Finite-difference sensitivity agrees.
  Tensor bumped = x.value;
  bumped(0, 0) += 1e-3;
  Tape t2;
  EXPECT_GT(frobenius_distance(block.center(t2, t2.constant(bumped), 16).value(),
                               block.center(t2, t2.constant(x.value), 16).value()),
            0.0);
}

TEST(Temporal, BranchesHaveEqualShapesAndIndependentWeights) {
  BackboneConfig cfg;
  TemporalBlock a(cfg, "temporal.exp", 1), b(cfg, "temporal.au", 1);
  auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value.shape(), pb[i]->value.shape());
    if (pa[i]->value.size() > cfg.d) {
      EXPECT_FALSE(bitwise_equal(pa[i]->value, pb[i]->value));
    }
  }
}

class TemporalGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(TemporalGradients, AllBlockParameters) {
  BackboneConfig cfg = small_config();
  TemporalBlock block(cfg, "t", GetParam());
  Rng rng(GetParam());
  Parameter x("x", rng.normal_matrix(2 * 5, cfg.d, 1.0), ParamGroup::head);
  auto params = block.parameters();
  params.push_back(&x);
  auto pooled = [&](Tape& t) { return project(t, block.pooled(t, t.param(x), 5), GetParam()); };
  auto center = [&](Tape& t) { return project(t, block.center(t, t.param(x), 5), GetParam() + 100); };
  const auto r1 = grad_check(pooled, params);
  const auto r2 = grad_check(center, params);
  EXPECT_TRUE(r1.passed()) << r1.worst_parameter << " " << r1.max_rel_error;
  EXPECT_TRUE(r2.passed()) << r2.worst_parameter << " " << r2.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, TemporalGradients, ::testing::Range<std::uint64_t>(1, 11));

}  // namespace
}  // namespace ssm::backbone
