// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace moep {
namespace {

using testing::random_tokens;
using testing::tiny_config;

struct Fixture {
  MoEModel teacher;
  PruneResult pruned;
  TokenSeq corpus;
};

Fixture make_fixture(std::uint64_t seed, double sparsity = 0.5) {
  Fixture f;
  f.teacher = init_model(tiny_config(seed));
  f.corpus = tokenize(synthetic_corpus(20000, seed));
  const CalibrationSet cal = build_calibration_set(f.corpus, 8, 16, seed);
  f.pruned = prune_model(f.teacher, cal, PruneMethod::kMoEPruner, SparsityTarget::unstructured(sparsity));
  return f;
}

/// Independent recomputation of both loss terms from the plain forward.
KDLossBreakdown reference_losses(const MoEModel& teacher, const MoEModel& student,
                                 const std::vector<TokenSeq>& windows) {
  const LmBatch b = make_lm_batch(windows);
  const ForwardTrace t = model_forward(teacher, b.inputs);
  const ForwardTrace s = model_forward(student, b.inputs);
  KDLossBreakdown r;
  r.l_ce = ce_loss(s.logits, b.targets);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    for (std::size_t e = 0; e < teacher.config.n_experts; ++e) {
      const auto idx = t.layers[l].moe.gates.dispatch(e);
      if (idx.empty()) continue;
      const Matrix te = expert_forward(gather_rows(t.layers[l].moe_input, idx), teacher.params.blocks[l].moe.experts[e]);
      const Matrix se = expert_forward(gather_rows(s.layers[l].moe_input, idx), student.params.blocks[l].moe.experts[e]);
      double sq = 0.0;
      for (std::size_t i = 0; i < te.size(); ++i) sq += std::pow(te.data()[i] - se.data()[i], 2);
      r.l_expert += sq / static_cast<double>(te.size());
    }
  }
  return r;
}

TEST(KDLoss, MatchesIndependentRecomputation) {
  const Fixture f = make_fixture(1);
  SeededRng rng(3);
  const auto windows = random_windows(f.corpus, 4, 17, rng);
  const KDLossBreakdown got = kd_loss(f.teacher, f.pruned.model, windows, 0.7, &f.pruned.masks);
  const KDLossBreakdown want = reference_losses(f.teacher, f.pruned.model, windows);
  EXPECT_NEAR(got.l_ce, want.l_ce, 1e-12);
  EXPECT_NEAR(got.l_expert, want.l_expert, 1e-12 * std::max(1.0, want.l_expert));
  EXPECT_NEAR(got.total, got.l_ce + 0.7 * got.l_expert, 1e-12);
  EXPECT_GT(got.l_expert, 0.0);
}

TEST(KDLoss, IdenticalModelsGiveZeroExpertLoss) {
  const Fixture f = make_fixture(2);
  SeededRng rng(4);
  const auto windows = random_windows(f.corpus, 3, 17, rng);
  EXPECT_EQ(kd_loss(f.teacher, f.teacher, windows, 1.0).l_expert, 0.0);
}

TEST(Lambda, InitializedAsRatioOfLosses) {
  const Fixture f = make_fixture(3);
  SeededRng rng(5);
  const auto windows = random_windows(f.corpus, 4, 17, rng);
  const LambdaInit li = init_lambda(f.teacher, f.pruned.model, windows, &f.pruned.masks);
  const KDLossBreakdown ref = reference_losses(f.teacher, f.pruned.model, windows);
  EXPECT_FALSE(li.fallback);
  EXPECT_NEAR(li.lambda, ref.l_ce / ref.l_expert, 1e-12 * li.lambda);
}

TEST(Lambda, IdenticalModelsFallBackToOneWithWarning) {
  const Fixture f = make_fixture(4);
  SeededRng rng(6);
  const auto windows = random_windows(f.corpus, 2, 17, rng);
  ::testing::internal::CaptureStderr();
  const LambdaInit li = init_lambda(f.teacher, f.teacher, windows);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_TRUE(li.fallback);
  EXPECT_EQ(li.lambda, 1.0);
  EXPECT_NE(err.find("warning"), std::string::npos);
}

TEST(KDGradient, MatchesFiniteDifferences) {
  ModelConfig c = tiny_config(5);
  c.n_layers = 1;
  c.n_experts = 2;
  c.top_k = 1;
  c.d_ff = 6;
  const MoEModel teacher = init_model(c);
  const TokenSeq corpus = random_tokens(500, 7);
  const CalibrationSet cal = build_calibration_set(corpus, 4, 16, 1);
  const PruneResult pr = prune_model(teacher, cal, PruneMethod::kWanda, SparsityTarget::unstructured(0.5));
  MoEModel student = pr.model;
  SeededRng perturb(9);
  for_each_parameter(student.params, [&](const std::string&, Matrix& w) {
    for (double& v : w.values()) v += 0.01 * perturb.normal();
  });
  for (const auto& [name, mask] : pr.masks) mask.apply(student.parameter(name));
  SeededRng rng(8);
  const auto windows = random_windows(corpus, 2, 9, rng);
  for (const std::string& name : {expert_param_name(0, 0, "w_up"), expert_param_name(0, 1, "w_down"),
                                  std::string("blocks.0.attn.wv.0"), std::string("lm_head")}) {
    const double err = grad_check(
        [&](Tape& tape, const Var& x) {
          BoundModel b = bind_model(tape, student, &pr.masks, false);
          std::size_t i = 0, want = 0;
          for_each_parameter(student.params, [&](const std::string& n, const Matrix&) {
            if (n == name) want = i;
            ++i;
          });
          i = 0;
          for_each_parameter(b.effective, [&](const std::string& n, Var& v) {
            if (i++ != want) return;
            auto it = pr.masks.find(n);
            v = it == pr.masks.end() ? x : ad::masked_assign(x, it->second.bits);
          });
          return kd_graph(tape, teacher, student, b, windows, 2.5).total;
        },
        student.parameter(name), 1e-6);
    EXPECT_LT(err, 1e-5) << name;
  }
}

TEST(Distill, MasksStayExactlyZero) {
  const Fixture f = make_fixture(6);
  KDConfig cfg;
  cfg.samples = 40;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  const DistillResult r = distill(f.teacher, f.pruned.model, f.pruned.masks, f.corpus, cfg);
  EXPECT_EQ(r.log.size(), 20u);
  EXPECT_NO_THROW(verify_masked_zero(r.student, f.pruned.masks));
  for (const auto& [name, mask] : f.pruned.masks) {
    const Matrix& w = r.student.parameter(name);
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
      if (!mask.bits[i]) {
        ASSERT_EQ(std::bit_cast<std::uint64_t>(w.data()[i]), 0u);
      }
  }
  EXPECT_NE(r.student.parameter(expert_param_name(0, 0, "w_up")), f.pruned.model.parameter(expert_param_name(0, 0, "w_up")));
  EXPECT_EQ(r.student.params.blocks[0].moe.router, f.pruned.model.params.blocks[0].moe.router);
  EXPECT_EQ(r.log.back().lr, 0.0);
}

TEST(Distill, TrainableRouterMoves) {
  const Fixture f = make_fixture(7);
  KDConfig cfg;
  cfg.samples = 8;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-2;
  cfg.router_frozen = false;
  const DistillResult r = distill(f.teacher, f.pruned.model, f.pruned.masks, f.corpus, cfg);
  EXPECT_NE(r.student.params.blocks[0].moe.router, f.pruned.model.params.blocks[0].moe.router);
}

TEST(Distill, ZeroEpochsReturnsStudent) {
  const Fixture f = make_fixture(8);
  KDConfig cfg;
  cfg.epochs = 0;
  const DistillResult r = distill(f.teacher, f.pruned.model, f.pruned.masks, f.corpus, cfg);
  EXPECT_TRUE(r.log.empty());
  for_each_parameter(f.pruned.model.params, [&](const std::string& name, const Matrix& w) {
    EXPECT_EQ(w, r.student.parameter(name));
  });
}

TEST(Distill, Errors) {
  const Fixture f = make_fixture(9);
  ModelConfig other = tiny_config(9);
  other.n_experts = 2;
  other.top_k = 1;
  EXPECT_THROW(distill(f.teacher, init_model(other), {}, f.corpus, {}), ContractError);
  MaskSet bad = f.pruned.masks;
  MoEModel dense = f.teacher;
  EXPECT_THROW(distill(f.teacher, dense, bad, f.corpus, {}), ConsistencyError);
  KDConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(distill(f.teacher, f.pruned.model, f.pruned.masks, f.corpus, cfg), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(distill_steps(cfg), ConfigError);
}

TEST(Distill, DefaultsAndStepCount) {
  const KDConfig cfg;
  EXPECT_EQ(cfg.epochs, 3u);
  EXPECT_EQ(cfg.learning_rate, 2e-5);
  EXPECT_EQ(cfg.samples, 1000u);
  EXPECT_TRUE(cfg.router_frozen);
  EXPECT_EQ(distill_steps(cfg), 3u * 125u);
}

}  // namespace
}  // namespace moep
