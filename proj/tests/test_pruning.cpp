// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace moep {
namespace {

using testing::random_matrix;
using testing::random_tokens;
using testing::tiny_config;

/// Exhaustive oracle: among all `k`-subsets of [begin, end) the one with the
/// smallest score sum; ties go to the lexicographically smallest index set.
std::vector<std::size_t> brute_force_prune(std::span<const double> s, std::size_t begin, std::size_t end,
                                           std::size_t k) {
  const std::size_t n = end - begin;
  std::vector<std::size_t> best;
  double best_sum = std::numeric_limits<double>::infinity();
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(__builtin_popcount(bits)) != k) continue;
    std::vector<std::size_t> set;
    long double sum = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (bits & (1u << j)) {
        set.push_back(begin + j);
        sum += s[begin + j];
      }
    const double d = static_cast<double>(sum);
    if (d < best_sum || (d == best_sum && set < best)) {
      best_sum = d;
      best = set;
    }
  }
  return best;
}

std::vector<std::size_t> pruned_columns(const SparsityMask& m, std::size_t r, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t c = begin; c < end; ++c)
    if (!m.keep(r, c)) out.push_back(c);
  return out;
}

TEST(SparsityTarget, ParseAndCounts) {
  EXPECT_EQ(SparsityTarget::parse("0.5").zeros_per_row(7), 3u);
  EXPECT_EQ(SparsityTarget::parse("0.29").zeros_per_row(100), 29u);
  EXPECT_EQ(SparsityTarget::parse("2:4").zeros_per_row(8), 4u);
  EXPECT_EQ(SparsityTarget::parse("0").zeros_per_row(8), 0u);
  EXPECT_THROW(SparsityTarget::parse("1.0"), ConfigError);
  EXPECT_THROW(SparsityTarget::parse("-0.1"), ConfigError);
  EXPECT_THROW(SparsityTarget::parse("4:4"), ConfigError);
  EXPECT_THROW(SparsityTarget::parse("abc"), ConfigError);
  EXPECT_EQ(SparsityTarget::parse("2:4").to_string(), "2:4");
  EXPECT_EQ(parse_prune_method("moe-pruner"), PruneMethod::kMoEPruner);
  EXPECT_THROW(parse_prune_method("random"), ConfigError);
}

TEST(Metrics, WorkedRouterWeightedInstance) {
  const Matrix w{{2.0, -1.0}};
  ScaledNormAccumulator acc("w", 2);
  const std::vector<double> x0{1, 2}, x1{3, 4};
  acc.add(x0, 0.5);
  acc.add(x1, 1.0);
  const ScoreMatrix s = score_moe_pruner(w, acc, "w");
  EXPECT_NEAR(s(0, 0), 2.0 * std::sqrt(9.25), 1e-12);
  EXPECT_NEAR(s(0, 1), std::sqrt(17.0), 1e-12);
  const SparsityMask m = select_mask(s, SparsityTarget::unstructured(0.5));
  EXPECT_TRUE(m.keep(0, 0));
  EXPECT_FALSE(m.keep(0, 1));
  EXPECT_THROW(score_moe_pruner(w, acc, "other"), ContractError);
}

TEST(Metrics, HandValues) {
  const Matrix w{{-3.0, 0.5}, {1.0, -2.0}};
  EXPECT_EQ(score_magnitude(w), (Matrix{{3.0, 0.5}, {1.0, 2.0}}));
  const std::vector<double> norms{2.0, 10.0};
  EXPECT_EQ(score_wanda(w, norms), (Matrix{{6.0, 5.0}, {2.0, 20.0}}));
  EXPECT_THROW(score_wanda(w, std::vector<double>{1.0}), ShapeError);
  HessianAccumulator h("w", 2);
  h.h = Matrix{{4.0, 0.0}, {0.0, 0.0}};
  // Zero diagonal -> 1; damp = 0.01 * mean(4, 0) = 0.02; H' = diag(4.02, 1.02).
  const SparseGptScores sg = score_sparsegpt(w, h);
  EXPECT_NEAR(sg.scores(0, 0), 9.0 * 4.02, 1e-12);
  EXPECT_NEAR(sg.scores(1, 1), 4.0 * 1.02, 1e-12);
  EXPECT_THROW(score_sparsegpt(w, h, -1.0), ConfigError);
}

TEST(SelectMask, TiesPruneLowerIndexAndNM) {
  const Matrix s{{1.0, 1.0, 1.0, 1.0}};
  const SparsityMask m = select_mask(s, SparsityTarget::unstructured(0.5));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  const Matrix s2{{4, 3, 2, 1, 1, 2, 3, 4}};
  const SparsityMask nm = select_mask(s2, SparsityTarget::semi_structured(2, 4));
  EXPECT_EQ(nm.bits, (std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 1, 1}));
  EXPECT_THROW(select_mask(Matrix(1, 6), SparsityTarget::semi_structured(2, 4)), ConfigError);
}

TEST(SelectMask, MatchesExhaustiveEnumeration) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SeededRng rng(seed);
    const std::size_t cols = 1 + rng.uniform_int(8);
    Matrix s = random_matrix(5, cols, rng);
    for (double& v : s.values()) v = std::abs(v);
    s(0, 0) = s(0, cols - 1);  // force a tie
    for (double p : {0.0, 0.25, 0.5, 0.75, 0.9}) {
      const auto t = SparsityTarget::unstructured(p);
      const SparsityMask m = select_mask(s, t);
      for (std::size_t r = 0; r < s.rows(); ++r) {
        EXPECT_EQ(pruned_columns(m, r, 0, cols), brute_force_prune(s.row(r), 0, cols, t.zeros_per_row(cols)));
      }
    }
    if (cols % 4 == 0) {
      const SparsityMask m = select_mask(s, SparsityTarget::semi_structured(2, 4));
      for (std::size_t r = 0; r < s.rows(); ++r)
        for (std::size_t g = 0; g < cols; g += 4) {
          EXPECT_EQ(pruned_columns(m, r, g, g + 4), brute_force_prune(s.row(r), g, g + 4, 2));
        }
    }
  }
}

TEST(Degeneration, UnitGatesUnitNormsIdentityHessian) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    SeededRng rng(seed);
    const Matrix w = random_matrix(6, 8, rng);
    const Matrix x = random_matrix(10, 8, rng);
    ScaledNormAccumulator unit("w", 8), plain("w", 8);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      unit.add(x.row(t), 1.0);
      plain.add(x.row(t), 1.0);
    }
    const auto target = SparsityTarget::unstructured(0.5);
    EXPECT_EQ(select_mask(score_moe_pruner(w, unit, "w"), target), select_mask(score_wanda(w, plain.norms()), target));
    const std::vector<double> ones(8, 1.0);
    EXPECT_EQ(select_mask(score_wanda(w, ones), target), select_mask(score_magnitude(w), target));
    HessianAccumulator h("w", 8);
    h.h = Matrix::identity(8);
    EXPECT_EQ(select_mask(score_sparsegpt(w, h).scores, target), select_mask(score_magnitude(w), target));
  }
}

TEST(Obs, ReducesReconstructionErrorAndZeroesMaskedWeights) {
  double with = 0.0, without = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SeededRng rng(seed);
    const Matrix w = random_matrix(8, 8, rng);
    const Matrix x = random_matrix(32, 8, rng);
    HessianAccumulator h("w", 8);
    h.add(x);
    const SparseGptScores sg = score_sparsegpt(w, h);
    const SparsityMask m = select_mask(sg.scores, SparsityTarget::unstructured(0.5));
    const Matrix updated = obs_update(w, m, sg.h_inv);
    Matrix zeroed = w;
    m.apply(zeroed);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (!m.bits[i]) {
        EXPECT_EQ(updated.data()[i], 0.0);
      }
    with += reconstruction_error(w, updated, x);
    without += reconstruction_error(w, zeroed, x);
  }
  EXPECT_LT(with, without);
}

TEST(Obs, SinglePrunedColumnMatchesClosedForm) {
  // Pruning only the first column: the optimal update is
  // delta = -w_0 / [H^-1]_00 * H^-1[0, :], which the sequential sweep reproduces.
  SeededRng rng(7);
  const Matrix w = random_matrix(3, 5, rng);
  const Matrix x = random_matrix(20, 5, rng);
  HessianAccumulator h("w", 5);
  h.add(x);
  const Matrix hinv = score_sparsegpt(w, h, 0.0).h_inv;
  SparsityMask m("w", 3, 5);
  for (std::size_t r = 0; r < 3; ++r) m.set(r, 0, false);
  const Matrix got = obs_update(w, m, hinv);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 1; c < 5; ++c) {
      EXPECT_NEAR(got(r, c), w(r, c) - w(r, 0) / hinv(0, 0) * hinv(0, c), 1e-10);
    }
}

TEST(ReconstructionError, FrobeniusOfResidual) {
  const Matrix w{{1.0, 2.0}};
  const Matrix wp{{1.0, 0.0}};
  const Matrix x{{1.0, 1.0}, {0.0, 3.0}};
  EXPECT_NEAR(reconstruction_error(w, wp, x), std::sqrt(4.0 + 36.0), 1e-15);
  EXPECT_EQ(reconstruction_error(w, wp, Matrix(0, 2)), 0.0);
}

class PruneModelTest : public ::testing::TestWithParam<PruneMethod> {};

TEST_P(PruneModelTest, ExactMasksAndUntouchedNonExpertWeights) {
  const MoEModel m = init_model(tiny_config(21));
  const CalibrationSet cal = build_calibration_set(random_tokens(3000, 2), 8, 16, 1);
  for (const auto& target : {SparsityTarget::unstructured(0.5), SparsityTarget::semi_structured(2, 4)}) {
    for (Propagation prop : {Propagation::kDense, Propagation::kRecompute}) {
      PruneOptions opt;
      opt.propagate = prop;
      const PruneResult r = prune_model(m, cal, GetParam(), target, opt);
      EXPECT_EQ(r.masks.size(), m.config.n_layers * m.config.n_experts * 3);
      for (const auto& [name, mask] : r.masks) {
        EXPECT_TRUE(mask_is_exact(mask, target)) << name;
        const Matrix& w = r.model.parameter(name);
        for (std::size_t i = 0; i < mask.bits.size(); ++i)
          if (!mask.bits[i]) {
            ASSERT_EQ(w.data()[i], 0.0);
          }
      }
      for_each_parameter(m.params, [&](const std::string& name, const Matrix& w) {
        if (!r.masks.count(name)) {
          EXPECT_EQ(w, r.model.parameter(name)) << name;
        }
      });
      EXPECT_NEAR(r.report.achieved_sparsity(), 0.5, 1e-12);
      EXPECT_EQ(r.report.entries.size(), r.masks.size());
    }
  }
}

TEST_P(PruneModelTest, ZeroSparsityIsNoOp) {
  const MoEModel m = init_model(tiny_config(22));
  const CalibrationSet cal = build_calibration_set(random_tokens(3000, 3), 4, 16, 1);
  const PruneResult r = prune_model(m, cal, GetParam(), SparsityTarget::unstructured(0.0));
  for_each_parameter(m.params, [&](const std::string& name, const Matrix& w) {
    EXPECT_EQ(w, r.model.parameter(name)) << name;
  });
  EXPECT_EQ(r.report.pruned_weights, 0u);
}

TEST_P(PruneModelTest, PrecomputedStatsEqualInlineCollection) {
  const MoEModel m = init_model(tiny_config(23));
  const CalibrationSet cal = build_calibration_set(random_tokens(3000, 4), 6, 16, 2);
  const CalibrationStats st = collect(m, cal).stats;
  const auto target = SparsityTarget::unstructured(0.5);
  const PruneResult a = prune_model(m, cal, GetParam(), target);
  const PruneResult b = prune_model(m, cal, GetParam(), target, {}, &st);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_EQ(a.model.params.blocks[1].moe.experts[2].w_down, b.model.params.blocks[1].moe.experts[2].w_down);
  PruneOptions rec;
  rec.propagate = Propagation::kRecompute;
  EXPECT_THROW(prune_model(m, cal, GetParam(), target, rec, &st), ConfigError);
}

INSTANTIATE_TEST_SUITE_P(AllMethods, PruneModelTest,
                         ::testing::Values(PruneMethod::kMagnitude, PruneMethod::kWanda, PruneMethod::kMoEPruner,
                                           PruneMethod::kSparseGpt),
                         [](const auto& info) {
                           std::string s = to_string(info.param);
                           std::erase(s, '-');
                           return s;
                         });

TEST(PruneModel, SparseGptUpdateLowersLayerError) {
  const MoEModel m = init_model(tiny_config(24));
  const CalibrationSet cal = build_calibration_set(random_tokens(3000, 5), 8, 16, 1);
  const PruneResult r = prune_model(m, cal, PruneMethod::kSparseGpt, SparsityTarget::unstructured(0.5));
  EXPECT_TRUE(r.report.weight_update);
  double before = 0.0, after = 0.0;
  for (const auto& e : r.report.entries) {
    before += e.error_before_update;
    after += e.error_after_update;
  }
  EXPECT_LT(after, before);
}

TEST(PruneModel, RouterWeightingChangesMasks) {
  const MoEModel m = init_model(tiny_config(25));
  const CalibrationSet cal = build_calibration_set(random_tokens(3000, 6), 8, 16, 1);
  const auto target = SparsityTarget::unstructured(0.5);
  const PruneResult a = prune_model(m, cal, PruneMethod::kMoEPruner, target);
  const PruneResult b = prune_model(m, cal, PruneMethod::kWanda, target);
  PruneOptions unit;
  unit.unit_gates = true;
  const PruneResult c = prune_model(m, cal, PruneMethod::kMoEPruner, target, unit);
  EXPECT_NE(a.masks, b.masks);
  EXPECT_EQ(c.masks, b.masks);
}

}  // namespace
}  // namespace moep
