// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Expert-wise knowledge distillation of a pruned student from its dense
// teacher:  L = L_CE + lambda * sum_layers sum_experts MSE(E_teacher, E_student).
// Expert i is compared on the tokens the teacher's router sends to expert i;
// both sides are the unweighted expert outputs on their own layer inputs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moep/autograd.hpp"
#include "moep/mask.hpp"
#include "moep/model.hpp"
#include "moep/model_graph.hpp"
#include "moep/text.hpp"
#include "moep/train.hpp"

namespace moep {

struct KDConfig {
  std::optional<double> lambda;  // nullopt: initialize as L_CE / L_expert on the first batch
  std::size_t epochs = 3;
  double learning_rate = 2e-5;
  std::size_t batch_size = 8;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  bool router_frozen = true;
};

struct KDLossBreakdown {
  double l_ce = 0.0;
  double l_expert = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

struct KDGraph {
  Var l_ce;
  Var l_expert;
  Var total;
  KDLossBreakdown breakdown;
};

inline void check_same_architecture(const MoEModel& teacher, const MoEModel& student) {
  if (!teacher.config.same_architecture(student.config)) {
    throw ContractError("teacher and student architectures differ (layers, experts and dimensions must match)");
  }
}

/// Records the KD loss for `windows` (each seq_len+1 tokens) on `tape`,
/// differentiable with respect to the bound student parameters.
inline KDGraph kd_graph(Tape& tape, const MoEModel& teacher, const MoEModel& student, const BoundModel& bound,
                        std::span<const TokenSeq> windows, double lambda) {
  check_same_architecture(teacher, student);
  const LmBatch batch = make_lm_batch(windows);
  const ForwardTrace t = model_forward(teacher, batch.inputs);
  GraphTrace s = graph_forward(tape, student, bound.effective, batch.inputs);

  KDGraph g;
  g.l_ce = ad::cross_entropy(s.logits, batch.targets);
  bool have = false;
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const auto& tl = t.layers[l];
    for (std::size_t e = 0; e < tl.moe.tokens.size(); ++e) {
      const auto& idx = tl.moe.tokens[e];
      if (idx.empty()) continue;
      Var student_out = graph_expert_forward(ad::gather_rows(s.layers[l].moe_input, idx),
                                             bound.effective.blocks[l].moe.experts[e]);
      Var term = ad::mse(student_out, tape.constant(tl.moe.expert_outputs[e]));
      g.l_expert = have ? ad::add(g.l_expert, term) : term;
      have = true;
    }
  }
  if (!have) g.l_expert = tape.constant(Matrix(1, 1, 0.0));
  g.total = ad::add(g.l_ce, ad::scale(g.l_expert, lambda));
  g.breakdown = {g.l_ce.value()(0, 0), g.l_expert.value()(0, 0), lambda, g.total.value()(0, 0)};
  return g;
}

/// Loss values only.
inline KDLossBreakdown kd_loss(const MoEModel& teacher, const MoEModel& student, std::span<const TokenSeq> windows,
                               double lambda, const MaskSet* masks = nullptr) {
  Tape tape;
  BoundModel b = bind_model(tape, student, masks, false);
  return kd_graph(tape, teacher, student, b, windows, lambda).breakdown;
}

struct LambdaInit {
  double lambda = 1.0;
  bool fallback = false;  // student matched the teacher exactly; lambda forced to 1
  KDLossBreakdown probe;
};

/// lambda = L_CE / L_expert measured on a probe batch.
inline LambdaInit init_lambda(const MoEModel& teacher, const MoEModel& student, std::span<const TokenSeq> windows,
                              const MaskSet* masks = nullptr) {
  LambdaInit r;
  r.probe = kd_loss(teacher, student, windows, 1.0, masks);
  if (r.probe.l_expert == 0.0) {
    r.fallback = true;
    r.lambda = 1.0;
    std::cerr << "warning: expert-wise KD loss is zero on the probe batch (student equals teacher); using lambda = 1\n";
  } else {
    r.lambda = r.probe.l_ce / r.probe.l_expert;
  }
  return r;
}

struct DistillLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  KDLossBreakdown loss;
};

inline nlohmann::ordered_json to_json(const DistillLogEntry& e) {
  return {{"step", e.step},          {"lr", e.lr},          {"l_ce", e.loss.l_ce},
          {"l_expert", e.loss.l_expert}, {"lambda", e.loss.lambda}, {"total", e.loss.total}};
}

struct DistillResult {
  MoEModel student;
  std::vector<DistillLogEntry> log;
  double lambda = 0.0;
  bool lambda_fallback = false;
};

inline std::size_t distill_steps(const KDConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  return cfg.epochs * ((cfg.samples + cfg.batch_size - 1) / cfg.batch_size);
}

/// Throws ConsistencyError if any masked position holds a nonzero weight.
inline void verify_masked_zero(const MoEModel& m, const MaskSet& masks) {
  for (const auto& [name, mask] : masks) {
    const Matrix& w = m.parameter(name);
    if (mask.rows != w.rows() || mask.cols != w.cols()) throw ShapeError("mask for '" + name + "' has wrong shape");
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
      if (!mask.bits[i] && w.data()[i] != 0.0) {
        throw ConsistencyError("masked weight " + std::to_string(i) + " of '" + name + "' is nonzero");
      }
  }
}

/// Fine-tunes the student under its masks. Masked positions are held at
/// exactly zero: in-graph by masked-assign and again after every step.
inline DistillResult distill(const MoEModel& teacher, const MoEModel& student, const MaskSet& masks,
                             const TokenSeq& corpus, const KDConfig& cfg,
                             const std::function<void(const DistillLogEntry&)>& on_step = {}) {
  check_same_architecture(teacher, student);
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  verify_masked_zero(student, masks);
  DistillResult res;
  res.student = student;
  const std::size_t total = distill_steps(cfg);
  if (total == 0) return res;

  SeededRng rng(cfg.seed);
  std::vector<TokenSeq> data = random_windows(corpus, cfg.samples, student.config.seq_len + 1, rng);

  Adam opt(res.student);
  const std::size_t per_epoch = total / cfg.epochs;
  std::size_t step = 0;
  std::optional<double> lambda = cfg.lambda;
  auto trainable = [&](const std::string& name) {
    if (!cfg.router_frozen) return true;
    return name.size() < 7 || name.compare(name.size() - 7, 7, ".router") != 0;
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(data);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(data.size(), begin + cfg.batch_size);
      const std::span<const TokenSeq> windows(data.data() + begin, end - begin);
      if (!lambda) {
        const LambdaInit li = init_lambda(teacher, res.student, windows, &masks);
        lambda = li.lambda;
        res.lambda_fallback = li.fallback;
      }
      Tape tape;
      BoundModel bound = bind_model(tape, res.student, &masks, trainable);
      KDGraph g = kd_graph(tape, teacher, res.student, bound, windows, *lambda);
      if (!std::isfinite(g.breakdown.total)) {
        throw NumericalError("distillation loss is non-finite at step " + std::to_string(step));
      }
      tape.backward(g.total);
      const double lr = cosine_lr(step, total, cfg.learning_rate);
      opt.step(res.student, bound, lr);
      for (const auto& [name, mask] : masks) mask.apply(res.student.parameter(name));
      res.log.push_back({step, lr, g.breakdown});
      if (on_step) on_step(res.log.back());
    }
  }
  res.lambda = lambda.value_or(0.0);
  return res;
}

}  // namespace moep
