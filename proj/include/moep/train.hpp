// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "moep/autograd.hpp"
#include "moep/model.hpp"
#include "moep/model_graph.hpp"
#include "moep/text.hpp"

namespace moep {

/// Cosine decay from `base` at step 0 to 0 at step total-1.
inline double cosine_lr(std::size_t step, std::size_t total, double base) {
  const double denom = static_cast<double>(std::max<std::size_t>(1, total - (total > 0 ? 1 : 0)));
  const double t = std::min(1.0, static_cast<double>(step) / denom);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

/// Adam over every model parameter, in parameter visit order.
class Adam {
 public:
  explicit Adam(const MoEModel& m, AdamConfig cfg = {}) : cfg_(cfg) {
    for_each_parameter(m.params, [&](const std::string&, const Matrix& w) {
      m_.emplace_back(w.rows(), w.cols());
      v_.emplace_back(w.rows(), w.cols());
    });
  }

  std::size_t steps() const noexcept { return t_; }

  /// Applies one update from the gradients held by `bound.leaves`.
  /// Parameters whose leaf does not require a gradient are left untouched.
  void step(MoEModel& m, const BoundModel& bound, double lr) {
    std::vector<const Var*> leaves;
    for_each_parameter(bound.leaves, [&](const std::string&, const Var& v) { leaves.push_back(&v); });
    std::vector<Matrix> grads(leaves.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      const Var& v = *leaves[i];
      if (!v.tape()->node(v.id()).needs_grad) continue;
      grads[i] = v.grad();
      for (double g : grads[i].values()) sq += g * g;
    }
    double clip = 1.0;
    if (cfg_.clip_norm > 0.0 && std::sqrt(sq) > cfg_.clip_norm) clip = cfg_.clip_norm / std::sqrt(sq);

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    for_each_parameter(m.params, [&](const std::string&, Matrix& w) {
      const std::size_t k = i++;
      if (grads[k].empty()) return;
      double* mw = m_[k].data();
      double* vw = v_[k].data();
      const double* g = grads[k].data();
      double* p = w.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        mw[j] = cfg_.beta1 * mw[j] + (1.0 - cfg_.beta1) * gj;
        vw[j] = cfg_.beta2 * vw[j] + (1.0 - cfg_.beta2) * gj * gj;
        p[j] -= lr * (mw[j] / bc1) / (std::sqrt(vw[j] / bc2) + cfg_.eps);
      }
    });
  }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 50;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// Plain next-token training on random corpus windows.
inline std::vector<TrainLogEntry> train_lm(MoEModel& m, const TokenSeq& corpus, const TrainConfig& cfg,
                                           const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  std::vector<TrainLogEntry> log;
  if (cfg.steps == 0) return log;
  SeededRng rng(cfg.seed);
  Adam opt(m, AdamConfig{.clip_norm = cfg.clip_norm});
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto windows = random_windows(corpus, cfg.batch_size, m.config.seq_len + 1, rng);
    const LmBatch batch = make_lm_batch(windows);
    Tape tape;
    BoundModel bound = bind_model(tape, m);
    GraphTrace tr = graph_forward(tape, m, bound.effective, batch.inputs);
    Var loss = ad::cross_entropy(tr.logits, batch.targets);
    const double lv = loss.value()(0, 0);
    if (!std::isfinite(lv)) throw NumericalError("training loss diverged (non-finite) at step " + std::to_string(s));
    tape.backward(loss);
    double lr = cosine_lr(s, cfg.steps, cfg.learning_rate);
    if (s < cfg.warmup_steps) lr *= static_cast<double>(s + 1) / static_cast<double>(cfg.warmup_steps);
    opt.step(m, bound, lr);
    log.push_back({s, lr, lv});
    if (on_step) on_step(log.back());
  }
  return log;
}

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_ce = 0.0;
  std::size_t token_count = 0;
};

/// exp(mean CE) over non-overlapping windows of seq_len+1 tokens (tail dropped).
inline PerplexityResult evaluate_perplexity(const MoEModel& m, const TokenSeq& corpus, std::size_t batch_size = 16) {
  const auto windows = contiguous_windows(corpus, m.config.seq_len + 1);
  if (windows.empty()) {
    throw InputError("evaluation corpus holds fewer than seq_len+1=" + std::to_string(m.config.seq_len + 1) +
                     " tokens");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t off = 0; off < windows.size(); off += batch_size) {
    const std::size_t end = std::min(windows.size(), off + batch_size);
    const LmBatch b = make_lm_batch(std::span<const TokenSeq>(windows.data() + off, end - off));
    const ForwardTrace tr = model_forward(m, b.inputs, false);
    total += ce_loss(tr.logits, b.targets) * static_cast<double>(b.targets.size());
    count += b.targets.size();
  }
  PerplexityResult r;
  r.token_count = count;
  r.mean_ce = total / static_cast<double>(count);
  if (!std::isfinite(r.mean_ce)) throw NumericalError("evaluation cross-entropy is non-finite");
  r.perplexity = std::exp(r.mean_ce);
  return r;
}

}  // namespace moep
