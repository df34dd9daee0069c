// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable forward pass. Mirrors model_forward() kernel-for-kernel so
// both routes produce identical values on identical weights.

#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moep/autograd.hpp"
#include "moep/mask.hpp"
#include "moep/model.hpp"

namespace moep {

/// Model parameters placed on a tape.
struct BoundModel {
  ModelParams<Var> leaves;     // gradients are read from these
  ModelParams<Var> effective;  // leaves after in-graph masking; used by the forward
};

/// `trainable(name)` decides requires_grad per parameter. Masked matrices get
/// a masked-assign node so pruned positions stay zero and receive no gradient.
template <class Pred>
BoundModel bind_model(Tape& tape, const MoEModel& m, const MaskSet* masks, Pred&& trainable) {
  BoundModel b;
  auto& lv = b.leaves;
  const auto& p = m.params;
  lv.blocks.resize(p.blocks.size());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& src = p.blocks[l];
    auto& dst = lv.blocks[l];
    dst.attn.wq.resize(src.attn.wq.size());
    dst.attn.wk.resize(src.attn.wk.size());
    dst.attn.wv.resize(src.attn.wv.size());
    dst.attn.wo.resize(src.attn.wo.size());
    dst.moe.experts.resize(src.moe.experts.size());
  }
  // Walk both containers in lockstep by collecting destination slots first.
  std::vector<Var*> slots;
  for_each_parameter(lv, [&](const std::string&, Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  for_each_parameter(p, [&](const std::string& name, const Matrix& w) {
    *slots[i++] = tape.leaf(w, trainable(name));
  });

  b.effective = lv;
  if (masks && !masks->empty()) {
    std::vector<Var*> eff;
    for_each_parameter(b.effective, [&](const std::string&, Var& v) { eff.push_back(&v); });
    i = 0;
    for_each_parameter(p, [&](const std::string& name, const Matrix& w) {
      Var* slot = eff[i++];
      auto it = masks->find(name);
      if (it == masks->end()) return;
      if (it->second.rows != w.rows() || it->second.cols != w.cols()) {
        throw ShapeError("mask for '" + name + "' does not match parameter shape " + w.shape());
      }
      *slot = ad::masked_assign(*slot, it->second.bits, 0.0);
    });
  }
  return b;
}

inline BoundModel bind_model(Tape& tape, const MoEModel& m, const MaskSet* masks = nullptr,
                             bool requires_grad = true) {
  return bind_model(tape, m, masks, [requires_grad](const std::string&) { return requires_grad; });
}

struct GraphLayerTrace {
  Var moe_input;
  GateMatrix gates;
};

struct GraphTrace {
  Var logits;
  std::vector<GraphLayerTrace> layers;
};

inline Var graph_expert_forward(const Var& x, const ExpertParams<Var>& e) {
  Var g = ad::silu(ad::matmul(x, e.w_gate, true));
  Var u = ad::matmul(x, e.w_up, true);
  return ad::matmul(ad::mul(g, u), e.w_down, true);
}

inline Var graph_attention_sublayer(const Var& x, const AttentionParams<Var>& a, std::size_t n_seq) {
  const std::size_t len = x.rows() / n_seq;
  const auto causal = causal_mask(len);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(a.wq.front().cols()));
  Var normed = ad::rms_norm(x);
  std::vector<Var> per_seq;
  per_seq.reserve(n_seq);
  std::vector<std::size_t> rows(len);
  for (std::size_t b = 0; b < n_seq; ++b) {
    std::iota(rows.begin(), rows.end(), b * len);
    Var xs = ad::gather_rows(normed, rows);
    Var out;
    for (std::size_t h = 0; h < a.wq.size(); ++h) {
      Var q = ad::matmul(xs, a.wq[h]);
      Var k = ad::matmul(xs, a.wk[h]);
      Var v = ad::matmul(xs, a.wv[h]);
      Var s = ad::masked_assign(ad::scale(ad::matmul(q, k, true), inv_sqrt), causal, kMaskedLogit);
      Var o = ad::matmul(ad::matmul(ad::row_softmax(s), v), a.wo[h]);
      out = h == 0 ? o : ad::add(out, o);
    }
    per_seq.push_back(out);
  }
  return ad::add(x, ad::stack_rows(per_seq));
}

/// Differentiable MoE layer. Returns y; fills `gates` with the routing used.
inline Var graph_moe_layer(Tape& tape, const Var& x, const MoELayerParams<Var>& layer, std::size_t k,
                           GateMatrix& gates) {
  const std::size_t n = layer.experts.size();
  Var logits = ad::matmul(x, layer.router);
  const auto sel = topk_mask(logits.value(), k);
  Var g = ad::row_softmax(ad::masked_assign(logits, sel, kMaskedLogit));
  gates.top_k = k;
  gates.logits = logits.value();
  gates.values = g.value();
  check_gates(gates);

  Var y;
  bool have_y = false;
  for (std::size_t e = 0; e < n; ++e) {
    auto idx = gates.dispatch(e);
    if (idx.empty()) continue;
    Matrix onehot(n, 1);
    onehot(e, 0) = 1.0;
    Var gcol = ad::gather_rows(ad::matmul(g, tape.constant(std::move(onehot))), idx);
    Var ye = graph_expert_forward(ad::gather_rows(x, idx), layer.experts[e]);
    Var contrib = ad::scatter_rows(ad::row_scale(ye, gcol), std::move(idx), x.rows());
    y = have_y ? ad::add(y, contrib) : contrib;
    have_y = true;
  }
  return y;
}

inline GraphTrace graph_forward(Tape& tape, const MoEModel& m, const ModelParams<Var>& p,
                                std::span<const TokenSeq> batch) {
  GraphTrace tr;
  const auto flat = flatten_batch(m.config, batch);
  Var x = ad::add(ad::gather_rows(p.tok_emb, flat),
                  ad::gather_rows(p.pos_emb, position_index(batch.size(), batch.front().size())));
  for (const auto& blk : p.blocks) {
    Var h = graph_attention_sublayer(x, blk.attn, batch.size());
    GraphLayerTrace lt;
    lt.moe_input = ad::rms_norm(h);
    Var y = graph_moe_layer(tape, lt.moe_input, blk.moe, m.config.top_k, lt.gates);
    x = ad::add(h, y);
    tr.layers.push_back(std::move(lt));
  }
  tr.logits = ad::matmul(ad::rms_norm(x), p.lm_head);
  return tr;
}

/// Next-token targets for a batch of windows: the inputs are window[0..L-1)
/// and targets window[1..L).
struct LmBatch {
  std::vector<TokenSeq> inputs;
  std::vector<std::size_t> targets;  // flattened, aligned with logits rows
};

inline LmBatch make_lm_batch(std::span<const TokenSeq> windows) {
  LmBatch b;
  for (const auto& w : windows) {
    if (w.size() < 2) throw InputError("window must hold at least two tokens");
    b.inputs.emplace_back(w.begin(), w.end() - 1);
    for (std::size_t i = 1; i < w.size(); ++i) b.targets.push_back(w[i]);
  }
  return b;
}

}  // namespace moep
