// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moep/error.hpp"
#include "moep/numerics.hpp"

namespace moep {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t n_experts = 4;
  std::size_t top_k = 2;
  std::size_t d_ff = 128;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;
  bool upcycle = false;  // clone expert 0 across each layer at init

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || n_experts == 0 ||
        d_ff == 0 || seq_len == 0) {
      throw ConfigError("all model dimensions must be positive");
    }
    if (top_k < 1 || top_k > n_experts) {
      throw ConfigError("top_k=" + std::to_string(top_k) + " must lie in [1, n_experts=" +
                        std::to_string(n_experts) + "]");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  /// Architecture equality (seed and init flags excluded).
  bool same_architecture(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && d_model == o.d_model && n_heads == o.n_heads &&
           n_layers == o.n_layers && n_experts == o.n_experts && top_k == o.top_k && d_ff == o.d_ff &&
           seq_len == o.seq_len;
  }
};

// ---------------------------------------------------------------------------
// Parameter containers, templated on the tensor type so the same layout
// serves plain matrices and tape variables.
//
// Expert matrices are stored output-major (rows = output neurons, cols =
// input features), so a pruning comparison group is one stored row.

template <class T>
struct ExpertParams {
  T w_gate;  // d_ff x d_model
  T w_up;    // d_ff x d_model
  T w_down;  // d_model x d_ff
};

template <class T>
struct AttentionParams {
  std::vector<T> wq, wk, wv;  // per head, d_model x d_head
  std::vector<T> wo;          // per head, d_head x d_model
};

template <class T>
struct MoELayerParams {
  T router;  // d_model x n_experts
  std::vector<ExpertParams<T>> experts;
};

template <class T>
struct BlockParams {
  AttentionParams<T> attn;
  MoELayerParams<T> moe;
};

template <class T>
struct ModelParams {
  T tok_emb;  // vocab x d_model
  T pos_emb;  // seq_len x d_model
  std::vector<BlockParams<T>> blocks;
  T lm_head;  // d_model x vocab
};

inline const char* const kProjections[3] = {"w_gate", "w_up", "w_down"};

inline std::string expert_param_name(std::size_t layer, std::size_t expert, std::string_view proj) {
  return "blocks." + std::to_string(layer) + ".moe.experts." + std::to_string(expert) + "." +
         std::string(proj);
}

inline std::string router_param_name(std::size_t layer) {
  return "blocks." + std::to_string(layer) + ".moe.router";
}

/// Visits every parameter in a fixed order with its stable name.
/// `P` is ModelParams<T> or const ModelParams<T>; f(const std::string&, T&).
template <class P, class F>
void for_each_parameter(P& p, F&& f) {
  f(std::string("tok_emb"), p.tok_emb);
  f(std::string("pos_emb"), p.pos_emb);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    for (std::size_t h = 0; h < b.attn.wq.size(); ++h) {
      const std::string hs = "." + std::to_string(h);
      f(pre + "attn.wq" + hs, b.attn.wq[h]);
      f(pre + "attn.wk" + hs, b.attn.wk[h]);
      f(pre + "attn.wv" + hs, b.attn.wv[h]);
      f(pre + "attn.wo" + hs, b.attn.wo[h]);
    }
    f(router_param_name(l), b.moe.router);
    for (std::size_t e = 0; e < b.moe.experts.size(); ++e) {
      auto& ex = b.moe.experts[e];
      f(expert_param_name(l, e, "w_gate"), ex.w_gate);
      f(expert_param_name(l, e, "w_up"), ex.w_up);
      f(expert_param_name(l, e, "w_down"), ex.w_down);
    }
  }
  f(std::string("lm_head"), p.lm_head);
}

using ExpertWeights = ExpertParams<Matrix>;
using MoELayer = MoELayerParams<Matrix>;

struct MoEModel {
  ModelConfig config;
  ModelParams<Matrix> params;

  Matrix* find_parameter(std::string_view name) {
    Matrix* out = nullptr;
    for_each_parameter(params, [&](const std::string& n, Matrix& m) {
      if (n == name) out = &m;
    });
    return out;
  }
  const Matrix* find_parameter(std::string_view name) const {
    return const_cast<MoEModel*>(this)->find_parameter(name);
  }
  Matrix& parameter(std::string_view name) {
    Matrix* m = find_parameter(name);
    if (!m) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return *m;
  }
  const Matrix& parameter(std::string_view name) const {
    return const_cast<MoEModel*>(this)->parameter(name);
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for_each_parameter(params, [&](const std::string& n, const Matrix&) { names.push_back(n); });
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter(params, [&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }
};

inline constexpr double kInitStd = 0.02;

/// Gaussian(0, 0.02) initialization in parameter visit order.
inline MoEModel init_model(const ModelConfig& cfg) {
  cfg.validate();
  MoEModel m;
  m.config = cfg;
  auto& p = m.params;
  const std::size_t d = cfg.d_model, dh = cfg.d_head();
  p.tok_emb = Matrix(cfg.vocab_size, d);
  p.pos_emb = Matrix(cfg.seq_len, d);
  p.blocks.resize(cfg.n_layers);
  for (auto& b : p.blocks) {
    b.attn.wq.assign(cfg.n_heads, Matrix(d, dh));
    b.attn.wk.assign(cfg.n_heads, Matrix(d, dh));
    b.attn.wv.assign(cfg.n_heads, Matrix(d, dh));
    b.attn.wo.assign(cfg.n_heads, Matrix(dh, d));
    b.moe.router = Matrix(d, cfg.n_experts);
    b.moe.experts.assign(cfg.n_experts,
                         ExpertWeights{Matrix(cfg.d_ff, d), Matrix(cfg.d_ff, d), Matrix(d, cfg.d_ff)});
  }
  p.lm_head = Matrix(d, cfg.vocab_size);

  SeededRng rng(cfg.seed);
  for_each_parameter(p, [&](const std::string&, Matrix& w) {
    for (double& v : w.values()) v = kInitStd * rng.normal();
  });
  if (cfg.upcycle) {
    for (auto& b : p.blocks)
      for (std::size_t e = 1; e < b.moe.experts.size(); ++e) b.moe.experts[e] = b.moe.experts[0];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Routing.

/// Fill value for logits of unselected experts; exp() of it underflows to 0.
inline constexpr double kMaskedLogit = -1e300;

/// Normalized top-k router weights for a batch of tokens.
struct GateMatrix {
  Matrix values;  // tokens x n_experts, top_k nonzeros per row
  Matrix logits;  // raw router logits
  std::size_t top_k = 0;

  /// Pre-normalization softmax over all experts, p(x).
  Matrix probabilities() const { return row_softmax(logits); }

  /// argmax p(x) per token, ties to the lowest expert index.
  std::vector<std::size_t> argmax() const {
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      auto r = logits.row(t);
      out[t] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
  }

  /// Token indices with a nonzero gate for expert e, ascending.
  std::vector<std::size_t> dispatch(std::size_t e) const {
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < values.rows(); ++t)
      if (values(t, e) != 0.0) idx.push_back(t);
    return idx;
  }
};

/// Row-major 0/1 selection mask of the top-k logits per row.
inline std::vector<std::uint8_t> topk_mask(const Matrix& logits, std::size_t k) {
  const std::size_t n = logits.cols();
  if (k < 1 || k > n) {
    throw ConfigError("top_k=" + std::to_string(k) + " exceeds n_experts=" + std::to_string(n));
  }
  std::vector<std::uint8_t> mask(logits.size(), 0);
  std::vector<std::size_t> order(n);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto r = logits.row(t);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
    for (std::size_t i = 0; i < k; ++i) mask[t * n + order[i]] = 1;
  }
  return mask;
}

inline Matrix apply_logit_mask(const Matrix& logits, std::span<const std::uint8_t> mask) {
  Matrix out = logits;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out.data()[i] = kMaskedLogit;
  return out;
}

inline void check_gates(const GateMatrix& g) {
  for (std::size_t t = 0; t < g.values.rows(); ++t) {
    double s = 0.0;
    std::size_t nz = 0;
    for (double v : g.values.row(t)) {
      s += v;
      nz += v != 0.0;
    }
    if (std::abs(s - 1.0) > 1e-12 || nz != g.top_k) {
      throw NumericalError("gate row " + std::to_string(t) + " is not a normalized top-" +
                           std::to_string(g.top_k) + " distribution");
    }
  }
}

/// Top-k softmax gate: softmax over the k largest logits, zeros elsewhere.
inline GateMatrix route(const Matrix& x, const Matrix& router, std::size_t k) {
  GateMatrix g;
  g.top_k = k;
  g.logits = matmul(x, router);
  const auto mask = topk_mask(g.logits, k);
  g.values = row_softmax(apply_logit_mask(g.logits, mask));
  check_gates(g);
  return g;
}

// ---------------------------------------------------------------------------
// Experts and the MoE layer.

/// SwiGLU intermediate silu(x W_gate^T) * (x W_up^T), tokens x d_ff.
inline Matrix expert_hidden(const Matrix& x, const ExpertWeights& e) {
  if (x.cols() != e.w_gate.cols()) {
    throw ShapeError("expert input " + x.shape() + " does not match w_gate " + e.w_gate.shape());
  }
  return hadamard(silu(matmul_nt(x, e.w_gate)), matmul_nt(x, e.w_up));
}

inline Matrix expert_forward(const Matrix& x, const ExpertWeights& e) {
  return matmul_nt(expert_hidden(x, e), e.w_down);
}

struct MoEOutput {
  Matrix y;
  GateMatrix gates;
  std::vector<std::vector<std::size_t>> tokens;  // per expert dispatch set
  std::vector<Matrix> expert_outputs;            // per expert, unscaled E_i(x) on its tokens
};

/// y[t] = sum_i gate[t,i] * E_i(x[t]); experts run only on tokens routed to them.
inline MoEOutput moe_layer_forward(const Matrix& x, const MoELayer& layer, std::size_t k) {
  MoEOutput out;
  out.gates = route(x, layer.router, k);
  out.y = Matrix(x.rows(), x.cols());
  const std::size_t n = layer.experts.size();
  out.tokens.resize(n);
  out.expert_outputs.resize(n);
  for (std::size_t e = 0; e < n; ++e) {
    out.tokens[e] = out.gates.dispatch(e);
    if (out.tokens[e].empty()) continue;
    const Matrix xe = gather_rows(x, out.tokens[e]);
    out.expert_outputs[e] = expert_forward(xe, layer.experts[e]);
    const Matrix& ye = out.expert_outputs[e];
    if (ye.cols() != out.y.cols()) throw ShapeError("expert output width does not match d_model");
    for (std::size_t r = 0; r < out.tokens[e].size(); ++r) {
      const double gv = out.gates.values(out.tokens[e][r], e);
      auto dst = out.y.row(out.tokens[e][r]);
      auto src = ye.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * gv;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention and the full forward pass (no tape).

/// Row-major L x L lower-triangular keep mask.
inline std::vector<std::uint8_t> causal_mask(std::size_t len) {
  std::vector<std::uint8_t> m(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * len + j] = 1;
  return m;
}

/// Causal multi-head attention on one normalized sequence (L x d_model).
inline Matrix attention_sequence(const Matrix& x, const AttentionParams<Matrix>& a,
                                 std::span<const std::uint8_t> causal) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(a.wq.front().cols()));
  Matrix out;
  for (std::size_t h = 0; h < a.wq.size(); ++h) {
    const Matrix q = matmul(x, a.wq[h]);
    const Matrix k = matmul(x, a.wk[h]);
    const Matrix v = matmul(x, a.wv[h]);
    Matrix s = scale(matmul_nt(q, k), inv_sqrt);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!causal[i]) s.data()[i] = kMaskedLogit;
    const Matrix o = matmul(matmul(row_softmax(s), v), a.wo[h]);
    out = h == 0 ? o : add(out, o);
  }
  return out;
}

/// x + attention(rms_norm(x)) over a batch of `n_seq` stacked sequences.
inline Matrix attention_sublayer(const Matrix& x, const AttentionParams<Matrix>& a, std::size_t n_seq) {
  const std::size_t len = x.rows() / n_seq;
  const Matrix normed = rms_norm(x);
  const auto causal = causal_mask(len);
  Matrix att(x.rows(), x.cols());
  std::vector<std::size_t> rows(len);
  for (std::size_t b = 0; b < n_seq; ++b) {
    std::iota(rows.begin(), rows.end(), b * len);
    const Matrix o = attention_sequence(gather_rows(normed, rows), a, causal);
    std::copy_n(o.data(), o.size(), att.data() + b * len * x.cols());
  }
  return add(x, att);
}

/// Validates a batch of equal-length sequences and flattens the tokens.
inline std::vector<std::size_t> flatten_batch(const ModelConfig& cfg, std::span<const TokenSeq> batch) {
  if (batch.empty()) throw InputError("empty batch");
  const std::size_t len = batch.front().size();
  if (len == 0) throw InputError("empty sequence");
  if (len > cfg.seq_len) {
    throw InputError("sequence length " + std::to_string(len) + " exceeds seq_len " +
                     std::to_string(cfg.seq_len));
  }
  std::vector<std::size_t> flat;
  flat.reserve(batch.size() * len);
  for (const auto& s : batch) {
    if (s.size() != len) throw ShapeError("sequences in a batch must share one length");
    for (Token t : s) {
      if (t >= cfg.vocab_size) throw InputError("token " + std::to_string(t) + " is out of vocabulary");
      flat.push_back(t);
    }
  }
  return flat;
}

inline std::vector<std::size_t> position_index(std::size_t n_seq, std::size_t len) {
  std::vector<std::size_t> pos(n_seq * len);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % len;
  return pos;
}

/// Token + position embeddings for a batch, stacked (n_seq*len) x d_model.
inline Matrix embed(const MoEModel& m, std::span<const TokenSeq> batch) {
  const auto flat = flatten_batch(m.config, batch);
  return add(gather_rows(m.params.tok_emb, flat),
             gather_rows(m.params.pos_emb, position_index(batch.size(), batch.front().size())));
}

struct LayerTrace {
  Matrix moe_input;  // rms_norm of the post-attention residual
  MoEOutput moe;
};

struct ForwardTrace {
  Matrix logits;  // (n_seq*len) x vocab
  std::vector<LayerTrace> layers;
};

inline ForwardTrace model_forward(const MoEModel& m, std::span<const TokenSeq> batch, bool keep_trace = true) {
  ForwardTrace tr;
  Matrix x = embed(m, batch);
  for (const auto& blk : m.params.blocks) {
    const Matrix h = attention_sublayer(x, blk.attn, batch.size());
    LayerTrace lt;
    lt.moe_input = rms_norm(h);
    lt.moe = moe_layer_forward(lt.moe_input, blk.moe, m.config.top_k);
    x = add(h, lt.moe.y);
    if (keep_trace) tr.layers.push_back(std::move(lt));
  }
  tr.logits = matmul(rms_norm(x), m.params.lm_head);
  return tr;
}

inline ForwardTrace model_forward(const MoEModel& m, const TokenSeq& tokens) {
  return model_forward(m, std::span<const TokenSeq>(&tokens, 1));
}

/// Mean next-token cross entropy (natural log).
inline double ce_loss(const Matrix& logits, std::span<const std::size_t> targets) {
  if (targets.size() != logits.rows()) throw ShapeError("ce_loss: target count does not match logits rows");
  double loss = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] >= logits.cols()) throw InputError("ce_loss: target out of vocabulary");
    auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    loss += mx + std::log(se) - row[targets[r]];
  }
  return loss / static_cast<double>(std::max<std::size_t>(1, logits.rows()));
}

}  // namespace moep
