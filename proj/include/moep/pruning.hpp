// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// One-shot expert-weight pruning.
//
// Weight matrices are output-major: each row is one output neuron and is the
// comparison group inside which weights compete (per aligned group of m
// columns for n:m sparsity). Lower score is pruned first; equal scores prune
// the lower column index first.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moep/calibration.hpp"
#include "moep/error.hpp"
#include "moep/mask.hpp"
#include "moep/model.hpp"
#include "moep/numerics.hpp"

namespace moep {

enum class PruneMethod { kMagnitude, kWanda, kMoEPruner, kSparseGpt };

inline std::string to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::kMagnitude: return "magnitude";
    case PruneMethod::kWanda: return "wanda";
    case PruneMethod::kMoEPruner: return "moe-pruner";
    case PruneMethod::kSparseGpt: return "sparsegpt";
  }
  return "?";
}

inline PruneMethod parse_prune_method(std::string_view s) {
  if (s == "magnitude") return PruneMethod::kMagnitude;
  if (s == "wanda") return PruneMethod::kWanda;
  if (s == "moe-pruner" || s == "moe_pruner") return PruneMethod::kMoEPruner;
  if (s == "sparsegpt") return PruneMethod::kSparseGpt;
  throw ConfigError("unknown pruning method '" + std::string(s) + "'");
}

/// Unstructured fraction p per row, or n:m semi-structured.
class SparsityTarget {
 public:
  enum class Kind { kUnstructured, kSemiStructured };

  static SparsityTarget unstructured(double p) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("sparsity " + std::to_string(p) + " must lie in [0, 1)");
    SparsityTarget t;
    t.kind_ = Kind::kUnstructured;
    t.p_ = p;
    return t;
  }

  static SparsityTarget semi_structured(std::size_t n_keep, std::size_t m_group) {
    if (!(n_keep > 0 && n_keep < m_group)) {
      throw ConfigError("n:m pattern requires 0 < n < m, got " + std::to_string(n_keep) + ":" +
                        std::to_string(m_group));
    }
    SparsityTarget t;
    t.kind_ = Kind::kSemiStructured;
    t.n_ = n_keep;
    t.m_ = m_group;
    return t;
  }

  /// "0.5" or "2:4".
  static SparsityTarget parse(std::string_view s) {
    const auto colon = s.find(':');
    try {
      if (colon == std::string_view::npos) return unstructured(std::stod(std::string(s)));
      return semi_structured(std::stoul(std::string(s.substr(0, colon))), std::stoul(std::string(s.substr(colon + 1))));
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse sparsity target '" + std::string(s) + "'");
    }
  }

  Kind kind() const noexcept { return kind_; }
  double fraction() const noexcept { return p_; }
  std::size_t n_keep() const noexcept { return n_; }
  std::size_t m_group() const noexcept { return m_; }

  /// Zeros per row of width `cols`.
  std::size_t zeros_per_row(std::size_t cols) const {
    if (kind_ == Kind::kSemiStructured) return cols / m_ * (m_ - n_);
    // Small slack keeps products such as 0.29 * 100 from flooring to 28.
    return static_cast<std::size_t>(std::floor(p_ * static_cast<double>(cols) + 1e-9));
  }

  std::string to_string() const {
    if (kind_ == Kind::kSemiStructured) return std::to_string(n_) + ":" + std::to_string(m_);
    std::ostringstream os;
    os << p_;
    return os.str();
  }

 private:
  Kind kind_ = Kind::kUnstructured;
  double p_ = 0.0;
  std::size_t n_ = 0;
  std::size_t m_ = 0;
};

using ScoreMatrix = Matrix;

// ---------------------------------------------------------------------------
// Metrics.

/// |W|
inline ScoreMatrix score_magnitude(const Matrix& w) {
  ScoreMatrix s = w;
  for (double& v : s.values()) v = std::abs(v);
  return s;
}

/// |W_ij| * norms[j]
inline ScoreMatrix score_wanda(const Matrix& w, std::span<const double> norms) {
  if (norms.size() != w.cols()) {
    throw ShapeError("wanda: " + std::to_string(norms.size()) + " feature norms for weight " + w.shape());
  }
  ScoreMatrix s(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) s(i, j) = std::abs(w(i, j)) * norms[j];
  return s;
}

/// |W_ij| * ||X_j * Gate_j||, the router-weighted activation metric.
inline ScoreMatrix score_moe_pruner(const Matrix& w, const ScaledNormAccumulator& acc, std::string_view target) {
  if (acc.target != target) {
    throw ContractError("accumulator for '" + acc.target + "' used to score '" + std::string(target) + "'");
  }
  return score_wanda(w, acc.norms());
}

struct SparseGptScores {
  ScoreMatrix scores;
  Matrix h_inv;  // inverse of the dampened Hessian
};

/// W_ij^2 / [H'^-1]_jj with H' = H + damp * mean(diag H) * I. Features that
/// never fired (zero diagonal) get a unit diagonal so H' stays invertible.
inline SparseGptScores score_sparsegpt(const Matrix& w, const HessianAccumulator& hacc, double damp_frac = 0.01) {
  if (damp_frac < 0.0) throw ConfigError("dampening fraction must be nonnegative");
  const Matrix& h = hacc.h;
  if (h.rows() != w.cols() || h.cols() != w.cols()) {
    throw ShapeError("sparsegpt: Hessian " + h.shape() + " does not match weight " + w.shape());
  }
  Matrix hd = h;
  double mean_diag = 0.0;
  for (std::size_t j = 0; j < hd.rows(); ++j) mean_diag += hd(j, j);
  mean_diag /= static_cast<double>(std::max<std::size_t>(1, hd.rows()));
  for (std::size_t j = 0; j < hd.rows(); ++j) {
    if (hd(j, j) == 0.0) hd(j, j) = 1.0;
    hd(j, j) += damp_frac * mean_diag;
  }
  SparseGptScores out;
  out.h_inv = spd_inverse(hd);
  out.scores = Matrix(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out.scores(i, j) = w(i, j) * w(i, j) / out.h_inv(j, j);
  return out;
}

// ---------------------------------------------------------------------------
// Mask selection.

namespace detail {

/// Marks the `count` lowest-scoring positions of [begin, end) in `row` as pruned.
inline void prune_lowest(std::span<const double> scores, std::size_t begin, std::size_t end, std::size_t count,
                         std::span<std::uint8_t> row_bits, std::vector<std::size_t>& order) {
  order.resize(end - begin);
  std::iota(order.begin(), order.end(), begin);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  for (std::size_t i = 0; i < count; ++i) row_bits[order[i]] = 0;
}

}  // namespace detail

inline SparsityMask select_mask(const ScoreMatrix& scores, const SparsityTarget& target, std::string name = {}) {
  SparsityMask mask(std::move(name), scores.rows(), scores.cols());
  const std::size_t cols = scores.cols();
  std::vector<std::size_t> order;
  if (target.kind() == SparsityTarget::Kind::kUnstructured) {
    const std::size_t k = target.zeros_per_row(cols);
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      detail::prune_lowest(scores.row(r), 0, cols, k, std::span(mask.bits).subspan(r * cols, cols), order);
    }
  } else {
    const std::size_t m = target.m_group();
    if (cols % m != 0) {
      throw ConfigError("n:m pattern with m=" + std::to_string(m) + " does not divide " + std::to_string(cols) +
                        " columns");
    }
    const std::size_t k = m - target.n_keep();
    for (std::size_t r = 0; r < scores.rows(); ++r)
      for (std::size_t g = 0; g < cols; g += m)
        detail::prune_lowest(scores.row(r), g, g + m, k, std::span(mask.bits).subspan(r * cols, cols), order);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Weight update and reconstruction error.

/// Sequential OBS compensation. Columns are swept left to right; each pruned
/// weight's error is pushed onto the remaining columns of its row through the
/// upper Cholesky factor U of H^-1 (H^-1 = U^T U), whose row j is the inverse
/// Hessian restricted to columns j.. after eliminating columns < j.
inline Matrix obs_update(const Matrix& w, const SparsityMask& mask, const Matrix& h_inv) {
  if (mask.rows != w.rows() || mask.cols != w.cols()) throw ShapeError("obs_update: mask does not match weight");
  if (h_inv.rows() != w.cols() || h_inv.cols() != w.cols()) {
    throw ShapeError("obs_update: inverse Hessian " + h_inv.shape() + " does not match weight " + w.shape());
  }
  const std::size_t n = w.cols();
  for (std::size_t j = 0; j < n; ++j) {
    if (!(h_inv(j, j) > 0.0)) throw NumericalError("obs_update: non-positive inverse-Hessian diagonal at " + std::to_string(j));
  }
  const Matrix upper = transpose(cholesky(h_inv));
  Matrix out = w;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = upper(j, j);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      if (mask.keep(i, j)) continue;
      const double err = out(i, j) / d;
      auto row = out.row(i);
      for (std::size_t c = j + 1; c < n; ++c) row[c] -= err * upper(j, c);
      row[j] = 0.0;
    }
  }
  return out;
}

/// ||(W - W_pruned) X^T||_F with X holding one token per row.
inline double reconstruction_error(const Matrix& w, const Matrix& w_pruned, const Matrix& x) {
  if (!w.same_shape(w_pruned)) throw ShapeError("reconstruction_error: " + w.shape() + " vs " + w_pruned.shape());
  if (x.cols() != w.cols()) throw ShapeError("reconstruction_error: inputs " + x.shape() + " vs weight " + w.shape());
  if (x.rows() == 0) return 0.0;
  return frobenius_norm(matmul_nt(sub(w, w_pruned), x));
}

// ---------------------------------------------------------------------------
// Whole-model pruning.

enum class Propagation { kDense, kRecompute };

inline std::string to_string(Propagation p) { return p == Propagation::kDense ? "dense" : "recompute"; }

inline Propagation parse_propagation(std::string_view s) {
  if (s == "dense") return Propagation::kDense;
  if (s == "recompute") return Propagation::kRecompute;
  throw ConfigError("unknown propagation mode '" + std::string(s) + "'");
}

struct PruneOptions {
  Propagation propagate = Propagation::kDense;
  double damp_frac = 0.01;
  bool gate_scaled_hessian = false;  // non-standard SparseGPT hybrid
  bool unit_gates = false;           // test hook, see CollectOptions
  std::optional<bool> weight_update;  // default: on for sparsegpt only
};

struct PruneReportEntry {
  std::string target;
  double sparsity = 0.0;
  double error_before_update = 0.0;  // ||WX - (M.W)X||
  double error_after_update = 0.0;   // equals error_before_update without an update
};

struct PruneReport {
  std::string method;
  std::string sparsity_target;
  std::string propagate;
  bool weight_update = false;
  std::vector<PruneReportEntry> entries;
  std::size_t pruned_weights = 0;
  std::size_t total_weights = 0;
  double total_error = 0.0;

  double achieved_sparsity() const {
    return total_weights == 0 ? 0.0 : static_cast<double>(pruned_weights) / static_cast<double>(total_weights);
  }
};

inline nlohmann::ordered_json to_json(const PruneReport& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["sparsity_target"] = r.sparsity_target;
  j["propagate"] = r.propagate;
  j["weight_update"] = r.weight_update;
  j["totals"] = {{"pruned_weights", r.pruned_weights},
                 {"total_weights", r.total_weights},
                 {"sparsity", r.achieved_sparsity()},
                 {"reconstruction_error", r.total_error}};
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    arr.push_back({{"target", e.target},
                   {"sparsity", e.sparsity},
                   {"error_before_update", e.error_before_update},
                   {"error_after_update", e.error_after_update}});
  }
  j["entries"] = std::move(arr);
  return j;
}

struct PruneResult {
  MoEModel model;
  MaskSet masks;
  PruneReport report;
};

/// Scores, masks (and for SparseGPT updates) one weight matrix in place.
inline SparsityMask prune_matrix(Matrix& w, const std::string& name, const Matrix& inputs, const CalibrationStats& stats,
                                 PruneMethod method, const SparsityTarget& target, const PruneOptions& opt,
                                 PruneReportEntry& entry) {
  const Matrix original = w;
  std::optional<SparseGptScores> sg;
  ScoreMatrix scores;
  switch (method) {
    case PruneMethod::kMagnitude: scores = score_magnitude(w); break;
    case PruneMethod::kWanda: scores = score_wanda(w, stats.plain_for(name).norms()); break;
    case PruneMethod::kMoEPruner: scores = score_moe_pruner(w, stats.scaled_for(name), name); break;
    case PruneMethod::kSparseGpt:
      sg = score_sparsegpt(w, stats.hessian_for(name), opt.damp_frac);
      scores = sg->scores;
      break;
  }
  SparsityMask mask = select_mask(scores, target, name);
  Matrix zeroed = original;
  mask.apply(zeroed);
  entry.target = name;
  entry.sparsity = mask.sparsity();
  entry.error_before_update = reconstruction_error(original, zeroed, inputs);
  const bool update = opt.weight_update.value_or(method == PruneMethod::kSparseGpt);
  if (update && mask.zeros() > 0) {
    const Matrix h_inv = sg ? sg->h_inv : score_sparsegpt(w, stats.hessian_for(name), opt.damp_frac).h_inv;
    w = obs_update(original, mask, h_inv);
    entry.error_after_update = reconstruction_error(original, w, inputs);
  } else {
    w = std::move(zeroed);
    entry.error_after_update = entry.error_before_update;
  }
  return mask;
}

/// Layer-by-layer pruning of every expert matrix. Attention and router
/// weights are never touched. In dense mode the next layer's inputs come from
/// the unpruned layer; in recompute mode from the pruned one. `precomputed`
/// stats (dense mode only) replace the per-layer collection.
inline PruneResult prune_model(const MoEModel& model, const CalibrationSet& cal, PruneMethod method,
                               const SparsityTarget& target, const PruneOptions& opt = {},
                               const CalibrationStats* precomputed = nullptr) {
  if (cal.sequences.empty()) throw InputError("empty calibration set");
  if (precomputed) {
    if (opt.propagate != Propagation::kDense) throw ConfigError("precomputed statistics require dense propagation");
    try {
      check_stats_compatible(*precomputed, model.config);
    } catch (const ShapeError& e) {
      throw ContractError(e.what());
    }
  }
  PruneResult res;
  res.model = model;
  auto& rep = res.report;
  rep.method = to_string(method);
  rep.sparsity_target = target.to_string();
  rep.propagate = to_string(opt.propagate);
  rep.weight_update = opt.weight_update.value_or(method == PruneMethod::kSparseGpt);

  const CollectOptions copt{.frequency_mode = FrequencyMode::kArgmax,
                            .unit_gates = opt.unit_gates,
                            .gate_scaled_hessian = opt.gate_scaled_hessian};
  CalibrationStats local = empty_stats(model.config, FrequencyMode::kArgmax);
  const CalibrationStats& stats = precomputed ? *precomputed : local;

  const std::size_t n_seq = cal.sequences.size();
  Matrix x = embed(model, cal.sequences);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    auto& blk = res.model.params.blocks[l];
    const Matrix h = attention_sublayer(x, blk.attn, n_seq);
    const Matrix u = rms_norm(h);
    const GateMatrix gates = route(u, blk.moe.router, model.config.top_k);
    if (!precomputed) accumulate_layer(local, l, u, gates, blk.moe, copt);
    Matrix next;
    if (opt.propagate == Propagation::kDense) next = add(h, moe_layer_forward(u, blk.moe, model.config.top_k).y);

    for (std::size_t e = 0; e < blk.moe.experts.size(); ++e) {
      auto& ex = blk.moe.experts[e];
      const ExpertInputs in = expert_inputs(u, gates, e, ex);
      Matrix* mats[3] = {&ex.w_gate, &ex.w_up, &ex.w_down};
      for (int k = 0; k < 3; ++k) {
        const std::string name = expert_param_name(l, e, kProjections[k]);
        PruneReportEntry entry;
        SparsityMask mask = prune_matrix(*mats[k], name, k == 2 ? in.hidden : in.x, stats, method, target, opt, entry);
        rep.pruned_weights += mask.zeros();
        rep.total_weights += mask.bits.size();
        rep.total_error += entry.error_after_update;
        rep.entries.push_back(std::move(entry));
        res.masks.emplace(name, std::move(mask));
      }
    }
    if (opt.propagate == Propagation::kRecompute) next = add(h, moe_layer_forward(u, blk.moe, model.config.top_k).y);
    x = std::move(next);
  }
  return res;
}

/// Mask exactness check used by tests and the CLI.
inline bool mask_is_exact(const SparsityMask& m, const SparsityTarget& t) {
  if (t.kind() == SparsityTarget::Kind::kUnstructured) {
    const std::size_t k = t.zeros_per_row(m.cols);
    for (std::size_t r = 0; r < m.rows; ++r)
      if (m.row_zeros(r) != k) return false;
    return true;
  }
  const std::size_t g = t.m_group(), want = t.m_group() - t.n_keep();
  if (m.cols % g != 0) return false;
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c0 = 0; c0 < m.cols; c0 += g) {
      std::size_t z = 0;
      for (std::size_t c = c0; c < c0 + g; ++c) z += !m.keep(r, c);
      if (z != want) return false;
    }
  return true;
}

}  // namespace moep
