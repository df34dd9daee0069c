// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Calibration statistics for one-shot pruning.
//
// For every expert matrix we keep, over the calibration tokens dispatched to
// that expert:
//   * gate-scaled squared input norms  sum_t (x_tj * g_t)^2
//   * plain squared input norms        sum_t x_tj^2
//   * the input Gram matrix            X^T X
// w_gate and w_up see the MoE-layer input; w_down sees the SwiGLU
// intermediate. g_t is the token's normalized top-k router weight.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moep/container.hpp"
#include "moep/error.hpp"
#include "moep/model.hpp"
#include "moep/numerics.hpp"
#include "moep/text.hpp"

namespace moep {

struct CalibrationSet {
  std::vector<TokenSeq> sequences;
  std::uint64_t seed = 0;

  std::size_t nsamples() const noexcept { return sequences.size(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

/// `nsamples` windows of `seq_len` tokens at seeded-random offsets.
inline CalibrationSet build_calibration_set(const TokenSeq& corpus, std::size_t nsamples, std::size_t seq_len,
                                            std::uint64_t seed) {
  if (nsamples == 0) throw ConfigError("nsamples must be positive");
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  if (corpus.size() < seq_len || corpus.size() / seq_len < nsamples) {
    throw InputError("corpus of " + std::to_string(corpus.size()) + " tokens is too short for " +
                     std::to_string(nsamples) + " windows of " + std::to_string(seq_len) + " tokens");
  }
  SeededRng rng(seed);
  CalibrationSet cal;
  cal.seed = seed;
  cal.sequences = random_windows(corpus, nsamples, seq_len, rng);
  return cal;
}

/// Streaming sum_t (x_tj * g_t)^2 for one weight matrix's input features.
struct ScaledNormAccumulator {
  std::string target;
  std::vector<double> sum_sq;
  std::size_t tokens_seen = 0;

  ScaledNormAccumulator() = default;
  ScaledNormAccumulator(std::string name, std::size_t d_in) : target(std::move(name)), sum_sq(d_in, 0.0) {}

  void add(std::span<const double> x, double gate) {
    if (x.size() != sum_sq.size()) throw ShapeError("accumulator '" + target + "': feature width mismatch");
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double v = x[j] * gate;
      sum_sq[j] += v * v;
    }
    ++tokens_seen;
  }

  /// ||X_j * Gate_j||_2 per feature j.
  std::vector<double> norms() const {
    std::vector<double> out(sum_sq.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::sqrt(sum_sq[j]);
    return out;
  }

  friend bool operator==(const ScaledNormAccumulator&, const ScaledNormAccumulator&) = default;
};

/// Streaming X^T X over the unscaled inputs of one weight matrix.
struct HessianAccumulator {
  std::string target;
  Matrix h;
  std::size_t tokens_seen = 0;

  HessianAccumulator() = default;
  HessianAccumulator(std::string name, std::size_t d_in) : target(std::move(name)), h(d_in, d_in) {}

  /// Adds x^T x for a block of token rows.
  void add(const Matrix& x) {
    add_inplace(h, matmul_tn(x, x));
    tokens_seen += x.rows();
  }

  friend bool operator==(const HessianAccumulator&, const HessianAccumulator&) = default;
};

enum class FrequencyMode { kArgmax, kTopK };

inline std::string to_string(FrequencyMode m) { return m == FrequencyMode::kArgmax ? "argmax" : "topk"; }

inline FrequencyMode parse_frequency_mode(std::string_view s) {
  if (s == "argmax") return FrequencyMode::kArgmax;
  if (s == "topk" || s == "top-k") return FrequencyMode::kTopK;
  throw ConfigError("unknown frequency mode '" + std::string(s) + "'");
}

/// Per-layer expert dispatch counts.
struct FrequencyTable {
  FrequencyMode mode = FrequencyMode::kArgmax;
  std::vector<std::vector<std::uint64_t>> counts;  // [layer][expert]
  std::uint64_t tokens = 0;                        // tokens per layer

  void add_layer_tokens(std::size_t layer, const GateMatrix& g) {
    auto& c = counts.at(layer);
    if (mode == FrequencyMode::kArgmax) {
      for (std::size_t e : g.argmax()) ++c[e];
    } else {
      for (std::size_t t = 0; t < g.values.rows(); ++t)
        for (std::size_t e = 0; e < g.values.cols(); ++e)
          if (g.values(t, e) != 0.0) ++c[e];
    }
  }

  friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;
};

struct CalibrationStats {
  std::size_t n_layers = 0;
  std::size_t n_experts = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::map<std::string, ScaledNormAccumulator> scaled;  // gate-scaled
  std::map<std::string, ScaledNormAccumulator> plain;   // gate fixed to 1
  std::map<std::string, HessianAccumulator> hessian;
  FrequencyTable frequency;

  const ScaledNormAccumulator& scaled_for(const std::string& name) const { return lookup(scaled, name); }
  const ScaledNormAccumulator& plain_for(const std::string& name) const { return lookup(plain, name); }
  const HessianAccumulator& hessian_for(const std::string& name) const { return lookup(hessian, name); }

  friend bool operator==(const CalibrationStats&, const CalibrationStats&) = default;

 private:
  template <class M>
  static const typename M::mapped_type& lookup(const M& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw ContractError("no calibration statistics for '" + name + "'");
    return it->second;
  }
};

struct CollectOptions {
  FrequencyMode frequency_mode = FrequencyMode::kArgmax;
  bool unit_gates = false;           // test hook: every dispatched token uses gate 1
  bool gate_scaled_hessian = false;  // hybrid baseline: Hessian of gate-scaled inputs
};

inline CalibrationStats empty_stats(const ModelConfig& cfg, FrequencyMode mode) {
  CalibrationStats s;
  s.n_layers = cfg.n_layers;
  s.n_experts = cfg.n_experts;
  s.d_model = cfg.d_model;
  s.d_ff = cfg.d_ff;
  s.frequency.mode = mode;
  s.frequency.counts.assign(cfg.n_layers, std::vector<std::uint64_t>(cfg.n_experts, 0));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
      for (const char* proj : kProjections) {
        const std::string name = expert_param_name(l, e, proj);
        const std::size_t d_in = std::string_view(proj) == "w_down" ? cfg.d_ff : cfg.d_model;
        s.scaled.emplace(name, ScaledNormAccumulator(name, d_in));
        s.plain.emplace(name, ScaledNormAccumulator(name, d_in));
        s.hessian.emplace(name, HessianAccumulator(name, d_in));
      }
    }
  }
  return s;
}

/// Routed inputs of one expert's three matrices, with each token's gate.
struct ExpertInputs {
  std::vector<std::size_t> tokens;
  std::vector<double> gates;
  Matrix x;       // inputs to w_gate / w_up
  Matrix hidden;  // inputs to w_down
};

inline ExpertInputs expert_inputs(const Matrix& u, const GateMatrix& g, std::size_t e, const ExpertWeights& w) {
  ExpertInputs in;
  in.tokens = g.dispatch(e);
  in.gates.reserve(in.tokens.size());
  for (std::size_t t : in.tokens) in.gates.push_back(g.values(t, e));
  in.x = gather_rows(u, in.tokens);
  in.hidden = in.tokens.empty() ? Matrix(0, w.w_down.cols()) : expert_hidden(in.x, w);
  return in;
}

/// Folds one layer's routed calibration tokens into `stats`.
inline void accumulate_layer(CalibrationStats& stats, std::size_t layer, const Matrix& u, const GateMatrix& g,
                             const MoELayer& weights, const CollectOptions& opt = {}) {
  stats.frequency.add_layer_tokens(layer, g);
  for (std::size_t e = 0; e < weights.experts.size(); ++e) {
    const ExpertInputs in = expert_inputs(u, g, e, weights.experts[e]);
    if (in.tokens.empty()) continue;
    for (const char* proj : kProjections) {
      const std::string name = expert_param_name(layer, e, proj);
      const Matrix& x = std::string_view(proj) == "w_down" ? in.hidden : in.x;
      auto& sc = stats.scaled.at(name);
      auto& pl = stats.plain.at(name);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        sc.add(x.row(r), opt.unit_gates ? 1.0 : in.gates[r]);
        pl.add(x.row(r), 1.0);
      }
      if (opt.gate_scaled_hessian && !opt.unit_gates) {
        Matrix xs = x;
        for (std::size_t r = 0; r < xs.rows(); ++r)
          for (double& v : xs.row(r)) v *= in.gates[r];
        stats.hessian.at(name).add(xs);
      } else {
        stats.hessian.at(name).add(x);
      }
    }
  }
}

struct CollectResult {
  CalibrationStats stats;
  std::vector<Matrix> layer_inputs;  // per layer, MoE-layer input for all calibration tokens
  std::vector<GateMatrix> gates;     // per layer
};

/// Streams the calibration set through the dense model.
inline CollectResult collect(const MoEModel& m, const CalibrationSet& cal, const CollectOptions& opt = {}) {
  if (cal.sequences.empty()) throw InputError("empty calibration set");
  CollectResult res;
  res.stats = empty_stats(m.config, opt.frequency_mode);
  ForwardTrace tr = model_forward(m, cal.sequences);
  for (std::size_t l = 0; l < tr.layers.size(); ++l) {
    auto& lt = tr.layers[l];
    accumulate_layer(res.stats, l, lt.moe_input, lt.moe.gates, m.params.blocks[l].moe, opt);
    res.layer_inputs.push_back(std::move(lt.moe_input));
    res.gates.push_back(std::move(lt.moe.gates));
  }
  res.stats.frequency.tokens = cal.token_count();
  return res;
}

/// Throws ShapeError when stats were collected on a different architecture.
inline void check_stats_compatible(const CalibrationStats& s, const ModelConfig& cfg) {
  auto dims = [](std::size_t l, std::size_t e, std::size_t dm, std::size_t df) {
    return "layers=" + std::to_string(l) + " experts=" + std::to_string(e) + " d_model=" + std::to_string(dm) +
           " d_ff=" + std::to_string(df);
  };
  if (s.n_layers != cfg.n_layers || s.n_experts != cfg.n_experts || s.d_model != cfg.d_model ||
      s.d_ff != cfg.d_ff) {
    throw ShapeError("statistics for " + dims(s.n_layers, s.n_experts, s.d_model, s.d_ff) +
                     " do not match model with " + dims(cfg.n_layers, cfg.n_experts, cfg.d_model, cfg.d_ff));
  }
}

// ---------------------------------------------------------------------------
// Stats file.

inline constexpr std::uint32_t kStatsVersion = 1;

inline std::string encode_stats(const CalibrationStats& s) {
  Container c;
  auto& man = c.manifest;
  man["format"] = "moep-stats";
  man["architecture"] = {{"n_layers", s.n_layers}, {"n_experts", s.n_experts}, {"d_model", s.d_model}, {"d_ff", s.d_ff}};
  man["frequency"] = {{"mode", to_string(s.frequency.mode)}, {"tokens", s.frequency.tokens},
                      {"counts", s.frequency.counts}};
  auto entries = nlohmann::ordered_json::array();
  auto put_vec = [&](const std::string& kind, const std::string& name, std::span<const double> v,
                     std::size_t rows, std::size_t cols, std::size_t tokens) {
    entries.push_back({{"name", name}, {"kind", kind}, {"shape", {rows, cols}}, {"offset", c.payload.size()},
                       {"length", v.size() * 8}, {"tokens_seen", tokens}});
    for (double x : v) bytes::put_f64(c.payload, x);
  };
  for (const auto& [name, a] : s.scaled) put_vec("scaled_sum_sq", name, a.sum_sq, 1, a.sum_sq.size(), a.tokens_seen);
  for (const auto& [name, a] : s.plain) put_vec("plain_sum_sq", name, a.sum_sq, 1, a.sum_sq.size(), a.tokens_seen);
  for (const auto& [name, a] : s.hessian) put_vec("hessian", name, a.h.values(), a.h.rows(), a.h.cols(), a.tokens_seen);
  man["entries"] = std::move(entries);
  return encode_container(kStatsMagic, kStatsVersion, c);
}

inline CalibrationStats decode_stats(std::string_view raw) {
  const Container c = decode_container(raw, kStatsMagic, kStatsVersion, "stats file");
  CalibrationStats s;
  try {
    const auto& man = c.manifest;
    const auto& arch = man.at("architecture");
    s.n_layers = arch.at("n_layers");
    s.n_experts = arch.at("n_experts");
    s.d_model = arch.at("d_model");
    s.d_ff = arch.at("d_ff");
    const auto& fr = man.at("frequency");
    s.frequency.mode = parse_frequency_mode(fr.at("mode").get<std::string>());
    s.frequency.tokens = fr.at("tokens");
    s.frequency.counts = fr.at("counts").get<std::vector<std::vector<std::uint64_t>>>();
    for (const auto& e : man.at("entries")) {
      const std::string name = e.at("name");
      const std::string kind = e.at("kind");
      const std::size_t rows = e.at("shape").at(0), cols = e.at("shape").at(1);
      const std::size_t off = e.at("offset"), len = e.at("length");
      if (len != rows * cols * 8 || off > c.payload.size() || len > c.payload.size() - off) {
        throw FormatError("stats entry '" + name + "' has inconsistent extent");
      }
      std::vector<double> v(rows * cols);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = bytes::get_f64(c.payload, off + 8 * i);
      const std::size_t tokens = e.at("tokens_seen");
      if (kind == "hessian") {
        HessianAccumulator h;
        h.target = name;
        h.h = Matrix(rows, cols, std::move(v));
        h.tokens_seen = tokens;
        s.hessian[name] = std::move(h);
      } else if (kind == "scaled_sum_sq" || kind == "plain_sum_sq") {
        ScaledNormAccumulator a;
        a.target = name;
        a.sum_sq = std::move(v);
        a.tokens_seen = tokens;
        (kind == "scaled_sum_sq" ? s.scaled : s.plain)[name] = std::move(a);
      } else {
        throw FormatError("unknown stats entry kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed stats manifest: ") + e.what());
  }
  return s;
}

inline void export_stats(const CalibrationStats& s, const std::filesystem::path& path) {
  write_file_atomic(path, encode_stats(s));
}

inline CalibrationStats import_stats(const std::filesystem::path& path) {
  std::string raw;
  try {
    raw = read_binary_file(path);
  } catch (const StorageError& e) {
    throw InputError(e.what());
  }
  return decode_stats(raw);
}

}  // namespace moep
