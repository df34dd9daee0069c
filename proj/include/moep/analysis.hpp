// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Expert load balance: coefficient of variation of per-expert dispatch counts.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moep/calibration.hpp"
#include "moep/error.hpp"
#include "moep/model.hpp"
#include "moep/text.hpp"

namespace moep {

/// sigma / mu with the population (1/n) standard deviation.
inline double balance_score(std::span<const double> f) {
  if (f.empty()) throw InputError("balance score of an empty frequency vector");
  const double n = static_cast<double>(f.size());
  double sum = 0.0;
  for (double v : f) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("frequencies must be finite and nonnegative");
    sum += v;
  }
  if (sum <= 0.0) throw InputError("balance score is undefined for all-zero frequencies");
  const double mu = sum / n;
  double var = 0.0;
  for (double v : f) var += (v - mu) * (v - mu);
  return std::sqrt(var / n) / mu;
}

struct BalanceReport {
  std::string model_name;
  std::string mode = "argmax";
  std::vector<std::vector<double>> frequencies;  // [layer][expert]
  std::vector<double> layer_scores;
  double model_score = 0.0;  // unweighted mean over layers
};

inline BalanceReport make_balance_report(std::string name, std::string mode, std::vector<std::vector<double>> freqs) {
  BalanceReport r;
  r.model_name = std::move(name);
  r.mode = std::move(mode);
  r.frequencies = std::move(freqs);
  if (r.frequencies.empty()) throw InputError("no layers to score");
  double sum = 0.0;
  for (const auto& f : r.frequencies) {
    r.layer_scores.push_back(balance_score(f));
    sum += r.layer_scores.back();
  }
  r.model_score = sum / static_cast<double>(r.layer_scores.size());
  return r;
}

inline BalanceReport balance_report(const FrequencyTable& t, std::string name = {}) {
  std::vector<std::vector<double>> f;
  for (const auto& layer : t.counts) f.emplace_back(layer.begin(), layer.end());
  return make_balance_report(std::move(name), to_string(t.mode), std::move(f));
}

/// Dispatch frequencies of `model` on `nsamples` corpus windows.
inline BalanceReport analyze_model(const MoEModel& m, const TokenSeq& corpus, std::size_t nsamples,
                                   FrequencyMode mode = FrequencyMode::kArgmax, std::uint64_t seed = 0,
                                   std::string name = {}) {
  const CalibrationSet cal = build_calibration_set(corpus, nsamples, m.config.seq_len, seed);
  FrequencyTable t;
  t.mode = mode;
  t.counts.assign(m.config.n_layers, std::vector<std::uint64_t>(m.config.n_experts, 0));
  // Batches bound memory; counting is order-independent.
  constexpr std::size_t kBatch = 32;
  for (std::size_t off = 0; off < cal.sequences.size(); off += kBatch) {
    const std::size_t end = std::min(cal.sequences.size(), off + kBatch);
    const ForwardTrace tr = model_forward(m, std::span<const TokenSeq>(cal.sequences.data() + off, end - off));
    for (std::size_t l = 0; l < tr.layers.size(); ++l) t.add_layer_tokens(l, tr.layers[l].moe.gates);
  }
  t.tokens = cal.token_count();
  return balance_report(t, std::move(name));
}

inline nlohmann::ordered_json to_json(const BalanceReport& r) {
  nlohmann::ordered_json j;
  j["model_name"] = r.model_name;
  j["mode"] = r.mode;
  j["model_score"] = r.model_score;
  j["layer_scores"] = r.layer_scores;
  j["frequencies"] = r.frequencies;
  return j;
}

namespace detail {

inline BalanceReport parse_frequency_entry(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("frequency entry must be an object");
  if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty()) {
    throw FormatError("frequency entry needs a nonempty 'layers' array");
  }
  std::vector<std::vector<double>> layers;
  std::size_t width = 0;
  for (const auto& row : j["layers"]) {
    if (!row.is_array() || row.empty()) throw FormatError("each layer must be a nonempty array of counts");
    std::vector<double> f;
    for (const auto& v : row) {
      if (!v.is_number()) throw FormatError("frequencies must be numbers");
      f.push_back(v.get<double>());
    }
    if (width == 0) width = f.size();
    if (f.size() != width) throw FormatError("ragged layer arrays: expected " + std::to_string(width) + " experts per layer");
    layers.push_back(std::move(f));
  }
  const std::string name = j.value("model_name", std::string());
  const std::string mode = j.value("mode", std::string("argmax"));
  try {
    return make_balance_report(name, mode, std::move(layers));
  } catch (const InputError& e) {
    throw FormatError(e.what());
  }
}

}  // namespace detail

/// Accepts {model_name, layers}, an array of those, or {"models": [...]}.
inline std::vector<BalanceReport> parse_frequencies(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("frequency file is not valid JSON: ") + e.what());
  }
  std::vector<BalanceReport> out;
  if (j.is_array()) {
    for (const auto& e : j) out.push_back(detail::parse_frequency_entry(e));
  } else if (j.is_object() && j.contains("models")) {
    if (!j["models"].is_array()) throw FormatError("'models' must be an array");
    for (const auto& e : j["models"]) out.push_back(detail::parse_frequency_entry(e));
  } else {
    out.push_back(detail::parse_frequency_entry(j));
  }
  if (out.empty()) throw FormatError("frequency file lists no models");
  return out;
}

inline std::vector<BalanceReport> ingest_frequencies(const std::filesystem::path& path) {
  return parse_frequencies(read_text_file(path));
}

}  // namespace moep
