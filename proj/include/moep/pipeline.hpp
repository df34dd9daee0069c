// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// File-level commands behind the moep tool: train, prune, distill, eval,
// analyze and sweep. Each writes its artifacts with the effective run
// configuration embedded.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moep/analysis.hpp"
#include "moep/calibration.hpp"
#include "moep/container.hpp"
#include "moep/distill.hpp"
#include "moep/error.hpp"
#include "moep/model.hpp"
#include "moep/persistence.hpp"
#include "moep/pruning.hpp"
#include "moep/text.hpp"
#include "moep/train.hpp"

namespace moep {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t nsamples = 128;
  std::uint64_t seed = 0;
  std::string method = "moe-pruner";
  std::string sparsity;  // "0.5" or "2:4"; empty when unset
  std::string propagate = "dense";
  bool gate_scaled_hessian = false;
  KDConfig kd;
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"warmup_steps", c.train.warmup_steps},
                {"clip_norm", c.train.clip_norm},
                {"seed", c.train.seed}};
  j["calibration"] = {{"nsamples", c.nsamples}, {"seed", c.seed}};
  j["prune"] = {{"method", c.method},
                {"sparsity", c.sparsity},
                {"propagate", c.propagate},
                {"gate_scaled_hessian", c.gate_scaled_hessian}};
  j["distill"] = {{"lambda", c.kd.lambda ? nlohmann::ordered_json(*c.kd.lambda) : nlohmann::ordered_json(nullptr)},
                  {"epochs", c.kd.epochs},
                  {"learning_rate", c.kd.learning_rate},
                  {"batch_size", c.kd.batch_size},
                  {"samples", c.kd.samples},
                  {"seed", c.kd.seed},
                  {"router_frozen", c.kd.router_frozen}};
  return j;
}

/// Overlays the sections present in `j` onto `c`.
inline void merge_run_config(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw FormatError("run configuration must be a JSON object");
  try {
    if (j.contains("model")) merge_model_config(j["model"], c.model);
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.steps = t.value("steps", c.train.steps);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.warmup_steps = t.value("warmup_steps", c.train.warmup_steps);
      c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);
      c.train.seed = t.value("seed", c.train.seed);
    }
    if (j.contains("calibration")) {
      c.nsamples = j["calibration"].value("nsamples", c.nsamples);
      c.seed = j["calibration"].value("seed", c.seed);
    }
    if (j.contains("prune")) {
      const auto& p = j["prune"];
      c.method = p.value("method", c.method);
      if (p.contains("sparsity")) {
        const auto& s = p["sparsity"];
        c.sparsity = s.is_number() ? SparsityTarget::unstructured(s.get<double>()).to_string() : s.get<std::string>();
      }
      c.propagate = p.value("propagate", c.propagate);
      c.gate_scaled_hessian = p.value("gate_scaled_hessian", c.gate_scaled_hessian);
    }
    if (j.contains("distill")) {
      const auto& d = j["distill"];
      if (d.contains("lambda")) {
        c.kd.lambda = d["lambda"].is_null() ? std::nullopt : std::optional<double>(d["lambda"].get<double>());
      }
      c.kd.epochs = d.value("epochs", c.kd.epochs);
      c.kd.learning_rate = d.value("learning_rate", c.kd.learning_rate);
      c.kd.batch_size = d.value("batch_size", c.kd.batch_size);
      c.kd.samples = d.value("samples", c.kd.samples);
      c.kd.seed = d.value("seed", c.kd.seed);
      c.kd.router_frozen = d.value("router_frozen", c.kd.router_frozen);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid run configuration: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config '" + path.string() + "' is not valid JSON: " + std::string(e.what()));
  }
  merge_run_config(j, c);
  return c;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

struct TrainOutcome {
  MoEModel model;
  std::vector<TrainLogEntry> log;
};

inline TrainOutcome run_train(const RunConfig& cfg, const std::filesystem::path& corpus_path,
                              const std::filesystem::path& out_dir, bool verbose = false) {
  const TokenSeq corpus = load_corpus(corpus_path);
  TrainOutcome r;
  r.model = init_model(cfg.model);
  r.log = train_lm(r.model, corpus, cfg.train, [&](const TrainLogEntry& e) {
    if (verbose && (e.step % 50 == 0 || e.step + 1 == cfg.train.steps)) {
      std::cerr << "step " << e.step << " loss " << e.loss << "\n";
    }
  });
  save_checkpoint(r.model, nullptr, out_dir, {{"command", "train"}, {"run_config", to_json(cfg)}});
  std::string lines;
  for (const auto& e : r.log) {
    lines += nlohmann::ordered_json{{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}}.dump() + "\n";
  }
  write_file_atomic(out_dir / "train_log.jsonl", lines);
  return r;
}

struct PruneRequest {
  std::filesystem::path ckpt;
  std::filesystem::path calib;
  std::filesystem::path out;
  PruneMethod method = PruneMethod::kMoEPruner;
  SparsityTarget target = SparsityTarget::unstructured(0.5);
  std::size_t nsamples = 128;
  std::uint64_t seed = 0;
  Propagation propagate = Propagation::kDense;
  bool gate_scaled_hessian = false;
  std::optional<std::filesystem::path> stats_in;
  std::optional<std::filesystem::path> stats_out;
};

/// In-memory prune of `model`; the building block of run_prune and sweeps.
inline PruneResult prune_in_memory(const MoEModel& model, const TokenSeq& calib, PruneMethod method,
                                   const SparsityTarget& target, std::size_t nsamples, std::uint64_t seed,
                                   const PruneOptions& opt = {}, const CalibrationStats* stats = nullptr) {
  const CalibrationSet cal = build_calibration_set(calib, nsamples, model.config.seq_len, seed);
  return prune_model(model, cal, method, target, opt, stats);
}

inline PruneResult run_prune(const PruneRequest& req, const RunConfig& echo = {}) {
  const LoadedCheckpoint ck = load_checkpoint(req.ckpt);
  const TokenSeq calib = load_corpus(req.calib);
  PruneOptions opt;
  opt.propagate = req.propagate;
  opt.gate_scaled_hessian = req.gate_scaled_hessian;

  std::optional<CalibrationStats> stats;
  if (req.stats_in) {
    stats = import_stats(*req.stats_in);
  } else if (req.stats_out) {
    const CalibrationSet cal = build_calibration_set(calib, req.nsamples, ck.model.config.seq_len, req.seed);
    stats = collect(ck.model, cal, {.gate_scaled_hessian = req.gate_scaled_hessian}).stats;
  }
  if (stats && req.stats_out) export_stats(*stats, *req.stats_out);

  PruneResult res = prune_in_memory(ck.model, calib, req.method, req.target, req.nsamples, req.seed, opt,
                                    stats ? &*stats : nullptr);
  nlohmann::ordered_json extra = {{"command", "prune"}, {"run_config", to_json(echo)}};
  save_checkpoint(res.model, &res.masks, req.out, extra);
  nlohmann::ordered_json report = to_json(res.report);
  report["nsamples"] = req.nsamples;
  report["seed"] = req.seed;
  report["run_config"] = to_json(echo);
  write_json_file(req.out / "prune_report.json", report);
  return res;
}

struct DistillRequest {
  std::filesystem::path teacher;
  std::filesystem::path student;
  std::filesystem::path corpus;
  std::filesystem::path out;
  KDConfig kd;
};

inline DistillResult run_distill(const DistillRequest& req, const RunConfig& echo = {}) {
  const LoadedCheckpoint teacher = load_checkpoint(req.teacher);
  const LoadedCheckpoint student = load_checkpoint(req.student);
  check_same_architecture(teacher.model, student.model);
  const TokenSeq corpus = load_corpus(req.corpus);
  const MaskSet masks = student.masks.value_or(MaskSet{});
  DistillResult res = distill(teacher.model, student.model, masks, corpus, req.kd);
  verify_masked_zero(res.student, masks);
  save_checkpoint(res.student, student.masks ? &masks : nullptr, req.out,
                  {{"command", "distill"}, {"lambda", res.lambda}, {"run_config", to_json(echo)}});
  std::string lines;
  for (const auto& e : res.log) lines += to_json(e).dump() + "\n";
  write_file_atomic(req.out / "distill_log.jsonl", lines);
  return res;
}

inline nlohmann::ordered_json run_eval(const std::filesystem::path& ckpt, const std::filesystem::path& corpus) {
  const LoadedCheckpoint ck = load_checkpoint(ckpt);
  const TokenSeq text = load_corpus(corpus);
  if (text.empty()) throw InputError("evaluation corpus '" + corpus.string() + "' is empty");
  const PerplexityResult r = evaluate_perplexity(ck.model, text);
  return {{"perplexity", r.perplexity}, {"token_count", r.token_count}};
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepAxis { kSparsity, kNSamples };

struct SweepRequest {
  std::filesystem::path ckpt;
  std::filesystem::path calib;
  std::filesystem::path eval;
  PruneMethod method = PruneMethod::kMoEPruner;
  SweepAxis axis = SweepAxis::kSparsity;
  std::vector<std::string> settings;  // sparsity targets or sample counts
  SparsityTarget fixed_target = SparsityTarget::unstructured(0.5);
  std::size_t fixed_nsamples = 128;
  std::uint64_t seed = 0;
  Propagation propagate = Propagation::kDense;
};

struct SweepRow {
  std::string setting;
  double perplexity = 0.0;
};

/// Removes repeated settings (keeping first occurrences) with a warning.
inline std::vector<std::string> dedup_settings(const std::vector<std::string>& in, SweepAxis axis) {
  std::vector<std::string> out;
  std::vector<std::string> keys;
  for (const auto& s : in) {
    std::string key;
    if (axis == SweepAxis::kSparsity) {
      key = SparsityTarget::parse(s).to_string();
    } else {
      std::size_t pos = 0;
      unsigned long long n = 0;
      try {
        n = std::stoull(s, &pos);
      } catch (const std::logic_error&) {
        pos = 0;
      }
      if (pos != s.size() || n == 0 || s.find('-') != std::string::npos) {
        throw ConfigError("sample count '" + s + "' is not a positive integer");
      }
      key = std::to_string(n);
    }
    if (std::find(keys.begin(), keys.end(), key) != keys.end()) {
      std::cerr << "warning: duplicate sweep setting '" << s << "' ignored\n";
      continue;
    }
    keys.push_back(key);
    out.push_back(key);
  }
  if (out.empty()) throw ConfigError("sweep needs at least one setting");
  return out;
}

inline std::vector<SweepRow> run_sweep(const SweepRequest& req) {
  const std::vector<std::string> settings = dedup_settings(req.settings, req.axis);
  const LoadedCheckpoint ck = load_checkpoint(req.ckpt);
  const TokenSeq calib = load_corpus(req.calib);
  const TokenSeq eval = req.eval.empty() ? calib : load_corpus(req.eval);
  PruneOptions opt;
  opt.propagate = req.propagate;
  std::vector<SweepRow> rows;
  for (const auto& s : settings) {
    const bool by_sparsity = req.axis == SweepAxis::kSparsity;
    const SparsityTarget target = by_sparsity ? SparsityTarget::parse(s) : req.fixed_target;
    const std::size_t n = by_sparsity ? req.fixed_nsamples : std::stoull(s);
    const PruneResult pr = prune_in_memory(ck.model, calib, req.method, target, n, req.seed, opt);
    rows.push_back({s, evaluate_perplexity(pr.model, eval).perplexity});
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, SweepAxis axis) {
  std::string out = axis == SweepAxis::kSparsity ? "sparsity,perplexity\n" : "nsamples,perplexity\n";
  for (const auto& r : rows) out += r.setting + "," + format_double(r.perplexity) + "\n";
  return out;
}

}  // namespace moep
