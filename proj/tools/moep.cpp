// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0

// moep: train, prune, distill, evaluate and analyze toy MoE language models.
//
// Exit codes: 0 success, 2 usage, 3 input/format, 4 numerical.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moep/moep.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;
constexpr int kExitNumerical = 4;

moep::RunConfig base_config(const std::string& path) {
  return path.empty() ? moep::RunConfig{} : moep::load_run_config(path);
}

template <class T>
void override_if(const CLI::Option* opt, T& dst, const T& src) {
  if (opt->count() > 0) dst = src;
}

void print_json(const nlohmann::ordered_json& j, const std::string& out) {
  if (!out.empty()) moep::write_json_file(out, j);
  std::cout << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moep: expert pruning and distillation for toy mixture-of-experts models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "moep 0.1.0");

  // train
  auto* train = app.add_subcommand("train", "Train a model from scratch with next-token cross-entropy");
  std::string train_config, train_corpus, train_out;
  std::size_t train_steps = 0;
  std::uint64_t train_seed = 0;
  bool train_verbose = false;
  train->add_option("--config", train_config, "Run configuration JSON")->check(CLI::ExistingFile);
  train->add_option("--corpus", train_corpus, "Training text file")->required();
  auto* train_steps_opt = train->add_option("--steps", train_steps, "Optimizer steps");
  auto* train_seed_opt = train->add_option("--seed", train_seed, "Initialization and sampling seed");
  train->add_option("--out", train_out, "Output checkpoint directory")->required();
  train->add_flag("-v,--verbose", train_verbose, "Print the loss every 50 steps");

  // prune
  auto* prune = app.add_subcommand("prune", "Calibrate and prune every expert weight matrix");
  std::string prune_config, prune_ckpt, prune_calib, prune_out, prune_method, prune_sparsity, prune_pattern;
  std::string prune_propagate, prune_stats, prune_export;
  std::size_t prune_nsamples = 128;
  std::uint64_t prune_seed = 0;
  bool prune_gsh = false;
  prune->add_option("--config", prune_config, "Run configuration JSON")->check(CLI::ExistingFile);
  prune->add_option("--ckpt", prune_ckpt, "Dense checkpoint directory")->required();
  auto* prune_method_opt = prune->add_option("--method", prune_method, "magnitude|wanda|moe-pruner|sparsegpt");
  auto* prune_sparsity_opt = prune->add_option("--sparsity", prune_sparsity, "Unstructured sparsity in [0, 1)");
  auto* prune_pattern_opt = prune->add_option("--pattern", prune_pattern, "Semi-structured N:M pattern, e.g. 2:4");
  prune->add_option("--calib", prune_calib, "Calibration text file")->required();
  auto* prune_nsamples_opt = prune->add_option("--nsamples", prune_nsamples, "Calibration windows (default 128)");
  auto* prune_seed_opt = prune->add_option("--seed", prune_seed, "Calibration sampling seed");
  auto* prune_prop_opt = prune->add_option("--propagate", prune_propagate, "dense|recompute");
  prune->add_option("--out", prune_out, "Output checkpoint directory")->required();
  prune->add_option("--stats", prune_stats, "Import calibration statistics instead of collecting them")
      ->check(CLI::ExistingFile);
  prune->add_option("--export-stats", prune_export, "Write the calibration statistics to this file");
  auto* prune_gsh_opt = prune->add_flag("--gate-scaled-hessian", prune_gsh, "SparseGPT on gate-scaled inputs");

  // distill
  auto* dist = app.add_subcommand("distill", "Expert-wise knowledge distillation of a pruned student");
  std::string dist_config, dist_teacher, dist_student, dist_corpus, dist_out;
  std::size_t dist_samples = 0, dist_epochs = 0, dist_batch = 0;
  double dist_lr = 0.0, dist_lambda = 0.0;
  std::uint64_t dist_seed = 0;
  bool dist_train_router = false;
  dist->add_option("--config", dist_config, "Run configuration JSON")->check(CLI::ExistingFile);
  dist->add_option("--teacher", dist_teacher, "Dense teacher checkpoint")->required();
  dist->add_option("--student", dist_student, "Pruned student checkpoint")->required();
  dist->add_option("--corpus", dist_corpus, "Training text file")->required();
  auto* dist_samples_opt = dist->add_option("--samples", dist_samples, "Training windows (default 1000)");
  auto* dist_epochs_opt = dist->add_option("--epochs", dist_epochs, "Epochs (default 3)");
  auto* dist_lr_opt = dist->add_option("--lr", dist_lr, "Peak learning rate (default 2e-5)");
  auto* dist_batch_opt = dist->add_option("--batch-size", dist_batch, "Windows per step (default 8)");
  auto* dist_lambda_opt = dist->add_option("--lambda", dist_lambda, "Expert loss weight (default: auto)");
  auto* dist_seed_opt = dist->add_option("--seed", dist_seed, "Sampling seed");
  auto* dist_router_opt = dist->add_flag("--train-router", dist_train_router, "Also update router weights");
  dist->add_option("--out", dist_out, "Output checkpoint directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Perplexity on a text file");
  std::string eval_ckpt, eval_corpus, eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--corpus", eval_corpus, "Evaluation text file")->required();
  eval->add_option("--out", eval_out, "Also write the JSON result here");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Expert load-balance report");
  std::string an_ckpt, an_corpus, an_freq, an_mode = "argmax", an_out, an_name;
  std::size_t an_nsamples = 128;
  std::uint64_t an_seed = 0;
  analyze->add_option("--ckpt", an_ckpt, "Checkpoint directory");
  analyze->add_option("--corpus", an_corpus, "Text routed through the checkpoint");
  analyze->add_option("--freq", an_freq, "Frequency JSON file")->check(CLI::ExistingFile);
  analyze->add_option("--nsamples", an_nsamples, "Windows routed (default 128)");
  analyze->add_option("--mode", an_mode, "argmax|topk dispatch counting");
  analyze->add_option("--seed", an_seed, "Window sampling seed");
  analyze->add_option("--name", an_name, "Model name in the report");
  analyze->add_option("--out", an_out, "Also write the JSON report here");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Prune and evaluate over a list of settings, emitting CSV");
  std::string sw_ckpt, sw_calib, sw_eval, sw_method = "moe-pruner", sw_out, sw_fixed = "0.5", sw_prop = "dense";
  std::vector<std::string> sw_sparsities, sw_nsamples;
  std::size_t sw_fixed_n = 128;
  std::uint64_t sw_seed = 0;
  sweep->add_option("--ckpt", sw_ckpt, "Dense checkpoint directory")->required();
  sweep->add_option("--method", sw_method, "magnitude|wanda|moe-pruner|sparsegpt");
  sweep->add_option("--calib", sw_calib, "Calibration text file")->required();
  sweep->add_option("--eval", sw_eval, "Evaluation text file (default: calibration file)");
  auto* sw_sp_opt = sweep->add_option("--sparsities", sw_sparsities, "Sparsity targets to sweep")->delimiter(',');
  auto* sw_ns_opt = sweep->add_option("--nsamples-list", sw_nsamples, "Calibration sizes to sweep")->delimiter(',');
  sweep->add_option("--sparsity", sw_fixed, "Target used with --nsamples-list (default 0.5)");
  sweep->add_option("--nsamples", sw_fixed_n, "Calibration size used with --sparsities (default 128)");
  sweep->add_option("--seed", sw_seed, "Calibration sampling seed");
  sweep->add_option("--propagate", sw_prop, "dense|recompute");
  sweep->add_option("--out", sw_out, "CSV output path (default: stdout)");

  // corpus
  auto* corpus = app.add_subcommand("corpus", "Write a synthetic English-like text corpus");
  std::size_t corpus_bytes = 1 << 20;
  std::uint64_t corpus_seed = 0;
  std::string corpus_out;
  corpus->add_option("--bytes", corpus_bytes, "Corpus size in bytes (default 1 MiB)");
  corpus->add_option("--seed", corpus_seed, "Generator seed");
  corpus->add_option("--out", corpus_out, "Output text file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) {
      moep::RunConfig cfg = base_config(train_config);
      override_if(train_steps_opt, cfg.train.steps, train_steps);
      if (train_seed_opt->count() > 0) cfg.model.seed = cfg.train.seed = train_seed;
      moep::run_train(cfg, train_corpus, train_out, train_verbose);
      std::cout << nlohmann::ordered_json{{"checkpoint", train_out}, {"steps", cfg.train.steps}}.dump() << "\n";
    } else if (*prune) {
      moep::RunConfig cfg = base_config(prune_config);
      if (prune_sparsity_opt->count() > 0 && prune_pattern_opt->count() > 0) {
        throw moep::UsageError("--sparsity and --pattern are mutually exclusive");
      }
      if (prune_sparsity_opt->count() > 0) cfg.sparsity = prune_sparsity;
      if (prune_pattern_opt->count() > 0) {
        if (prune_pattern.find(':') == std::string::npos) throw moep::UsageError("--pattern expects N:M");
        cfg.sparsity = prune_pattern;
      }
      if (cfg.sparsity.empty()) throw moep::UsageError("exactly one of --sparsity or --pattern is required");
      override_if(prune_method_opt, cfg.method, prune_method);
      override_if(prune_nsamples_opt, cfg.nsamples, prune_nsamples);
      override_if(prune_seed_opt, cfg.seed, prune_seed);
      override_if(prune_prop_opt, cfg.propagate, prune_propagate);
      override_if(prune_gsh_opt, cfg.gate_scaled_hessian, prune_gsh);

      moep::PruneRequest req;
      req.ckpt = prune_ckpt;
      req.calib = prune_calib;
      req.out = prune_out;
      req.method = moep::parse_prune_method(cfg.method);
      req.target = moep::SparsityTarget::parse(cfg.sparsity);
      req.nsamples = cfg.nsamples;
      req.seed = cfg.seed;
      req.propagate = moep::parse_propagation(cfg.propagate);
      req.gate_scaled_hessian = cfg.gate_scaled_hessian;
      if (!prune_stats.empty()) req.stats_in = prune_stats;
      if (!prune_export.empty()) req.stats_out = prune_export;
      const moep::PruneResult res = moep::run_prune(req, cfg);
      std::cout << moep::to_json(res.report)["totals"].dump() << "\n";
    } else if (*dist) {
      moep::RunConfig cfg = base_config(dist_config);
      override_if(dist_samples_opt, cfg.kd.samples, dist_samples);
      override_if(dist_epochs_opt, cfg.kd.epochs, dist_epochs);
      override_if(dist_lr_opt, cfg.kd.learning_rate, dist_lr);
      override_if(dist_batch_opt, cfg.kd.batch_size, dist_batch);
      override_if(dist_seed_opt, cfg.kd.seed, dist_seed);
      if (dist_lambda_opt->count() > 0) cfg.kd.lambda = dist_lambda;
      if (dist_router_opt->count() > 0) cfg.kd.router_frozen = !dist_train_router;
      const moep::DistillResult res =
          moep::run_distill({dist_teacher, dist_student, dist_corpus, dist_out, cfg.kd}, cfg);
      std::cout << nlohmann::ordered_json{{"checkpoint", dist_out}, {"steps", res.log.size()}, {"lambda", res.lambda}}
                       .dump()
                << "\n";
    } else if (*eval) {
      print_json(moep::run_eval(eval_ckpt, eval_corpus), eval_out);
    } else if (*analyze) {
      const bool from_model = !an_ckpt.empty() || !an_corpus.empty();
      const bool from_freq = !an_freq.empty();
      if (from_model == from_freq) throw moep::UsageError("give either --ckpt with --corpus, or --freq");
      if (from_model) {
        if (an_ckpt.empty() || an_corpus.empty()) throw moep::UsageError("--ckpt and --corpus go together");
        const moep::LoadedCheckpoint ck = moep::load_checkpoint(an_ckpt);
        const moep::BalanceReport r =
            moep::analyze_model(ck.model, moep::load_corpus(an_corpus), an_nsamples,
                                moep::parse_frequency_mode(an_mode), an_seed, an_name.empty() ? an_ckpt : an_name);
        print_json(moep::to_json(r), an_out);
      } else {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& r : moep::ingest_frequencies(an_freq)) arr.push_back(moep::to_json(r));
        print_json(arr.size() == 1 ? arr[0] : nlohmann::ordered_json{{"models", arr}}, an_out);
      }
    } else if (*sweep) {
      if ((sw_sp_opt->count() > 0) == (sw_ns_opt->count() > 0)) {
        throw moep::UsageError("give exactly one of --sparsities or --nsamples-list");
      }
      moep::SweepRequest req;
      req.ckpt = sw_ckpt;
      req.calib = sw_calib;
      if (!sw_eval.empty()) req.eval = sw_eval;
      req.method = moep::parse_prune_method(sw_method);
      req.axis = sw_sp_opt->count() > 0 ? moep::SweepAxis::kSparsity : moep::SweepAxis::kNSamples;
      req.settings = req.axis == moep::SweepAxis::kSparsity ? sw_sparsities : sw_nsamples;
      req.fixed_target = moep::SparsityTarget::parse(sw_fixed);
      req.fixed_nsamples = sw_fixed_n;
      req.seed = sw_seed;
      req.propagate = moep::parse_propagation(sw_prop);
      const std::string csv = moep::sweep_csv(moep::run_sweep(req), req.axis);
      if (sw_out.empty()) {
        std::cout << csv;
      } else {
        moep::write_file_atomic(sw_out, csv);
      }
    } else if (*corpus) {
      moep::write_file_atomic(corpus_out, moep::synthetic_corpus(corpus_bytes, corpus_seed));
    }
  } catch (const moep::UsageError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const moep::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const moep::NumericalError& e) {
    std::cerr << e.what() << "\n";
    return kExitNumerical;
  } catch (const moep::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return 0;
}
