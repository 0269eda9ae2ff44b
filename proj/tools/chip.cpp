// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#include <chip/analysis.hpp>
#include <chip/run_config.hpp>
#include <chip/trainer.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace chip;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Flags shared by every subcommand that consumes a run config. Unset options
// leave the file value alone.
struct Overrides {
  std::string config;
  std::string dataset;
  std::optional<std::uint64_t> seed, model_seed, data_seed, corruption_seed;
  std::optional<std::string> strategy, token_variant, objective;
  std::optional<std::size_t> noise_step, steps, batch_size;
  std::optional<double> lambda, gamma_tok, gamma_seg, beta, lr;
  bool freeze_vision = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Run config JSON file (defaults apply when omitted)");
    cmd->add_option("--dataset", dataset, "Preference dataset (JSONL); overrides the config, default synthetic");
    cmd->add_option("--seed", seed, "Set model, data and corruption seeds at once");
    cmd->add_option("--model-seed", model_seed, "Model initialization seed");
    cmd->add_option("--data-seed", data_seed, "Batch shuffling seed");
    cmd->add_option("--corruption-seed", corruption_seed, "Rejected-image corruption seed");
    cmd->add_option("--strategy", strategy, "Rejected-image strategy")
        ->check(CLI::IsMember({"diffusion", "black", "crop", "rotate", "random"}));
    cmd->add_option("--noise-step", noise_step, "Diffusion noise step T");
    cmd->add_option("--lambda", lambda, "Segment-loss weight");
    cmd->add_option("--gamma-tok", gamma_tok, "Token-loss weight");
    cmd->add_option("--gamma-seg", gamma_seg, "Emphasis on changed segments inside the segment score");
    cmd->add_option("--beta", beta, "Implicit-reward temperature");
    cmd->add_option("--token-variant", token_variant, "Token-level loss form")
        ->check(CLI::IsMember({"additive", "sigmoid"}));
    cmd->add_option("--objective", objective, "Training objective")->check(CLI::IsMember({"dpo", "cmdpo", "hdpo", "chip"}));
    cmd->add_option("--steps", steps, "Number of optimizer steps (default: full epochs)");
    cmd->add_option("--batch-size", batch_size, "Samples per step");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_flag("--freeze-vision", freeze_vision, "Keep patch projection and connector fixed");
  }

  RunConfig resolve() const {
    RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
    if (!dataset.empty()) rc.dataset = dataset;
    if (seed) rc.set_all_seeds(*seed);
    if (model_seed) rc.model.seed = *model_seed;
    if (data_seed) rc.chip.train.data_seed = *data_seed;
    if (corruption_seed) rc.chip.corruption.seed = *corruption_seed;
    if (strategy) rc.chip.corruption.strategy = parse_strategy(*strategy);
    if (noise_step) rc.chip.corruption.noise_step = *noise_step;
    if (lambda) rc.chip.lambda_seg = *lambda;
    if (gamma_tok) rc.chip.gamma_tok = *gamma_tok;
    if (gamma_seg) rc.chip.gamma_seg = *gamma_seg;
    if (beta) rc.chip.beta = *beta;
    if (token_variant) rc.chip.token_variant = parse_token_variant(*token_variant);
    if (objective) rc.chip.objective = parse_objective(*objective);
    if (steps) rc.chip.train.steps = *steps;
    if (batch_size) rc.chip.train.batch_size = *batch_size;
    if (lr) rc.chip.train.learning_rate = *lr;
    if (freeze_vision) rc.chip.train.freeze_vision = true;
    rc.validate();
    return rc;
  }
};

fs::path prepare_out(const std::string& out) {
  fs::path p(out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

Dataset load_data(const RunConfig& rc) {
  Dataset ds = load_run_dataset(rc);
  if (ds.skipped_identical > 0)
    std::cerr << "warning: skipped " << ds.skipped_identical << " record(s) with identical chosen and rejected text\n";
  if (ds.samples.empty()) throw std::runtime_error("dataset has no usable samples");
  return ds;
}

void print_report_row(const std::string& name, const EvalReport& r) {
  std::printf("%-10s margin_acc=%.4f visual_acc=%.4f total=%.6f response=%.6f segment=%.6f token=%.6f visual=%.6f\n",
              name.c_str(), r.margin_accuracy, r.visual_margin_accuracy, r.total, r.loss_response, r.loss_segment,
              r.loss_token, r.loss_visual);
}

int cmd_train(const Overrides& ov, const std::string& out) {
  RunConfig rc = ov.resolve();
  Dataset ds = load_data(rc);
  fs::path dir = prepare_out(out);
  std::ofstream log(dir / "metrics.jsonl");
  if (!log) throw std::runtime_error("cannot write metrics log");
  TrainResult tr = train(rc.chip, rc.model, ds.samples, std::nullopt,
                         [&](const StepMetrics& m) { log << nlohmann::json(m).dump() << '\n'; });
  save_checkpoint(tr.policy, (dir / "policy.ckpt").string());
  save_checkpoint(tr.reference, (dir / "reference.ckpt").string());
  write_json(dir / "run_config.json", rc);
  EvalReport r = evaluate(tr.policy, tr.reference, ds.samples, rc.chip);
  write_json(dir / "eval.json", r);
  std::printf("trained %zu steps on %zu samples (%s)\n", tr.metrics.size(), ds.samples.size(),
              objective_name(rc.chip.objective));
  print_report_row(objective_name(rc.chip.objective), r);
  return 0;
}

int cmd_grad_check(const Overrides& ov, double h, double tol, std::size_t coords, std::size_t seeds,
                   const std::vector<std::string>& prefixes, const std::string& out) {
  RunConfig rc = ov.resolve();
  Dataset ds = load_data(rc);
  nlohmann::json reports = nlohmann::json::array();
  double worst = 0.0, sg_max = 0.0, sg_fd = 0.0;
  bool ok = true;
  for (std::size_t s = 0; s < seeds; ++s) {
    ModelConfig mc = rc.model;
    mc.seed = rc.model.seed + s;
    const auto& sample = ds.samples[s % ds.samples.size()];
    GradCheckReport r = grad_check(rc.chip, mc, sample, prefixes, h, tol, coords, s);
    worst = std::max(worst, r.max_rel_error);
    sg_max = std::max(sg_max, r.sg_analytic_max_abs);
    sg_fd = std::max(sg_fd, r.sg_argument_fd_max_abs);
    ok = ok && r.passed;
    reports.push_back(r);
  }
  if (!out.empty()) write_json(prepare_out(out) / "grad_check.json", reports);
  std::printf("probed %zu coordinates over %zu seed(s), h=%g\n", coords * seeds, seeds, h);
  std::printf("max rel err = %.3e %s %g\n", worst, worst < tol ? "<" : ">=", tol);
  std::printf("stop-gradient path: analytic max |g| = %g, finite difference of held argument max |d| = %.3e "
              "(nonzero by design)\n",
              sg_max, sg_fd);
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitRuntime;
}

int cmd_corrupt(const std::string& in, const std::string& out, const std::vector<std::string>& pool_paths,
                const std::string& strategy, std::size_t noise_step, std::uint64_t seed) {
  CorruptionSpec spec;
  spec.strategy = parse_strategy(strategy);
  spec.noise_step = noise_step;
  spec.seed = seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw config_error(e.what());
  }
  ImageTensor img = read_image(in);
  std::vector<ImageTensor> pool;
  for (const auto& p : pool_paths) pool.push_back(read_image(p));
  write_image(corrupt_image(img, spec, pool), out);
  std::printf("wrote %s (%s)\n", out.c_str(), strategy_name(spec.strategy));
  return 0;
}

std::string mask_string(const SegmentMask& m) {
  std::string s;
  for (bool b : m) s += b ? '1' : '0';
  return s;
}

int cmd_diff(const std::string& chosen, const std::string& rejected, std::size_t min_len) {
  if (min_len < 1) throw config_error("--min-len must be >= 1");
  TokenSequence c = tokenize(chosen), r = tokenize(rejected);
  auto [cm, rm] = diff_segments(c, r, min_len);
  std::printf("chosen:   %s\n", chosen.c_str());
  std::printf("          %s\n", mask_string(cm).c_str());
  std::printf("rejected: %s\n", rejected.c_str());
  std::printf("          %s\n", mask_string(rm).c_str());
  return 0;
}

int cmd_schedule(std::size_t t_max, std::size_t n, double b0, double b1) {
  CorruptionSpec spec;
  spec.schedule_steps = n;
  spec.beta_start = b0;
  spec.beta_end = b1;
  spec.noise_step = std::min(t_max, n);
  try {
    spec.validate();
    if (t_max < 1 || t_max > n) throw std::invalid_argument("--steps-shown must be in [1, schedule steps]");
  } catch (const std::invalid_argument& e) {
    throw config_error(e.what());
  }
  DiffusionSchedule s = build_schedule(spec);
  std::printf("t,beta,alpha_bar\n");
  for (std::size_t t = 1; t <= t_max; ++t) std::printf("%zu,%.17g,%.17g\n", t, s.betas[t - 1], s.alpha_bar(t));
  return 0;
}

int cmd_pca(const Overrides& ov, const std::string& checkpoint, const std::string& out) {
  RunConfig rc = ov.resolve();
  Dataset ds = load_data(rc);
  ModelParams params = checkpoint.empty() ? init_model(rc.model, rc.model.seed) : load_checkpoint(checkpoint);
  RepresentationSet reps = extract_representations(params, ds.samples, rc.representation_limit);
  PcaResult pca = pca_2d(reps);
  AlignmentStats stats = alignment_stats(reps);
  fs::path dir = prepare_out(out);
  std::ofstream csv(dir / "pca.csv");
  if (!csv) throw std::runtime_error("cannot write pca.csv");
  write_pca_csv(csv, reps, pca);
  write_json(dir / "alignment.json", stats);
  std::printf("%zu vectors, explained variance %.6g %.6g\n", reps.size(), pca.explained_variance[0],
              pca.explained_variance[1]);
  std::printf("%s\n", nlohmann::json(stats).dump().c_str());
  return 0;
}

int cmd_eval(const Overrides& ov, const std::string& policy_path, const std::string& reference_path, bool ablation,
             const std::string& out) {
  RunConfig rc = ov.resolve();
  Dataset ds = load_data(rc);
  nlohmann::json result;
  if (ablation) {
    result = nlohmann::json::array();
    for (const auto& row : run_ablation(rc.chip, rc.model, ds.samples)) {
      print_report_row(objective_name(row.objective), row.report);
      result.push_back({{"objective", objective_name(row.objective)}, {"report", row.report}});
    }
  } else {
    if (policy_path.empty()) throw config_error("eval needs --checkpoint or --ablation");
    ModelParams policy = load_checkpoint(policy_path);
    ModelParams reference = reference_path.empty() ? clone_as_reference(init_model(policy.config, policy.config.seed))
                                                   : load_checkpoint(reference_path);
    if (!(policy.config == reference.config)) throw std::runtime_error("policy and reference model configs differ");
    EvalReport r = evaluate(policy, reference, ds.samples, rc.chip);
    print_report_row(objective_name(rc.chip.objective), r);
    result = r;
  }
  if (!out.empty()) write_json(prepare_out(out) / (ablation ? "ablation.json" : "eval.json"), result);
  return 0;
}

int cmd_sweep(const Overrides& ov, std::vector<std::size_t> steps, const std::string& out) {
  RunConfig rc = ov.resolve();
  if (steps.empty()) steps = rc.sweep_noise_steps;
  for (std::size_t t : steps)
    if (t < 1 || t > rc.chip.corruption.schedule_steps) throw config_error("noise step out of range");
  Dataset ds = load_data(rc);
  nlohmann::json result = nlohmann::json::array();
  for (const auto& row : sweep_noise(rc.chip, rc.model, ds.samples, steps)) {
    print_report_row("T=" + std::to_string(row.noise_step), row.report);
    result.push_back({{"noise_step", row.noise_step}, {"report", row.report}});
  }
  if (!out.empty()) write_json(prepare_out(out) / "sweep_noise.json", result);
  return 0;
}

int cmd_synthetic(const Overrides& ov, const std::string& out) {
  RunConfig rc = ov.resolve();
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  os << synthetic_jsonl(rc.synthetic_options());
  std::printf("wrote %zu records to %s\n", rc.synthetic.sample_count, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multimodal preference optimization at desk scale"};
  app.require_subcommand(1);

  std::string out;

  Overrides train_ov;
  auto* train_cmd = app.add_subcommand("train", "Train a policy; writes checkpoints, metrics.jsonl and eval.json");
  train_ov.attach(train_cmd);
  train_cmd->add_option("--out", out, "Output directory")->required();

  Overrides gc_ov;
  double h = 1e-5, tol = 1e-4;
  std::size_t coords = 30, gc_seeds = 5;
  std::vector<std::string> prefixes;
  auto* gc_cmd = app.add_subcommand("grad-check", "Compare analytic and central-difference gradients of the full loss");
  gc_ov.attach(gc_cmd);
  gc_cmd->add_option("--fd-step", h, "Finite-difference step h")->capture_default_str();
  gc_cmd->add_option("--tolerance", tol, "Maximum allowed relative error")->capture_default_str();
  gc_cmd->add_option("--coords", coords, "Random coordinates per seed")->capture_default_str();
  gc_cmd->add_option("--probe-seeds", gc_seeds, "Number of model/probe seeds")->capture_default_str();
  gc_cmd->add_option("--params", prefixes, "Restrict probes to parameters with these name prefixes");
  gc_cmd->add_option("--out", out, "Directory for grad_check.json");

  std::string img_in, img_out, strategy = "diffusion";
  std::vector<std::string> pool;
  std::size_t noise_step = 500;
  std::uint64_t img_seed = 0;
  auto* ci_cmd = app.add_subcommand("corrupt-image", "Build a rejected image from an image sidecar file");
  ci_cmd->add_option("--in", img_in, "Input image file")->required()->check(CLI::ExistingFile);
  ci_cmd->add_option("--out", img_out, "Output image file")->required();
  ci_cmd->add_option("--strategy", strategy, "Corruption strategy")
      ->check(CLI::IsMember({"diffusion", "black", "crop", "rotate", "random"}))
      ->capture_default_str();
  ci_cmd->add_option("--noise-step", noise_step, "Diffusion noise step T")->capture_default_str();
  ci_cmd->add_option("--seed", img_seed, "Corruption seed")->capture_default_str();
  ci_cmd->add_option("--pool", pool, "Candidate images for the random strategy")->check(CLI::ExistingFile);

  std::string chosen, rejected;
  std::size_t min_len = 3;
  auto* diff_cmd = app.add_subcommand("diff-segments", "Print changed-segment masks for a chosen/rejected pair");
  diff_cmd->add_option("--chosen", chosen, "Chosen text")->required();
  diff_cmd->add_option("--rejected", rejected, "Rejected text")->required();
  diff_cmd->add_option("--min-len", min_len, "Shortest rejected run kept")->capture_default_str();

  std::size_t t_max = 500, sched_n = 1000;
  double b0 = 1e-4, b1 = 0.02;
  auto* sched_cmd = app.add_subcommand("schedule", "Print the diffusion beta / alpha-bar table for t = 1..T");
  sched_cmd->add_option("--noise-step", t_max, "Last step T printed")->capture_default_str();
  sched_cmd->add_option("--schedule-steps", sched_n, "Schedule length N")->capture_default_str();
  sched_cmd->add_option("--beta-start", b0, "First beta")->capture_default_str();
  sched_cmd->add_option("--beta-end", b1, "Last beta")->capture_default_str();

  Overrides pca_ov;
  std::string checkpoint;
  auto* pca_cmd = app.add_subcommand("pca", "Extract last-token representations; write pca.csv and alignment.json");
  pca_ov.attach(pca_cmd);
  pca_cmd->add_option("--checkpoint", checkpoint, "Policy checkpoint (default: freshly initialized model)")
      ->check(CLI::ExistingFile);
  pca_cmd->add_option("--out", out, "Output directory")->required();

  Overrides eval_ov;
  std::string reference;
  bool ablation = false;
  auto* eval_cmd = app.add_subcommand("eval", "Margin accuracy and loss breakdown of a checkpoint, or an objective ablation");
  eval_ov.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Policy checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--reference", reference, "Reference checkpoint (default: init from the model seed)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_flag("--ablation", ablation, "Train and evaluate dpo, cmdpo, hdpo and chip from identical seeds");
  eval_cmd->add_option("--out", out, "Directory for eval.json / ablation.json");

  Overrides sweep_ov;
  std::vector<std::size_t> sweep_steps;
  auto* sweep_cmd = app.add_subcommand("sweep-noise", "Train and evaluate across diffusion noise steps");
  sweep_ov.attach(sweep_cmd);
  sweep_cmd->add_option("--noise-steps", sweep_steps, "Noise steps to sweep (default: from config)");
  sweep_cmd->add_option("--out", out, "Directory for sweep_noise.json");

  Overrides syn_ov;
  auto* syn_cmd = app.add_subcommand("make-synthetic", "Write the synthetic preference dataset as JSONL");
  syn_ov.attach(syn_cmd);
  syn_cmd->add_option("--out", out, "Output JSONL file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_ov, out);
    if (*gc_cmd) return cmd_grad_check(gc_ov, h, tol, coords, gc_seeds, prefixes, out);
    if (*ci_cmd) return cmd_corrupt(img_in, img_out, pool, strategy, noise_step, img_seed);
    if (*diff_cmd) return cmd_diff(chosen, rejected, min_len);
    if (*sched_cmd) return cmd_schedule(t_max, sched_n, b0, b1);
    if (*pca_cmd) return cmd_pca(pca_ov, checkpoint, out);
    if (*eval_cmd) return cmd_eval(eval_ov, checkpoint, reference, ablation, out);
    if (*sweep_cmd) return cmd_sweep(sweep_ov, sweep_steps, out);
    if (*syn_cmd) return cmd_synthetic(syn_ov, out);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
