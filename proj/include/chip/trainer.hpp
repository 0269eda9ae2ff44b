// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/config.hpp>
#include <chip/data.hpp>
#include <chip/losses.hpp>
#include <chip/model.hpp>
#include <chip/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

using GradientsByName = std::map<std::string, std::vector<double>>;

// ---------------------------------------------------------------------------
// Bundles

// Reference log-probs for one sample; the reference never changes, so these
// are computed once per rejected-image assignment.
struct ReferenceLogProbs {
  Tensor chosen, rejected, chosen_img_rej;
};

inline ReferenceLogProbs reference_logprobs(const ModelParams& reference, const PreferenceSample& s) {
  return {forward_logprobs(reference, s.chosen_image, s.prompt, s.chosen),
          forward_logprobs(reference, s.chosen_image, s.prompt, s.rejected),
          forward_logprobs(reference, s.rejected_image, s.prompt, s.chosen)};
}

inline std::vector<ReferenceLogProbs> reference_cache(const ModelParams& reference,
                                                      std::span<const PreferenceSample> samples) {
  std::vector<ReferenceLogProbs> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(reference_logprobs(reference, s));
  return out;
}

// Policy passes run against `policy_weights`, which may be tracked leaves.
inline LogProbBundle make_bundle(const ModelConfig& config, const WeightMap& policy_weights,
                                 const ReferenceLogProbs& ref, const PreferenceSample& s) {
  LogProbBundle b;
  b.policy_chosen = forward_logprobs(config, policy_weights, s.chosen_image, s.prompt, s.chosen);
  b.policy_rejected = forward_logprobs(config, policy_weights, s.chosen_image, s.prompt, s.rejected);
  b.policy_chosen_img_rej = forward_logprobs(config, policy_weights, s.rejected_image, s.prompt, s.chosen);
  b.ref_chosen = ref.chosen;
  b.ref_rejected = ref.rejected;
  b.ref_chosen_img_rej = ref.chosen_img_rej;
  b.chosen_tokens = s.chosen;
  b.rejected_tokens = s.rejected;
  b.chosen_mask = s.chosen_mask;
  b.rejected_mask = s.rejected_mask;
  return b;
}

// Fraction of margins > 0, ties counted as one half.
inline double margin_accuracy(std::span<const double> margins) {
  if (margins.empty()) return 0.0;
  double hits = 0.0;
  for (double m : margins) hits += m > 0 ? 1.0 : (m == 0 ? 0.5 : 0.0);
  return hits / static_cast<double>(margins.size());
}

// ---------------------------------------------------------------------------
// Optimizer

struct StepMetrics {
  std::size_t step = 0;
  double loss_response = 0, loss_segment = 0, loss_token = 0, loss_visual = 0, total = 0, objective = 0;
  double margin_text = 0, margin_visual = 0;
  double margin_accuracy = 0;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
  j = {{"step", m.step},
       {"loss_response", m.loss_response},
       {"loss_segment", m.loss_segment},
       {"loss_token", m.loss_token},
       {"loss_visual", m.loss_visual},
       {"total", m.total},
       {"objective", m.objective},
       {"margin_text", m.margin_text},
       {"margin_visual", m.margin_visual},
       {"margin_accuracy", m.margin_accuracy}};
}

struct TrainState {
  ModelParams policy;
  ModelParams reference;
  GradientsByName adam_m, adam_v;
  std::size_t step = 0;
  std::vector<StepMetrics> metrics;
};

inline TrainState make_train_state(const ModelParams& init) {
  TrainState st;
  st.policy = init;
  st.policy.role = Role::policy;
  st.reference = clone_as_reference(init);
  for (const auto& [name, t] : init.weights) {
    st.adam_m[name].assign(t.size(), 0.0);
    st.adam_v[name].assign(t.size(), 0.0);
  }
  return st;
}

// Bias-corrected Adam on the policy. Vision tensors are skipped when frozen.
inline void adam_step(TrainState& st, const GradientsByName& grads, const TrainerSettings& s) {
  for (const auto& [name, g] : grads)
    for (double x : g)
      if (!std::isfinite(x)) throw numeric_error("non-finite gradient for parameter " + name);
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(s.adam_beta1, t), c2 = 1.0 - std::pow(s.adam_beta2, t);
  for (auto& [name, param] : st.policy.weights) {
    if (s.freeze_vision && is_vision_parameter(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    auto& m = st.adam_m.at(name);
    auto& v = st.adam_v.at(name);
    std::vector<double> values(param.values().begin(), param.values().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = s.adam_beta1 * m[i] + (1.0 - s.adam_beta1) * g[i];
      v[i] = s.adam_beta2 * v[i] + (1.0 - s.adam_beta2) * g[i] * g[i];
      values[i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.adam_eps);
      if (!std::isfinite(values[i])) throw numeric_error("parameter " + name + " became non-finite");
    }
    param = Tensor(param.shape(), std::move(values));
  }
}

inline void clip_global_norm(GradientsByName& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double k = max_norm / norm;
  for (auto& [_, g] : grads)
    for (double& x : g) x *= k;
}

// ---------------------------------------------------------------------------
// Training

struct BatchResult {
  LossBreakdown mean;
  Tensor objective;
  std::vector<double> text_margins;
};

inline BatchResult evaluate_batch(const ChipConfig& config, const ModelConfig& mc, const WeightMap& policy_weights,
                                  std::span<const ReferenceLogProbs> refs, std::span<const PreferenceSample> samples,
                                  std::span<const std::size_t> indices, const LossOptions& opts = {}) {
  std::vector<LossBreakdown> parts;
  BatchResult r;
  for (std::size_t i : indices) {
    LogProbBundle b = make_bundle(mc, policy_weights, refs[i], samples[i]);
    parts.push_back(chip_loss(b, config, opts));
    r.text_margins.push_back(parts.back().reward_margin_text);
  }
  r.mean = mean_breakdown(parts, config);
  r.objective = objective_loss(r.mean, config);
  return r;
}

struct TrainResult {
  ModelParams policy;
  ModelParams reference;
  std::vector<StepMetrics> metrics;
};

using StepCallback = std::function<void(const StepMetrics&)>;

// Trains a fresh policy initialized from `model_config.seed`, or from `init`
// when given. The reference is a frozen copy of the initial policy.
inline TrainResult train(const ChipConfig& config, const ModelConfig& model_config,
                         std::vector<PreferenceSample> samples, const std::optional<ModelParams>& init = std::nullopt,
                         const StepCallback& on_step = {}) {
  config.validate();
  if (samples.empty()) throw std::invalid_argument("train: empty dataset");
  const TrainerSettings& ts = config.train;
  TrainState st = make_train_state(init ? *init : init_model(model_config, model_config.seed));
  const ModelConfig& mc = st.policy.config;
  const std::size_t per_epoch = (samples.size() + ts.batch_size - 1) / std::max<std::size_t>(ts.batch_size, 1);
  const std::size_t total_steps = ts.steps ? *ts.steps : ts.epochs * per_epoch;

  auto refs = reference_cache(st.reference, samples);
  for (std::size_t epoch = 0; st.step < total_steps; ++epoch) {
    if (ts.recorrupt_each_epoch && epoch > 0) {
      CorruptionSpec spec = config.corruption;
      spec.seed = sample_seed(config.corruption.seed, 1000003 * epoch);
      recorrupt(samples, spec);
      refs = reference_cache(st.reference, samples);
    }
    for (const auto& batch : batches(samples.size(), ts.batch_size, ts.data_seed, epoch)) {
      if (st.step >= total_steps) break;
      Tape tape;
      WeightMap tracked = track(st.policy, tape);
      BatchResult br = evaluate_batch(config, mc, tracked, refs, samples, batch);
      GradientMap gm = tape.backward(br.objective);
      GradientsByName grads;
      for (const auto& [name, t] : tracked) grads.emplace(name, gm.at(t));
      if (ts.clip_norm > 0) clip_global_norm(grads, ts.clip_norm);

      StepMetrics m;
      m.step = st.step;
      m.loss_response = br.mean.loss_response.item();
      m.loss_segment = br.mean.loss_segment.item();
      m.loss_token = br.mean.loss_token.item();
      m.loss_visual = br.mean.loss_visual.item();
      m.total = br.mean.total.item();
      m.objective = br.objective.item();
      m.margin_text = br.mean.reward_margin_text;
      m.margin_visual = br.mean.reward_margin_visual;
      m.margin_accuracy = margin_accuracy(br.text_margins);

      try {
        adam_step(st, grads, ts);
      } catch (const numeric_error& e) {
        throw numeric_error("step " + std::to_string(m.step) + ": " + e.what());
      }
      st.metrics.push_back(m);
      if (on_step) on_step(m);
    }
  }
  return {std::move(st.policy), std::move(st.reference), std::move(st.metrics)};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::size_t samples = 0;
  double margin_accuracy = 0;
  double visual_margin_accuracy = 0;
  double loss_response = 0, loss_segment = 0, loss_token = 0, loss_visual = 0, total = 0;
  double margin_text = 0, margin_visual = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"samples", r.samples},
       {"margin_accuracy", r.margin_accuracy},
       {"visual_margin_accuracy", r.visual_margin_accuracy},
       {"loss_response", r.loss_response},
       {"loss_segment", r.loss_segment},
       {"loss_token", r.loss_token},
       {"loss_visual", r.loss_visual},
       {"total", r.total},
       {"margin_text", r.margin_text},
       {"margin_visual", r.margin_visual}};
}

inline EvalReport evaluate(const ModelParams& policy, const ModelParams& reference,
                           std::span<const PreferenceSample> samples, const ChipConfig& config) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<LossBreakdown> parts;
  std::vector<double> tm, vm;
  for (const auto& s : samples) {
    LogProbBundle b = make_bundle(policy.config, policy.weights, reference_logprobs(reference, s), s);
    parts.push_back(chip_loss(b, config));
    tm.push_back(parts.back().reward_margin_text);
    vm.push_back(parts.back().reward_margin_visual);
  }
  LossBreakdown mean = mean_breakdown(parts, config);
  EvalReport r;
  r.samples = samples.size();
  r.margin_accuracy = margin_accuracy(tm);
  r.visual_margin_accuracy = margin_accuracy(vm);
  r.loss_response = mean.loss_response.item();
  r.loss_segment = mean.loss_segment.item();
  r.loss_token = mean.loss_token.item();
  r.loss_visual = mean.loss_visual.item();
  r.total = mean.total.item();
  r.margin_text = mean.reward_margin_text;
  r.margin_visual = mean.reward_margin_visual;
  return r;
}

struct AblationRow {
  Objective objective;
  EvalReport report;
};

// Trains one policy per objective from identical seeds and evaluates each.
inline std::vector<AblationRow> run_ablation(const ChipConfig& base, const ModelConfig& mc,
                                             const std::vector<PreferenceSample>& samples) {
  std::vector<AblationRow> rows;
  for (Objective o : {Objective::dpo, Objective::cmdpo, Objective::hdpo, Objective::chip}) {
    ChipConfig c = base;
    c.objective = o;
    TrainResult tr = train(c, mc, samples);
    rows.push_back({o, evaluate(tr.policy, tr.reference, samples, c)});
  }
  return rows;
}

struct NoiseSweepRow {
  std::size_t noise_step;
  EvalReport report;
};

// Rebuilds rejected images at each diffusion step count, trains, evaluates.
inline std::vector<NoiseSweepRow> sweep_noise(const ChipConfig& base, const ModelConfig& mc,
                                              std::vector<PreferenceSample> samples,
                                              std::span<const std::size_t> noise_steps) {
  std::vector<NoiseSweepRow> rows;
  for (std::size_t t : noise_steps) {
    ChipConfig c = base;
    c.corruption.strategy = CorruptionStrategy::diffusion;
    c.corruption.noise_step = t;
    recorrupt(samples, c.corruption);
    TrainResult tr = train(c, mc, samples);
    rows.push_back({t, evaluate(tr.policy, tr.reference, samples, c)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient checking

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double central_difference(const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                                 std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

struct GradProbe {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_rel_error = 0;
  // Stop-gradient path: analytic gradient of the token term with respect to
  // the chosen-side policy log-probs (exactly zero by construction), and the
  // largest finite-difference slope of the held argument itself.
  double sg_analytic_max_abs = 0;
  double sg_argument_fd_max_abs = 0;
  bool passed = false;
};

inline void to_json(nlohmann::json& j, const GradCheckReport& r) {
  auto probes = nlohmann::json::array();
  for (const auto& p : r.probes)
    probes.push_back({{"parameter", p.parameter},
                      {"index", p.index},
                      {"analytic", p.analytic},
                      {"numeric", p.numeric},
                      {"rel_error", p.rel_error}});
  j = {{"max_rel_error", r.max_rel_error},
       {"sg_analytic_max_abs", r.sg_analytic_max_abs},
       {"sg_argument_fd_max_abs", r.sg_argument_fd_max_abs},
       {"passed", r.passed},
       {"probes", probes}};
}

// Checks `analytic` against central differences of f at `coords` of x.
inline std::vector<GradProbe> check_gradient(const std::function<double(std::span<const double>)>& f,
                                             std::span<const double> x, std::span<const double> analytic,
                                             std::span<const std::size_t> coords, double h) {
  std::vector<GradProbe> out;
  std::vector<double> xv(x.begin(), x.end());
  for (std::size_t i : coords) {
    GradProbe p;
    p.index = i;
    p.analytic = analytic[i];
    p.numeric = central_difference(f, xv, i, h);
    p.rel_error = relative_error(p.analytic, p.numeric);
    out.push_back(p);
  }
  return out;
}

// Central-difference probe of the full CHiP loss on one sample. The policy is
// the seed-`seed` perturbation of the reference so every component carries
// gradient. parameter_prefixes restricts the probed tensors (empty: all).
inline GradCheckReport grad_check(const ChipConfig& config, const ModelConfig& model_config,
                                  const PreferenceSample& sample, const std::vector<std::string>& parameter_prefixes,
                                  double h, double tolerance, std::size_t coordinates = 30, std::uint64_t seed = 0) {
  if (!(h > 0)) throw std::invalid_argument("grad_check: h must be > 0");
  ModelParams reference = clone_as_reference(init_model(model_config, model_config.seed));
  ModelParams policy = reference;
  policy.role = Role::policy;
  std::mt19937_64 rng(sample_seed(seed, 17));
  std::normal_distribution<double> normal(0.0, 0.05);
  for (auto& [name, t] : policy.weights) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& x : v) x += normal(rng);
    t = Tensor(t.shape(), std::move(v));
  }
  const ReferenceLogProbs refs = reference_logprobs(reference, sample);

  Tape tape;
  WeightMap tracked = track(policy, tape);
  LossBreakdown lb = chip_loss(make_bundle(policy.config, tracked, refs, sample), config);
  GradientMap gm = tape.backward(lb.total);
  const LossOptions frozen{lb.token_sg_value};

  std::vector<std::pair<std::string, std::size_t>> candidates;
  for (const auto& [name, t] : policy.weights) {
    bool keep = parameter_prefixes.empty();
    for (const auto& p : parameter_prefixes) keep = keep || name.rfind(p, 0) == 0;
    if (keep)
      for (std::size_t i = 0; i < t.size(); ++i) candidates.emplace_back(name, i);
  }
  if (candidates.empty()) throw std::invalid_argument("grad_check: no parameters match the subset");

  GradCheckReport report;
  for (std::size_t k = 0; k < coordinates; ++k) {
    const auto& [name, idx] = candidates[rng() % candidates.size()];
    const Tensor& base = policy.weights.at(name);
    auto f = [&, name = name](std::span<const double> vals) {
      ModelParams probe = policy;
      probe.weights.at(name) = Tensor(base.shape(), std::vector<double>(vals.begin(), vals.end()));
      return chip_loss(make_bundle(probe.config, probe.weights, refs, sample), config, frozen).total.item();
    };
    std::vector<double> analytic = gm.at(tracked.at(name));
    std::size_t coord[] = {idx};
    GradProbe p = check_gradient(f, base.values(), analytic, coord, h).front();
    p.parameter = name;
    report.max_rel_error = std::max(report.max_rel_error, p.rel_error);
    report.probes.push_back(p);
  }

  // Stop-gradient path, probed at the log-prob level.
  {
    LogProbBundle b = make_bundle(policy.config, policy.weights, refs, sample);
    Tape sg_tape;
    b.policy_chosen = sg_tape.variable(b.policy_chosen);
    b.policy_rejected = sg_tape.variable(b.policy_rejected);
    Tensor token = token_po_loss(b, config.beta, TokenVariant::additive, config.alpha_tdpo);
    GradientMap sg_grads = sg_tape.backward(token);
    for (double g : sg_grads.at(b.policy_chosen)) report.sg_analytic_max_abs = std::max(report.sg_analytic_max_abs, std::abs(g));
    auto held = [&](std::span<const double> vals) {
      Tensor pc(b.policy_chosen.shape(), std::vector<double>(vals.begin(), vals.end()));
      return config.beta * seq_kl(b.ref_chosen, pc).item();
    };
    std::vector<double> x(b.policy_chosen.values().begin(), b.policy_chosen.values().end());
    for (std::size_t i = 0; i < x.size(); ++i)
      report.sg_argument_fd_max_abs = std::max(report.sg_argument_fd_max_abs, std::abs(central_difference(held, x, i, h)));
  }
  report.passed = report.max_rel_error < tolerance && report.sg_analytic_max_abs == 0.0;
  return report;
}

}  // namespace chip
