// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

namespace chip {

enum class TokenVariant {
  additive,  // sg(beta*KL_w) - beta*KL_l, added linearly to the total
  sigmoid,   // -log sigma(margin - alpha*(beta*KL_l - sg(beta*KL_w)))
};

// Which components the training objective sums.
enum class Objective {
  dpo,    // response
  cmdpo,  // visual + response
  hdpo,   // response + lambda*segment + gamma*token
  chip,   // visual + response + lambda*segment + gamma*token
};

enum class CorruptionStrategy { diffusion, blackness, crop, rotation, randomness };

struct CorruptionSpec {
  CorruptionStrategy strategy = CorruptionStrategy::diffusion;
  std::size_t noise_step = 500;
  std::size_t schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::pair<double, double> crop_ratio_range{0.5, 0.9};
  std::pair<double, double> rotation_degree_range{10.0, 80.0};
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("corruption spec: " + m); };
    if (schedule_steps < 1 || noise_step < 1 || noise_step > schedule_steps) fail("need 1 <= noise_step <= schedule_steps");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) fail("need 0 < beta_start <= beta_end < 1");
    if (!(crop_ratio_range.first > 0 && crop_ratio_range.first <= crop_ratio_range.second &&
          crop_ratio_range.second <= 1))
      fail("crop ratio range must lie in (0, 1]");
    if (rotation_degree_range.first > rotation_degree_range.second) fail("rotation range is inverted");
  }
};

struct TrainerSettings {
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;
  std::optional<std::size_t> steps;  // unset: run full epochs
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool freeze_vision = false;
  double clip_norm = 0.0;  // 0: no clipping
  std::uint64_t data_seed = 0;
  // Rebuild rejected images with a per-epoch seed instead of once at load.
  bool recorrupt_each_epoch = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("trainer settings: " + m); };
    if (!(learning_rate > 0)) fail("learning_rate must be > 0");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam betas must be in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be > 0");
    if (!(clip_norm >= 0)) fail("clip_norm must be >= 0");
  }
};

struct ChipConfig {
  double beta = 0.5;
  double lambda_seg = 1.0;
  double gamma_tok = 0.1;
  double gamma_seg = 1.0;
  double alpha_tdpo = 1.0;
  TokenVariant token_variant = TokenVariant::additive;
  Objective objective = Objective::chip;
  TrainerSettings train;
  CorruptionSpec corruption;

  void validate() const {
    if (!(beta > 0)) throw std::invalid_argument("chip config: beta must be > 0");
    if (lambda_seg < 0 || gamma_tok < 0 || gamma_seg < 0)
      throw std::invalid_argument("chip config: loss weights must be >= 0");
    if (!(alpha_tdpo >= 0)) throw std::invalid_argument("chip config: alpha_tdpo must be >= 0");
    train.validate();
    corruption.validate();
  }
};

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::dpo: return "dpo";
    case Objective::cmdpo: return "cmdpo";
    case Objective::hdpo: return "hdpo";
    case Objective::chip: return "chip";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "dpo") return Objective::dpo;
  if (s == "cmdpo") return Objective::cmdpo;
  if (s == "hdpo") return Objective::hdpo;
  if (s == "chip") return Objective::chip;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

inline TokenVariant parse_token_variant(const std::string& s) {
  if (s == "additive") return TokenVariant::additive;
  if (s == "sigmoid") return TokenVariant::sigmoid;
  throw std::invalid_argument("unknown token variant '" + s + "'");
}

inline const char* token_variant_name(TokenVariant v) { return v == TokenVariant::additive ? "additive" : "sigmoid"; }

inline CorruptionStrategy parse_strategy(const std::string& s) {
  if (s == "diffusion") return CorruptionStrategy::diffusion;
  if (s == "black" || s == "blackness") return CorruptionStrategy::blackness;
  if (s == "crop") return CorruptionStrategy::crop;
  if (s == "rotate" || s == "rotation") return CorruptionStrategy::rotation;
  if (s == "random" || s == "randomness") return CorruptionStrategy::randomness;
  throw std::invalid_argument("unknown corruption strategy '" + s + "'");
}

inline const char* strategy_name(CorruptionStrategy s) {
  switch (s) {
    case CorruptionStrategy::diffusion: return "diffusion";
    case CorruptionStrategy::blackness: return "black";
    case CorruptionStrategy::crop: return "crop";
    case CorruptionStrategy::rotation: return "rotate";
    case CorruptionStrategy::randomness: return "random";
  }
  return "?";
}

// JSON views. Missing keys keep their defaults.

inline void to_json(nlohmann::json& j, const CorruptionSpec& s) {
  j = {{"strategy", strategy_name(s.strategy)},
       {"noise_step", s.noise_step},
       {"schedule_steps", s.schedule_steps},
       {"beta_start", s.beta_start},
       {"beta_end", s.beta_end},
       {"crop_ratio_range", {s.crop_ratio_range.first, s.crop_ratio_range.second}},
       {"rotation_degree_range", {s.rotation_degree_range.first, s.rotation_degree_range.second}},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, CorruptionSpec& s) {
  if (j.contains("strategy")) s.strategy = parse_strategy(j.at("strategy").get<std::string>());
  s.noise_step = j.value("noise_step", s.noise_step);
  s.schedule_steps = j.value("schedule_steps", s.schedule_steps);
  s.beta_start = j.value("beta_start", s.beta_start);
  s.beta_end = j.value("beta_end", s.beta_end);
  if (j.contains("crop_ratio_range")) s.crop_ratio_range = j.at("crop_ratio_range").get<std::pair<double, double>>();
  if (j.contains("rotation_degree_range"))
    s.rotation_degree_range = j.at("rotation_degree_range").get<std::pair<double, double>>();
  s.seed = j.value("seed", s.seed);
}

inline void to_json(nlohmann::json& j, const TrainerSettings& t) {
  j = {{"learning_rate", t.learning_rate},
       {"batch_size", t.batch_size},
       {"epochs", t.epochs},
       {"steps", t.steps ? nlohmann::json(*t.steps) : nlohmann::json()},
       {"adam_beta1", t.adam_beta1},
       {"adam_beta2", t.adam_beta2},
       {"adam_eps", t.adam_eps},
       {"freeze_vision", t.freeze_vision},
       {"clip_norm", t.clip_norm},
       {"data_seed", t.data_seed},
       {"recorrupt_each_epoch", t.recorrupt_each_epoch}};
}

inline void from_json(const nlohmann::json& j, TrainerSettings& t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  if (j.contains("steps") && !j.at("steps").is_null()) t.steps = j.at("steps").get<std::size_t>();
  t.adam_beta1 = j.value("adam_beta1", t.adam_beta1);
  t.adam_beta2 = j.value("adam_beta2", t.adam_beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.freeze_vision = j.value("freeze_vision", t.freeze_vision);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.data_seed = j.value("data_seed", t.data_seed);
  t.recorrupt_each_epoch = j.value("recorrupt_each_epoch", t.recorrupt_each_epoch);
}

inline void to_json(nlohmann::json& j, const ChipConfig& c) {
  j = {{"beta", c.beta},
       {"lambda_seg", c.lambda_seg},
       {"gamma_tok", c.gamma_tok},
       {"gamma_seg", c.gamma_seg},
       {"alpha_tdpo", c.alpha_tdpo},
       {"token_variant", token_variant_name(c.token_variant)},
       {"objective", objective_name(c.objective)},
       {"train", c.train},
       {"corruption", c.corruption}};
}

inline void from_json(const nlohmann::json& j, ChipConfig& c) {
  c.beta = j.value("beta", c.beta);
  c.lambda_seg = j.value("lambda_seg", c.lambda_seg);
  c.gamma_tok = j.value("gamma_tok", c.gamma_tok);
  c.gamma_seg = j.value("gamma_seg", c.gamma_seg);
  c.alpha_tdpo = j.value("alpha_tdpo", c.alpha_tdpo);
  if (j.contains("token_variant")) c.token_variant = parse_token_variant(j.at("token_variant").get<std::string>());
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("corruption")) from_json(j.at("corruption"), c.corruption);
}

}  // namespace chip
