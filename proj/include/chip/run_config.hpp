// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/config.hpp>
#include <chip/data.hpp>
#include <chip/model.hpp>
#include <chip/synthetic.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

// Raised for anything wrong with a run configuration, as opposed to a failure
// while running it.
class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One file describes a whole run. The three named seeds live in the nested
// configs (model.seed, chip.train.data_seed, chip.corruption.seed); the
// "seeds" section of the file is an alias that wins over the nested values.
struct RunConfig {
  ModelConfig model;
  ChipConfig chip;
  SyntheticOptions synthetic;
  std::string dataset;  // empty: use the synthetic generator
  std::size_t min_segment_len = 3;
  std::size_t representation_limit = 150;
  std::vector<std::size_t> sweep_noise_steps = {100, 300, 500, 700, 900};

  std::uint64_t model_seed() const { return model.seed; }
  std::uint64_t data_seed() const { return chip.train.data_seed; }
  std::uint64_t corruption_seed() const { return chip.corruption.seed; }

  void set_all_seeds(std::uint64_t s) {
    model.seed = s;
    chip.train.data_seed = s;
    chip.corruption.seed = s;
  }

  DatasetOptions dataset_options() const {
    DatasetOptions o;
    o.vocab_size = model.vocab_size;
    o.min_segment_len = min_segment_len;
    o.corruption = chip.corruption;
    o.image_side = model.image_side;
    o.channels = model.channels;
    return o;
  }

  SyntheticOptions synthetic_options() const {
    SyntheticOptions o = synthetic;
    o.image_side = model.image_side;
    o.patch_side = model.patch_side;
    o.channels = model.channels;
    return o;
  }

  void validate() const {
    try {
      model.validate();
      chip.validate();
    } catch (const std::invalid_argument& e) {
      throw config_error(e.what());
    }
    if (min_segment_len < 1) throw config_error("min_segment_len must be >= 1");
    if (!dataset.empty() && !std::filesystem::exists(dataset))
      throw config_error("dataset file does not exist: " + dataset);
    for (std::size_t t : sweep_noise_steps)
      if (t < 1 || t > chip.corruption.schedule_steps) throw config_error("sweep noise step out of range");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw config_error(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw config_error(where + ": unknown key \"" + k + "\"");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"chip", c.chip},
       {"synthetic", c.synthetic},
       {"dataset", c.dataset},
       {"min_segment_len", c.min_segment_len},
       {"representation_limit", c.representation_limit},
       {"sweep_noise_steps", c.sweep_noise_steps},
       {"seeds", {{"model_seed", c.model_seed()}, {"data_seed", c.data_seed()}, {"corruption_seed", c.corruption_seed()}}}};
}

// Relative dataset paths are resolved against base_dir.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  try {
    detail::check_keys(j,
                       {"model", "chip", "synthetic", "dataset", "min_segment_len", "representation_limit",
                        "sweep_noise_steps", "seeds"},
                       "config");
    if (j.contains("model")) {
      detail::check_keys(j["model"],
                         {"vocab_size", "hidden_dim", "layer_count", "head_count", "max_seq_len", "image_side",
                          "patch_side", "channels", "seed"},
                         "model");
      c.model = j["model"].get<ModelConfig>();
    }
    if (j.contains("chip")) {
      const auto& cj = j["chip"];
      detail::check_keys(cj,
                         {"beta", "lambda_seg", "gamma_tok", "gamma_seg", "alpha_tdpo", "token_variant", "objective",
                          "train", "corruption"},
                         "chip");
      if (cj.contains("train"))
        detail::check_keys(cj["train"],
                           {"learning_rate", "batch_size", "epochs", "steps", "adam_beta1", "adam_beta2", "adam_eps",
                            "freeze_vision", "clip_norm", "data_seed", "recorrupt_each_epoch"},
                           "chip.train");
      if (cj.contains("corruption"))
        detail::check_keys(cj["corruption"],
                           {"strategy", "noise_step", "schedule_steps", "beta_start", "beta_end", "crop_ratio_range",
                            "rotation_degree_range", "seed"},
                           "chip.corruption");
      c.chip = cj.get<ChipConfig>();
    }
    if (j.contains("synthetic")) {
      detail::check_keys(j["synthetic"], {"sample_count", "class_count", "background_std", "signal", "seed"}, "synthetic");
      c.synthetic = j["synthetic"].get<SyntheticOptions>();
    }
    c.dataset = j.value("dataset", c.dataset);
    if (!c.dataset.empty() && std::filesystem::path(c.dataset).is_relative() && !base_dir.empty())
      c.dataset = (base_dir / c.dataset).string();
    c.min_segment_len = j.value("min_segment_len", c.min_segment_len);
    c.representation_limit = j.value("representation_limit", c.representation_limit);
    if (j.contains("sweep_noise_steps")) c.sweep_noise_steps = j["sweep_noise_steps"].get<std::vector<std::size_t>>();
    if (j.contains("seeds")) {
      const auto& s = j["seeds"];
      detail::check_keys(s, {"model_seed", "data_seed", "corruption_seed"}, "seeds");
      c.model.seed = s.value("model_seed", c.model.seed);
      c.chip.train.data_seed = s.value("data_seed", c.chip.train.data_seed);
      c.chip.corruption.seed = s.value("corruption_seed", c.chip.corruption.seed);
    }
  } catch (const config_error&) {
    throw;
  } catch (const std::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config " + path + ": " + e.what());
  }
  return run_config_from_json(j, std::filesystem::path(path).parent_path());
}

inline Dataset load_run_dataset(const RunConfig& c) {
  if (c.dataset.empty()) return synthetic_dataset(c.synthetic_options(), c.dataset_options());
  return load_dataset(c.dataset, c.dataset_options());
}

}  // namespace chip
