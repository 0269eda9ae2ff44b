// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/data.hpp>

#include <array>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

// Toy grounded-captioning task. Each image shows one bright patch whose
// position and channel identify an object class; the chosen caption names
// that class and the rejected caption names a different one.
struct SyntheticOptions {
  std::size_t sample_count = 64;
  std::size_t class_count = 8;
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t channels = 3;
  double background_std = 0.5;
  double signal = 2.0;
  std::uint64_t seed = 7;
};

inline void to_json(nlohmann::json& j, const SyntheticOptions& o) {
  j = {{"sample_count", o.sample_count}, {"class_count", o.class_count}, {"background_std", o.background_std},
       {"signal", o.signal}, {"seed", o.seed}};
}

// Image geometry is taken from the model config, not from this section.
inline void from_json(const nlohmann::json& j, SyntheticOptions& o) {
  o.sample_count = j.value("sample_count", o.sample_count);
  o.class_count = j.value("class_count", o.class_count);
  o.background_std = j.value("background_std", o.background_std);
  o.signal = j.value("signal", o.signal);
  o.seed = j.value("seed", o.seed);
}

// Object names over pairwise-disjoint letters, none shared with the caption frame.
inline constexpr std::array<const char*, 8> kSyntheticObjects = {"big", "cow", "dry", "fun", "hex", "jst", "kmp", "lqv"};
inline constexpr const char* kSyntheticPrompt = "describe.";

inline std::string synthetic_caption(std::size_t cls) { return std::string("a ") + kSyntheticObjects[cls] + "."; }

inline ImageTensor synthetic_image(std::size_t cls, const SyntheticOptions& opts, std::mt19937_64& rng) {
  ImageTensor img(opts.image_side, opts.image_side, opts.channels);
  std::normal_distribution<double> normal(0.0, opts.background_std);
  for (auto& v : img.values) v = normal(rng);
  const std::size_t grid = opts.image_side / opts.patch_side;
  const std::size_t cell = (cls * 5 + 3) % (grid * grid);
  const std::size_t px = (cell % grid) * opts.patch_side, py = (cell / grid) * opts.patch_side;
  const std::size_t ch = cls % opts.channels;
  for (std::size_t y = py; y < py + opts.patch_side; ++y)
    for (std::size_t x = px; x < px + opts.patch_side; ++x) img.at(x, y, ch) += opts.signal;
  return img;
}

// One JSON record per sample, in the dataset file schema.
inline std::vector<nlohmann::json> synthetic_records(const SyntheticOptions& opts) {
  if (opts.class_count < 2 || opts.class_count > kSyntheticObjects.size())
    throw std::invalid_argument("synthetic: class_count must be in [2, 8]");
  std::mt19937_64 rng(opts.seed);
  std::vector<nlohmann::json> out;
  for (std::size_t i = 0; i < opts.sample_count; ++i) {
    const std::size_t cls = i % opts.class_count;
    const std::size_t wrong = (cls + 1 + rng() % (opts.class_count - 1)) % opts.class_count;
    ImageTensor img = synthetic_image(cls, opts, rng);
    out.push_back({{"id", "syn" + std::to_string(i)},
                   {"prompt", kSyntheticPrompt},
                   {"chosen", synthetic_caption(cls)},
                   {"rejected", synthetic_caption(wrong)},
                   {"image", {{"w", img.width}, {"h", img.height}, {"c", img.channels}, {"data", img.values}}}});
  }
  return out;
}

inline std::string synthetic_jsonl(const SyntheticOptions& opts) {
  std::string s;
  for (const auto& r : synthetic_records(opts)) s += r.dump() + "\n";
  return s;
}

inline Dataset synthetic_dataset(const SyntheticOptions& opts, const DatasetOptions& dopts) {
  std::istringstream in(synthetic_jsonl(opts));
  return parse_dataset(in, dopts);
}

}  // namespace chip
