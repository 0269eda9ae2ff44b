// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/config.hpp>
#include <chip/losses.hpp>
#include <chip/model.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

// ---------------------------------------------------------------------------
// Tokenizer: one token per byte over a fixed 64-symbol alphabet.

inline constexpr std::string_view kAlphabet =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.";
static_assert(kAlphabet.size() == 64);

namespace detail {

inline const std::array<int, 256>& alphabet_index() {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    for (std::size_t i = 0; i < kAlphabet.size(); ++i) t[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
    return t;
  }();
  return table;
}

}  // namespace detail

// Out-of-alphabet bytes fold onto the alphabet by hashing; ids fold again
// modulo vocab_size when the vocabulary is smaller than the alphabet.
inline TokenSequence tokenize(std::string_view text, std::size_t vocab_size = kAlphabet.size()) {
  if (vocab_size == 0) throw std::invalid_argument("tokenize: vocab_size must be positive");
  TokenSequence out;
  out.reserve(text.size());
  for (char ch : text) {
    const auto byte = static_cast<unsigned char>(ch);
    int id = detail::alphabet_index()[byte];
    if (id < 0) id = static_cast<int>((byte * 2654435761u >> 8) % kAlphabet.size());
    out.push_back(static_cast<TokenId>(static_cast<std::size_t>(id) % vocab_size));
  }
  return out;
}

inline std::string detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(t < kAlphabet.size() ? kAlphabet[t] : '?');
  return out;
}

// ---------------------------------------------------------------------------
// Changed-segment extraction

// Clears every maximal run of true shorter than min_len.
inline SegmentMask filter_short_runs(const SegmentMask& mask, std::size_t min_len) {
  SegmentMask out(mask.size(), false);
  std::size_t i = 0;
  while (i < mask.size()) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < mask.size() && mask[j]) ++j;
    if (j - i >= min_len) std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(j), true);
    i = j;
  }
  return out;
}

// Tokens of each side outside one longest common subsequence. Ties during
// traceback are broken by token value, so swapping the arguments swaps the
// result.
inline std::pair<SegmentMask, SegmentMask> lcs_changed(std::span<const TokenId> a, std::span<const TokenId> b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1), 0);
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = a[i - 1] == b[j - 1] ? at(i - 1, j - 1) + 1 : std::max(at(i - 1, j), at(i, j - 1));
  SegmentMask ca(n, true), cb(m, true);
  std::size_t i = n, j = m;
  while (i > 0 && j > 0) {
    if (a[i - 1] == b[j - 1]) {
      ca[--i] = false;
      cb[--j] = false;
    } else if (at(i - 1, j) > at(i, j - 1) || (at(i - 1, j) == at(i, j - 1) && a[i - 1] > b[j - 1])) {
      --i;
    } else {
      --j;
    }
  }
  return {ca, cb};
}

// (chosen_mask, rejected_mask). Rejected keeps only changed runs of at least
// min_len tokens; chosen keeps every changed token.
inline std::pair<SegmentMask, SegmentMask> diff_segments(std::span<const TokenId> chosen,
                                                         std::span<const TokenId> rejected, std::size_t min_len = 3) {
  if (min_len < 1) throw std::invalid_argument("diff_segments: min_len must be >= 1");
  auto [c, r] = lcs_changed(chosen, rejected);
  return {std::move(c), filter_short_runs(r, min_len)};
}

// ---------------------------------------------------------------------------
// Forward diffusion schedule

struct DiffusionSchedule {
  std::vector<double> betas;       // betas[t-1] is beta_t
  std::vector<double> alpha_bars;  // alpha_bars[t-1] is prod_{i<=t} (1 - beta_i)

  double alpha_bar(std::size_t t) const {
    if (t < 1 || t > alpha_bars.size()) throw index_error("alpha_bar: step out of range");
    return alpha_bars[t - 1];
  }
};

inline DiffusionSchedule build_schedule(const CorruptionSpec& spec) {
  spec.validate();
  const std::size_t n = spec.schedule_steps;
  DiffusionSchedule s;
  s.betas.resize(n);
  s.alpha_bars.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    s.betas[i] = spec.beta_start + (spec.beta_end - spec.beta_start) * frac;
    prod *= 1.0 - s.betas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rejected-image construction

// zero forces the diffusion noise to 0 (test hook).
enum class NoiseMode { sampled, zero };

inline ImageTensor corrupt_image(const ImageTensor& image, const CorruptionSpec& spec,
                                 std::span<const ImageTensor> pool = {}, NoiseMode noise = NoiseMode::sampled) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  ImageTensor out(image.width, image.height, image.channels);

  switch (spec.strategy) {
    case CorruptionStrategy::diffusion: {
      const double ab = build_schedule(spec).alpha_bar(spec.noise_step);
      const double keep = std::sqrt(ab), noise_scale = std::sqrt(1.0 - ab);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t i = 0; i < image.values.size(); ++i) {
        const double eps = noise == NoiseMode::zero ? 0.0 : normal(rng);
        out.values[i] = keep * image.values[i] + noise_scale * eps;
      }
      return out;
    }
    case CorruptionStrategy::blackness:
      return out;
    case CorruptionStrategy::crop: {
      const double rx = uniform(spec.crop_ratio_range.first, spec.crop_ratio_range.second);
      const double ry = uniform(spec.crop_ratio_range.first, spec.crop_ratio_range.second);
      const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(rx * image.width)), 1, image.width);
      const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(ry * image.height)), 1, image.height);
      const auto x0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(image.width - cw + 1));
      const auto y0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(image.height - ch + 1));
      for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
          const std::size_t sx = x0 + x * cw / image.width, sy = y0 + y * ch / image.height;
          for (std::size_t c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(sx, sy, c);
        }
      return out;
    }
    case CorruptionStrategy::rotation: {
      const double deg = uniform(spec.rotation_degree_range.first, spec.rotation_degree_range.second);
      const double rad = deg * std::numbers::pi / 180.0;
      const double cs = std::cos(rad), sn = std::sin(rad);
      const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
      const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
      for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
          // Inverse-map each output pixel onto the source grid.
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          const double sx = std::round(cs * dx + sn * dy + cx);
          const double sy = std::round(-sn * dx + cs * dy + cy);
          if (sx < 0 || sy < 0 || sx >= static_cast<double>(image.width) || sy >= static_cast<double>(image.height))
            continue;
          for (std::size_t c = 0; c < image.channels; ++c)
            out.at(x, y, c) = image.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), c);
        }
      return out;
    }
    case CorruptionStrategy::randomness: {
      if (pool.empty()) throw std::invalid_argument("corrupt_image: random strategy requires an image pool");
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (!(pool[i] == image)) candidates.push_back(i);
      if (candidates.empty()) throw std::invalid_argument("corrupt_image: pool holds no image other than the input");
      const auto pick = static_cast<std::size_t>(unit(rng) * static_cast<double>(candidates.size()));
      const ImageTensor& chosen = pool[candidates[std::min(pick, candidates.size() - 1)]];
      if (!chosen.same_shape(image)) throw shape_error("corrupt_image: pool image shape differs from input");
      return chosen;
    }
  }
  throw std::logic_error("unknown corruption strategy");
}

// ---------------------------------------------------------------------------
// Image sidecar: "CHIP", u32 w, u32 h, u32 c (little-endian), then w*h*c float64 LE.

inline void write_image(const ImageTensor& image, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image " + path);
  os.write("CHIP", 4);
  for (std::size_t v : {image.width, image.height, image.channels}) {
    const auto u = static_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  for (double v : image.values) detail::write_f64_le(os, v);
}

inline ImageTensor read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read image " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "CHIP") throw std::runtime_error(path + ": bad image magic");
  std::array<std::size_t, 3> dims{};
  for (auto& d : dims) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(path + ": truncated image header");
    d = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::size_t>(b[3]) << 24);
  }
  std::vector<double> values(dims[0] * dims[1] * dims[2]);
  for (auto& v : values) v = detail::read_f64_le(is);
  return ImageTensor(dims[0], dims[1], dims[2], std::move(values));
}

// ---------------------------------------------------------------------------
// Dataset

struct PreferenceSample {
  std::string id;
  TokenSequence prompt, chosen, rejected;
  ImageTensor chosen_image;
  ImageTensor rejected_image;
  SegmentMask chosen_mask, rejected_mask;
};

struct DatasetOptions {
  std::size_t vocab_size = 64;
  std::size_t min_segment_len = 3;
  CorruptionSpec corruption;
  // Expected image geometry; 0 disables the check.
  std::size_t image_side = 0;
  std::size_t channels = 0;
};

struct Dataset {
  std::vector<PreferenceSample> samples;
  std::size_t skipped_identical = 0;
};

class dataset_error : public std::runtime_error {
 public:
  dataset_error(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Per-sample corruption seed derived from the spec seed and record index.
inline std::uint64_t sample_seed(std::uint64_t base, std::size_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace detail {

inline ImageTensor parse_image(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (j.contains("path")) {
    std::filesystem::path p = j.at("path").get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    return read_image(p.string());
  }
  return ImageTensor(j.at("w").get<std::size_t>(), j.at("h").get<std::size_t>(), j.at("c").get<std::size_t>(),
                     j.at("data").get<std::vector<double>>());
}

inline SegmentMask parse_mask(const nlohmann::json& j, std::size_t expected, const char* name) {
  SegmentMask m;
  for (const auto& v : j) m.push_back(v.get<int>() != 0);
  if (m.size() != expected) throw std::invalid_argument(std::string(name) + " length does not match its response");
  return m;
}

}  // namespace detail

// Rejected images missing from the records are built with opts.corruption,
// seeded per record; the random strategy draws from all chosen images.
inline Dataset parse_dataset(std::istream& in, const DatasetOptions& opts, const std::filesystem::path& base_dir = ".") {
  struct Pending {
    PreferenceSample sample;
    bool needs_rejected_image;
  };
  std::vector<Pending> pending;
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const char* key : {"prompt", "chosen", "rejected", "image"})
        if (!j.contains(key)) throw std::invalid_argument(std::string("missing \"") + key + "\"");
      PreferenceSample s;
      s.id = j.contains("id") ? j.at("id").get<std::string>() : std::to_string(lineno);
      s.prompt = tokenize(j.at("prompt").get<std::string>(), opts.vocab_size);
      s.chosen = tokenize(j.at("chosen").get<std::string>(), opts.vocab_size);
      s.rejected = tokenize(j.at("rejected").get<std::string>(), opts.vocab_size);
      if (s.chosen.empty() || s.rejected.empty()) throw std::invalid_argument("empty response");
      s.chosen_image = detail::parse_image(j.at("image"), base_dir);
      if (opts.image_side && (s.chosen_image.width != opts.image_side || s.chosen_image.height != opts.image_side ||
                              s.chosen_image.channels != opts.channels))
        throw std::invalid_argument("image shape does not match the model");
      if (s.chosen == s.rejected) {
        ++ds.skipped_identical;
        continue;
      }
      bool needs = true;
      if (j.contains("rejected_image")) {
        s.rejected_image = detail::parse_image(j.at("rejected_image"), base_dir);
        if (!s.rejected_image.same_shape(s.chosen_image)) throw std::invalid_argument("rejected_image shape mismatch");
        needs = false;
      }
      auto [cm, rm] = diff_segments(s.chosen, s.rejected, opts.min_segment_len);
      s.chosen_mask = j.contains("chosen_mask") ? detail::parse_mask(j.at("chosen_mask"), s.chosen.size(), "chosen_mask") : cm;
      s.rejected_mask =
          j.contains("rejected_mask") ? detail::parse_mask(j.at("rejected_mask"), s.rejected.size(), "rejected_mask") : rm;
      pending.push_back({std::move(s), needs});
    } catch (const dataset_error&) {
      throw;
    } catch (const std::exception& e) {
      throw dataset_error(lineno, e.what());
    }
  }
  std::vector<ImageTensor> pool;
  if (opts.corruption.strategy == CorruptionStrategy::randomness)
    for (const auto& p : pending) pool.push_back(p.sample.chosen_image);
  for (std::size_t i = 0; i < pending.size(); ++i) {
    auto& p = pending[i];
    if (p.needs_rejected_image) {
      CorruptionSpec spec = opts.corruption;
      spec.seed = sample_seed(opts.corruption.seed, i);
      p.sample.rejected_image = corrupt_image(p.sample.chosen_image, spec, pool);
    }
    ds.samples.push_back(std::move(p.sample));
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, const DatasetOptions& opts) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return parse_dataset(in, opts, std::filesystem::path(path).parent_path());
}

// Rebuilds every rejected image from the chosen images with `spec`.
inline void recorrupt(std::vector<PreferenceSample>& samples, const CorruptionSpec& spec) {
  std::vector<ImageTensor> pool;
  if (spec.strategy == CorruptionStrategy::randomness)
    for (const auto& s : samples) pool.push_back(s.chosen_image);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = sample_seed(spec.seed, i);
    samples[i].rejected_image = corrupt_image(samples[i].chosen_image, s, pool);
  }
}

// Sample indices grouped into batches, shuffled deterministically by (seed, epoch).
// The final partial batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t sample_count, std::size_t batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(sample_count);
  for (std::size_t i = 0; i < sample_count; ++i) order[i] = i;
  std::mt19937_64 rng(sample_seed(seed, static_cast<std::size_t>(epoch)));
  for (std::size_t i = sample_count; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < sample_count; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(sample_count, i + batch_size)));
  return out;
}

}  // namespace chip
