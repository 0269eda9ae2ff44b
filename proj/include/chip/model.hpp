// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/tensor.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Standardized pixels, row-major (y, x, channel).
struct ImageTensor {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  ImageTensor() = default;
  ImageTensor(std::size_t w, std::size_t h, std::size_t c, std::vector<double> v)
      : width(w), height(h), channels(c), values(std::move(v)) {
    if (values.size() != w * h * c) throw shape_error("image: values do not match w*h*c");
  }
  ImageTensor(std::size_t w, std::size_t h, std::size_t c) : ImageTensor(w, h, c, std::vector<double>(w * h * c)) {}

  double& at(std::size_t x, std::size_t y, std::size_t ch) { return values[(y * width + x) * channels + ch]; }
  double at(std::size_t x, std::size_t y, std::size_t ch) const { return values[(y * width + x) * channels + ch]; }
  bool same_shape(const ImageTensor& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const ImageTensor&) const = default;
};

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden_dim = 32;
  std::size_t layer_count = 2;
  std::size_t head_count = 2;
  std::size_t max_seq_len = 48;
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t channels = 3;
  std::uint64_t seed = 0;

  std::size_t patch_count() const { return (image_side / patch_side) * (image_side / patch_side); }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (vocab_size == 0 || hidden_dim == 0 || layer_count == 0 || head_count == 0 || max_seq_len == 0)
      fail("sizes must be positive");
    if (hidden_dim % head_count != 0) fail("hidden_dim must be divisible by head_count");
    if (patch_side == 0 || image_side == 0 || channels == 0) fail("image geometry must be positive");
    if (image_side % patch_side != 0) fail("image_side must be divisible by patch_side");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},   {"hidden_dim", c.hidden_dim},   {"layer_count", c.layer_count},
       {"head_count", c.head_count},   {"max_seq_len", c.max_seq_len}, {"image_side", c.image_side},
       {"patch_side", c.patch_side},   {"channels", c.channels},       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.layer_count = j.value("layer_count", c.layer_count);
  c.head_count = j.value("head_count", c.head_count);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.image_side = j.value("image_side", c.image_side);
  c.patch_side = j.value("patch_side", c.patch_side);
  c.channels = j.value("channels", c.channels);
  c.seed = j.value("seed", c.seed);
}

enum class Role { policy, reference };

inline const char* role_name(Role r) { return r == Role::policy ? "policy" : "reference"; }

using WeightMap = std::map<std::string, Tensor>;

struct ModelParams {
  ModelConfig config;
  Role role = Role::policy;
  WeightMap weights;  // sorted by name

  const Tensor& get(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : weights) n += t.size();
    return n;
  }
};

// Vision-side tensors (patch projection and connector).
inline bool is_vision_parameter(const std::string& name) { return name.rfind("vision.", 0) == 0; }

namespace detail {

inline std::string block_name(std::size_t layer, const char* suffix) {
  return "block" + std::to_string(layer) + "." + suffix;
}

}  // namespace detail

// Deterministic in (config, seed). Normal(0, 0.02) weights; residual output
// projections are further scaled by 1/sqrt(2 * layer_count).
inline ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t h = config.hidden_dim, v = config.vocab_size;
  std::map<std::string, Shape> shapes;
  std::map<std::string, double> stddev;
  auto weight = [&](const std::string& name, Shape s, double sd = 0.02) {
    shapes[name] = std::move(s);
    stddev[name] = sd;
  };
  auto zeros = [&](const std::string& name, Shape s) { weight(name, std::move(s), 0.0); };
  auto ones = [&](const std::string& name, Shape s) { weight(name, std::move(s), -1.0); };

  const double resid_sd = 0.02 / std::sqrt(2.0 * static_cast<double>(config.layer_count));
  weight("vision.patch_proj.weight", {config.patch_dim(), h});
  zeros("vision.patch_proj.bias", {h});
  weight("vision.connector.weight", {h, h});
  zeros("vision.connector.bias", {h});
  weight("embed.tokens", {v, h});
  weight("embed.positions", {config.max_seq_len, h});
  weight("embed.bos", {1, h});
  for (std::size_t l = 0; l < config.layer_count; ++l) {
    ones(detail::block_name(l, "ln1.gain"), {h});
    zeros(detail::block_name(l, "ln1.bias"), {h});
    weight(detail::block_name(l, "attn.query"), {h, h});
    weight(detail::block_name(l, "attn.key"), {h, h});
    weight(detail::block_name(l, "attn.value"), {h, h});
    weight(detail::block_name(l, "attn.out.weight"), {h, h}, resid_sd);
    zeros(detail::block_name(l, "attn.out.bias"), {h});
    ones(detail::block_name(l, "ln2.gain"), {h});
    zeros(detail::block_name(l, "ln2.bias"), {h});
    weight(detail::block_name(l, "mlp.fc.weight"), {h, 4 * h});
    zeros(detail::block_name(l, "mlp.fc.bias"), {4 * h});
    weight(detail::block_name(l, "mlp.proj.weight"), {4 * h, h}, resid_sd);
    zeros(detail::block_name(l, "mlp.proj.bias"), {h});
  }
  ones("final_ln.gain", {h});
  zeros("final_ln.bias", {h});
  weight("head.weight", {h, v});
  zeros("head.bias", {v});

  ModelParams params;
  params.config = config;
  params.config.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& [name, shape] : shapes) {
    std::vector<double> values(shape_size(shape));
    const double sd = stddev[name];
    if (sd < 0) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (sd > 0) {
      for (auto& x : values) x = sd * normal(rng);
    }
    params.weights.emplace(name, Tensor(shape, std::move(values)));
  }
  return params;
}

// Deep copy carrying the reference role.
inline ModelParams clone_as_reference(const ModelParams& params) {
  ModelParams ref;
  ref.config = params.config;
  ref.role = Role::reference;
  for (const auto& [name, t] : params.weights) {
    ref.weights.emplace(name, Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end())));
  }
  return ref;
}

// Binds every weight as a tracked leaf on `tape`.
inline WeightMap track(const ModelParams& params, Tape& tape) {
  WeightMap out;
  for (const auto& [name, t] : params.weights) out.emplace(name, tape.variable(t));
  return out;
}

namespace detail {

// [patch_count x patch_dim] matrix of flattened patches, patches in raster order.
inline Tensor patchify(const ImageTensor& image, const ModelConfig& config) {
  if (image.width != config.image_side || image.height != config.image_side || image.channels != config.channels) {
    throw shape_error("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) + "x" +
                      std::to_string(image.channels) + ", model expects side " + std::to_string(config.image_side) +
                      " with " + std::to_string(config.channels) + " channels");
  }
  const std::size_t ps = config.patch_side, grid = config.image_side / ps;
  std::vector<double> out;
  out.reserve(config.patch_count() * config.patch_dim());
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px)
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t c = 0; c < config.channels; ++c) out.push_back(image.at(px * ps + dx, py * ps + dy, c));
  return Tensor::matrix(config.patch_count(), config.patch_dim(), std::move(out));
}

inline const Tensor& w(const WeightMap& weights, const std::string& name) {
  auto it = weights.find(name);
  if (it == weights.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

inline Tensor attention(const WeightMap& wm, std::size_t layer, const Tensor& x, std::size_t heads) {
  const std::size_t hd = x.dim(1) / heads;
  Tensor q = matmul(x, w(wm, block_name(layer, "attn.query")));
  Tensor k = matmul(x, w(wm, block_name(layer, "attn.key")));
  Tensor v = matmul(x, w(wm, block_name(layer, "attn.value")));
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor probs = causal_softmax(scale(matmul(qh, kh, true), inv));
    outs.push_back(matmul(probs, vh));
  }
  Tensor merged = concat_cols(outs);
  return add_bias(matmul(merged, w(wm, block_name(layer, "attn.out.weight"))), w(wm, block_name(layer, "attn.out.bias")));
}

inline Tensor mlp(const WeightMap& wm, std::size_t layer, const Tensor& x) {
  Tensor hdn = gelu(add_bias(matmul(x, w(wm, block_name(layer, "mlp.fc.weight"))), w(wm, block_name(layer, "mlp.fc.bias"))));
  return add_bias(matmul(hdn, w(wm, block_name(layer, "mlp.proj.weight"))), w(wm, block_name(layer, "mlp.proj.bias")));
}

}  // namespace detail

// Image tokens (after the connector) for one image: [patch_count x hidden].
inline Tensor encode_image(const ModelConfig& config, const WeightMap& wm, const ImageTensor& image) {
  Tensor patches = detail::patchify(image, config);
  Tensor h = gelu(add_bias(matmul(patches, detail::w(wm, "vision.patch_proj.weight")), detail::w(wm, "vision.patch_proj.bias")));
  return add_bias(matmul(h, detail::w(wm, "vision.connector.weight")), detail::w(wm, "vision.connector.bias"));
}

// Final-layer hidden states (after the final layer norm) for the input laid
// out as [image patches][bos][tokens]. Returns [positions x hidden].
inline Tensor forward_hidden(const ModelConfig& config, const WeightMap& wm, const std::optional<ImageTensor>& image,
                             std::span<const TokenId> tokens) {
  const std::size_t prefix = image ? config.patch_count() : 0;
  const std::size_t length = prefix + 1 + tokens.size();
  if (length > config.max_seq_len) {
    throw std::length_error("sequence of " + std::to_string(length) + " positions exceeds max_seq_len " +
                            std::to_string(config.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= config.vocab_size) throw index_error("token id " + std::to_string(t) + " >= vocab_size");
  }
  std::vector<Tensor> parts;
  if (image) parts.push_back(encode_image(config, wm, *image));
  parts.push_back(detail::w(wm, "embed.bos"));
  if (!tokens.empty()) parts.push_back(embedding(detail::w(wm, "embed.tokens"), tokens));
  Tensor x = add(concat_rows(parts), slice_rows(detail::w(wm, "embed.positions"), 0, length));
  for (std::size_t l = 0; l < config.layer_count; ++l) {
    using detail::block_name;
    Tensor a = layer_norm(x, detail::w(wm, block_name(l, "ln1.gain")), detail::w(wm, block_name(l, "ln1.bias")));
    x = add(x, detail::attention(wm, l, a, config.head_count));
    Tensor m = layer_norm(x, detail::w(wm, block_name(l, "ln2.gain")), detail::w(wm, block_name(l, "ln2.bias")));
    x = add(x, detail::mlp(wm, l, m));
  }
  return layer_norm(x, detail::w(wm, "final_ln.gain"), detail::w(wm, "final_ln.bias"));
}

// Row t is log p(response[t] | image, prompt, response[<t]); shape [|response| x vocab].
inline Tensor forward_logprobs(const ModelConfig& config, const WeightMap& wm, const std::optional<ImageTensor>& image,
                               std::span<const TokenId> prompt, std::span<const TokenId> response) {
  if (response.empty()) throw shape_error("forward_logprobs: empty response");
  TokenSequence seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end() - 1);
  Tensor hidden = forward_hidden(config, wm, image, seq);
  const std::size_t first = (image ? config.patch_count() : 0) + prompt.size();
  Tensor states = slice_rows(hidden, first, first + response.size());
  Tensor logits = add_bias(matmul(states, detail::w(wm, "head.weight")), detail::w(wm, "head.bias"));
  return log_softmax(logits);
}

inline Tensor forward_logprobs(const ModelParams& params, const std::optional<ImageTensor>& image,
                               std::span<const TokenId> prompt, std::span<const TokenId> response) {
  return forward_logprobs(params.config, params.weights, image, prompt, response);
}

// Hidden state at the last input position, before the output head.
inline std::vector<double> last_token_hidden(const ModelParams& params, const std::optional<ImageTensor>& image,
                                             std::span<const TokenId> tokens) {
  if (tokens.empty() && !image) throw std::invalid_argument("last_token_hidden: empty input");
  Tensor hidden = forward_hidden(params.config, params.weights, image, tokens);
  Tensor last = row(hidden, hidden.dim(0) - 1);
  return {last.values().begin(), last.values().end()};
}

// Greedy decoding for smoke tests.
inline TokenSequence generate_greedy(const ModelParams& params, const std::optional<ImageTensor>& image,
                                     std::span<const TokenId> prompt, std::size_t max_new_tokens) {
  TokenSequence seq(prompt.begin(), prompt.end());
  TokenSequence out;
  const std::size_t prefix = (image ? params.config.patch_count() : 0) + 1;
  for (std::size_t i = 0; i < max_new_tokens && prefix + seq.size() < params.config.max_seq_len; ++i) {
    Tensor hidden = forward_hidden(params.config, params.weights, image, seq);
    Tensor last = reshape(row(hidden, hidden.dim(0) - 1), Shape{1, params.config.hidden_dim});
    Tensor logits = add_bias(matmul(last, params.get("head.weight")), params.get("head.bias"));
    auto vals = logits.values();
    auto best = static_cast<TokenId>(std::max_element(vals.begin(), vals.end()) - vals.begin());
    seq.push_back(best);
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one line of JSON header, then each tensor's values as
// little-endian float64 in sorted-name order.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

inline double read_f64_le(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("unexpected end of binary payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  nlohmann::json header;
  header["format"] = "chip-checkpoint";
  header["version"] = kCheckpointVersion;
  header["role"] = role_name(params.role);
  header["config"] = params.config;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : params.weights) list.push_back({{"name", name}, {"shape", t.shape()}});
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os << header.dump() << '\n';
  for (const auto& [_, t] : params.weights)
    for (double v : t.values()) detail::write_f64_le(os, v);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  std::string line;
  std::getline(is, line);
  auto header = nlohmann::json::parse(line);
  if (header.value("format", "") != "chip-checkpoint") throw std::runtime_error(path + ": not a checkpoint");
  if (header.value("version", 0) != kCheckpointVersion) throw std::runtime_error(path + ": unsupported version");
  ModelParams params;
  params.config = header.at("config").get<ModelConfig>();
  params.role = header.at("role").get<std::string>() == "reference" ? Role::reference : Role::policy;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = detail::read_f64_le(is);
    params.weights.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  return params;
}

}  // namespace chip
