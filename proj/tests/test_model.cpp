// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#include <chip/model.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

using namespace chip;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 7;
  c.hidden_dim = 4;
  c.layer_count = 1;
  c.head_count = 2;
  c.max_seq_len = 16;
  c.image_side = 4;
  c.patch_side = 2;
  c.channels = 1;
  return c;
}

ImageTensor random_image(const ModelConfig& c, std::uint64_t seed) {
  ImageTensor img(c.image_side, c.image_side, c.channels);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : img.values) v = n(rng);
  return img;
}

// Larger-than-init weights so the oracle comparison is not dominated by
// near-zero activations.
ModelParams scrambled(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = init_model(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& [name, t] : p.weights) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& x : v) x += n(rng);
    t = Tensor(t.shape(), v);
  }
  return p;
}

using Mat = std::vector<std::vector<double>>;

Mat weights_of(const ModelParams& p, const std::string& name) {
  const Tensor& t = p.get(name);
  const std::size_t r = t.rank() == 1 ? 1 : t.dim(0), c = t.rank() == 1 ? t.dim(0) : t.dim(1);
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[i * c + j];
  return m;
}

Mat matmul_plain(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

void add_row_bias(Mat& m, const Mat& bias) {
  for (auto& r : m)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[0][j];
}

double gelu_plain(double x) {
  const double k = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

Mat layer_norm_plain(const Mat& x, const Mat& g, const Mat& b) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v / static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mu) * (v - mu) / static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
  }
  return out;
}

// Loop-level forward pass of a one-layer model, written out independently.
Mat oracle_logprobs(const ModelParams& p, const ImageTensor& img, const TokenSequence& prompt,
                    const TokenSequence& response) {
  const ModelConfig& c = p.config;
  const std::size_t ps = c.patch_side, grid = c.image_side / ps, hd = c.hidden_dim / c.head_count;
  Mat patches;
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      std::vector<double> row;
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t ch = 0; ch < c.channels; ++ch) row.push_back(img.at(px * ps + dx, py * ps + dy, ch));
      patches.push_back(row);
    }
  Mat h = matmul_plain(patches, weights_of(p, "vision.patch_proj.weight"));
  add_row_bias(h, weights_of(p, "vision.patch_proj.bias"));
  for (auto& r : h)
    for (auto& v : r) v = gelu_plain(v);
  Mat x = matmul_plain(h, weights_of(p, "vision.connector.weight"));
  add_row_bias(x, weights_of(p, "vision.connector.bias"));
  x.push_back(weights_of(p, "embed.bos")[0]);
  Mat emb = weights_of(p, "embed.tokens");
  TokenSequence seq = prompt;
  seq.insert(seq.end(), response.begin(), response.end() - 1);
  for (auto t : seq) x.push_back(emb[t]);
  Mat pos = weights_of(p, "embed.positions");
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += pos[i][j];

  Mat a = layer_norm_plain(x, weights_of(p, "block0.ln1.gain"), weights_of(p, "block0.ln1.bias"));
  Mat q = matmul_plain(a, weights_of(p, "block0.attn.query"));
  Mat k = matmul_plain(a, weights_of(p, "block0.attn.key"));
  Mat v = matmul_plain(a, weights_of(p, "block0.attn.value"));
  const std::size_t n = x.size();
  Mat merged(n, std::vector<double>(c.hidden_dim, 0.0));
  for (std::size_t head = 0; head < c.head_count; ++head)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double d = 0;
        for (std::size_t e = head * hd; e < (head + 1) * hd; ++e) d += q[i][e] * k[j][e];
        s[j] = d / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = head * hd; e < (head + 1) * hd; ++e) merged[i][e] += s[j] / z * v[j][e];
    }
  Mat att = matmul_plain(merged, weights_of(p, "block0.attn.out.weight"));
  add_row_bias(att, weights_of(p, "block0.attn.out.bias"));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c.hidden_dim; ++j) x[i][j] += att[i][j];
  Mat m = layer_norm_plain(x, weights_of(p, "block0.ln2.gain"), weights_of(p, "block0.ln2.bias"));
  Mat f = matmul_plain(m, weights_of(p, "block0.mlp.fc.weight"));
  add_row_bias(f, weights_of(p, "block0.mlp.fc.bias"));
  for (auto& r : f)
    for (auto& val : r) val = gelu_plain(val);
  Mat pr = matmul_plain(f, weights_of(p, "block0.mlp.proj.weight"));
  add_row_bias(pr, weights_of(p, "block0.mlp.proj.bias"));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c.hidden_dim; ++j) x[i][j] += pr[i][j];
  x = layer_norm_plain(x, weights_of(p, "final_ln.gain"), weights_of(p, "final_ln.bias"));

  const std::size_t first = c.patch_count() + prompt.size();
  Mat states(x.begin() + static_cast<long>(first), x.begin() + static_cast<long>(first + response.size()));
  Mat logits = matmul_plain(states, weights_of(p, "head.weight"));
  add_row_bias(logits, weights_of(p, "head.bias"));
  for (auto& r : logits) {
    double mx = *std::max_element(r.begin(), r.end()), z = 0;
    for (double l : r) z += std::exp(l - mx);
    for (auto& l : r) l = l - mx - std::log(z);
  }
  return logits;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.hidden_dim = 8;
  c.head_count = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(init_model(c, 0), std::invalid_argument);
  ModelConfig d;
  d.image_side = 10;
  d.patch_side = 4;
  EXPECT_THROW(d.validate(), std::invalid_argument);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = tiny_config();
  c.seed = 42;
  EXPECT_EQ(nlohmann::json(c).get<ModelConfig>(), c);
}

TEST(InitModel, DeterministicInSeed) {
  ModelParams a = init_model(ModelConfig{}, 5), b = init_model(ModelConfig{}, 5), c = init_model(ModelConfig{}, 6);
  bool differs = false;
  for (const auto& [name, t] : a.weights) {
    auto u = t.values(), v = b.get(name).values(), w = c.get(name).values();
    EXPECT_TRUE(std::equal(u.begin(), u.end(), v.begin())) << name;
    differs = differs || !std::equal(u.begin(), u.end(), w.begin());
  }
  EXPECT_TRUE(differs);
}

TEST(InitModel, ParameterInventory) {
  ModelParams p = init_model(ModelConfig{}, 0);
  EXPECT_EQ(p.get("embed.tokens").shape(), (Shape{64, 32}));
  EXPECT_EQ(p.get("vision.patch_proj.weight").shape(), (Shape{48, 32}));
  EXPECT_EQ(p.get("block1.mlp.fc.weight").shape(), (Shape{32, 128}));
  for (double g : p.get("final_ln.gain").values()) EXPECT_EQ(g, 1.0);
  for (double b : p.get("head.bias").values()) EXPECT_EQ(b, 0.0);
  EXPECT_TRUE(is_vision_parameter("vision.connector.weight"));
  EXPECT_FALSE(is_vision_parameter("embed.tokens"));
  EXPECT_GT(p.parameter_count(), 20000u);
}

TEST(Forward, MatchesLoopOracle) {
  ModelConfig c = tiny_config();
  ModelParams p = scrambled(c, 11);
  ImageTensor img = random_image(c, 3);
  TokenSequence prompt{1, 4}, response{6, 0, 3};
  Tensor lp = forward_logprobs(p, img, prompt, response);
  Mat want = oracle_logprobs(p, img, prompt, response);
  ASSERT_EQ(lp.shape(), (Shape{3, 7}));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(lp.at(t, j), want[t][j], 1e-12);
}

TEST(Forward, RowsAreDistributions) {
  ModelParams p = init_model(ModelConfig{}, 1);
  ImageTensor img = random_image(p.config, 2);
  TokenSequence prompt{3, 4, 5}, response{7, 8};
  Tensor lp = forward_logprobs(p, img, prompt, response);
  for (std::size_t t = 0; t < 2; ++t) {
    double s = 0;
    for (std::size_t j = 0; j < 64; ++j) s += std::exp(lp.at(t, j));
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, Causal) {
  ModelConfig c = tiny_config();
  ModelParams p = scrambled(c, 2);
  ImageTensor img = random_image(c, 4);
  TokenSequence prompt{1}, r1{2, 3, 4}, r2{2, 3, 5};
  Tensor a = forward_logprobs(p, img, prompt, r1), b = forward_logprobs(p, img, prompt, r2);
  // Row t only sees tokens before response[t]; the last token is never an input.
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(a.at(t, j), b.at(t, j));
  TokenSequence r3{2, 6, 4};
  Tensor d = forward_logprobs(p, img, prompt, r3);
  for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(a.at(1, j), d.at(1, j));
  EXPECT_NE(a.at(2, 0), d.at(2, 0));
}

TEST(Forward, ImageChangesOutput) {
  ModelConfig c = tiny_config();
  ModelParams p = scrambled(c, 2);
  TokenSequence prompt{1}, r{2, 3};
  Tensor a = forward_logprobs(p, random_image(c, 1), prompt, r), b = forward_logprobs(p, random_image(c, 2), prompt, r);
  EXPECT_NE(a.at(0, 0), b.at(0, 0));
}

TEST(Forward, Errors) {
  ModelConfig c = tiny_config();
  ModelParams p = init_model(c, 0);
  ImageTensor img = random_image(c, 1);
  TokenSequence long_prompt(12, 1), r{1, 2};
  EXPECT_THROW(forward_logprobs(p, img, long_prompt, r), std::length_error);
  TokenSequence bad{9};
  EXPECT_THROW(forward_logprobs(p, img, bad, r), index_error);
  EXPECT_THROW(forward_logprobs(p, img, TokenSequence{1}, TokenSequence{}), shape_error);
  ImageTensor wrong(6, 6, 1);
  EXPECT_THROW(forward_logprobs(p, wrong, TokenSequence{1}, r), shape_error);
}

TEST(Forward, LastTokenHidden) {
  ModelParams p = init_model(ModelConfig{}, 0);
  TokenSequence t{1, 2, 3};
  auto h = last_token_hidden(p, std::nullopt, t);
  EXPECT_EQ(h.size(), 32u);
  EXPECT_EQ(h, last_token_hidden(p, std::nullopt, t));
  EXPECT_THROW(last_token_hidden(p, std::nullopt, TokenSequence{}), std::invalid_argument);
  EXPECT_EQ(last_token_hidden(p, random_image(p.config, 0), TokenSequence{}).size(), 32u);
}

TEST(Forward, GreedyGenerationIsDeterministic) {
  ModelParams p = init_model(ModelConfig{}, 0);
  ImageTensor img = random_image(p.config, 1);
  TokenSequence prompt{1, 2};
  auto a = generate_greedy(p, img, prompt, 5);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(a, generate_greedy(p, img, prompt, 5));
  for (auto t : a) EXPECT_LT(t, 64u);
}

TEST(Params, CloneIsDeep) {
  ModelParams p = init_model(tiny_config(), 0);
  ModelParams r = clone_as_reference(p);
  EXPECT_EQ(r.role, Role::reference);
  EXPECT_NE(r.get("head.weight").id(), p.get("head.weight").id());
  EXPECT_EQ(r.get("head.weight")[0], p.get("head.weight")[0]);
}

TEST(Params, TrackedGradientsReachEveryWeight) {
  ModelConfig c = tiny_config();
  ModelParams p = scrambled(c, 1);
  Tape tape;
  WeightMap wm = track(p, tape);
  TokenSequence prompt{1}, r{2, 3};
  Tensor lp = forward_logprobs(c, wm, random_image(c, 1), prompt, r);
  GradientMap g = tape.backward(sum(gather_log_prob(lp, r)));
  for (const auto& [name, t] : wm) {
    auto gv = g.at(t);
    double norm = 0;
    for (double x : gv) norm += x * x;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelParams p = scrambled(tiny_config(), 9);
  auto dir = std::filesystem::temp_directory_path() / "chip_test_ckpt";
  std::filesystem::create_directories(dir);
  auto path = (dir / "p.ckpt").string();
  save_checkpoint(p, path);
  ModelParams q = load_checkpoint(path);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.role, p.role);
  ASSERT_EQ(q.weights.size(), p.weights.size());
  for (const auto& [name, t] : p.weights) {
    auto a = t.values(), b = q.get(name).values();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
  }
  auto path2 = (dir / "q.ckpt").string();
  save_checkpoint(q, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  EXPECT_EQ(s1.str(), s2.str());
}

TEST(Checkpoint, RejectsGarbage) {
  auto path = (std::filesystem::temp_directory_path() / "chip_garbage.ckpt").string();
  std::ofstream(path) << "not a checkpoint\n";
  EXPECT_ANY_THROW(load_checkpoint(path));
  EXPECT_ANY_THROW(load_checkpoint(path + ".missing"));
}
