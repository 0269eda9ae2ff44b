// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/data.hpp>
#include <chip/model.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace chip {

enum class RepLabel { image, chosen_text, rejected_text };

inline const char* rep_label_name(RepLabel l) {
  switch (l) {
    case RepLabel::image: return "image";
    case RepLabel::chosen_text: return "chosen_text";
    case RepLabel::rejected_text: return "rejected_text";
  }
  return "?";
}

struct Representation {
  RepLabel label;
  std::string sample_id;
  std::vector<double> vector;
};

using RepresentationSet = std::vector<Representation>;

// Three last-token states per sample: the image alone, the chosen text alone,
// the rejected text alone.
inline RepresentationSet extract_representations(const ModelParams& params, std::span<const PreferenceSample> samples,
                                                 std::size_t limit = 150) {
  if (samples.empty()) throw std::invalid_argument("extract_representations: empty dataset");
  RepresentationSet out;
  const std::size_t n = std::min(limit, samples.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    out.push_back({RepLabel::image, s.id, last_token_hidden(params, s.chosen_image, {})});
    out.push_back({RepLabel::chosen_text, s.id, last_token_hidden(params, std::nullopt, s.chosen)});
    out.push_back({RepLabel::rejected_text, s.id, last_token_hidden(params, std::nullopt, s.rejected)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> axes;
  std::array<double, 2> explained_variance{};
  std::vector<std::array<double, 2>> projected;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// First component with magnitude above `tiny` is made positive.
inline void canonical_sign(std::vector<double>& v, double tiny = 1e-12) {
  for (double x : v) {
    if (std::abs(x) <= tiny) continue;
    if (x < 0)
      for (double& y : v) y = -y;
    return;
  }
}

inline std::vector<double> matvec(const std::vector<double>& m, std::size_t d, std::span<const double> v) {
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += m[i * d + j] * v[j];
  return out;
}

inline void orthogonalize(std::vector<double>& v, std::span<const std::vector<double>> basis) {
  for (const auto& b : basis) {
    const double p = dot(v, b);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
  }
}

// Dominant eigenpair of the symmetric PSD matrix `cov` restricted to the
// complement of `deflated`. Returns eigenvalue 0 with an arbitrary unit
// vector in that complement when the restricted matrix vanishes.
inline std::pair<double, std::vector<double>> power_iteration(const std::vector<double>& cov, std::size_t d,
                                                               std::span<const std::vector<double>> deflated,
                                                               double scale, double tol, std::size_t max_iter) {
  // Start from the basis vector with the largest residual diagonal; ties go to the lowest index.
  std::vector<double> v(d, 0.0);
  double best = -1.0;
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    orthogonalize(e, deflated);
    const double n = norm(e);
    if (n < 1e-8) continue;
    for (double& x : e) x /= n;
    const double r = dot(e, matvec(cov, d, e));
    if (r > best + 1e-15) {
      best = r;
      v = e;
    }
  }
  // Mix in every direction so the start is never orthogonal to the target.
  for (std::size_t i = 0; i < d; ++i) v[i] += 1e-3 * static_cast<double>(i + 1) / static_cast<double>(d);
  orthogonalize(v, deflated);
  double n = norm(v);
  for (double& x : v) x /= n;

  for (std::size_t it = 0; it < max_iter; ++it) {
    std::vector<double> w = matvec(cov, d, v);
    orthogonalize(w, deflated);
    const double wn = norm(w);
    if (wn <= 1e-14 * scale) return {0.0, v};
    for (double& x : w) x /= wn;
    canonical_sign(w);
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (diff < tol) break;
  }
  const double lambda = dot(v, matvec(cov, d, v));
  return {std::max(lambda, 0.0), v};
}

}  // namespace detail

// Top-2 principal axes of the mean-centered data by power iteration with
// deflation. Variances use the n-1 denominator.
inline PcaResult pca_2d(std::span<const std::vector<double>> vectors, double tol = 1e-10,
                        std::size_t max_iter = 10000) {
  if (vectors.size() < 3) throw std::invalid_argument("pca_2d: need at least 3 vectors");
  const std::size_t d = vectors[0].size();
  if (d < 2) throw std::invalid_argument("pca_2d: need dimension >= 2");
  for (const auto& v : vectors)
    if (v.size() != d) throw shape_error("pca_2d: vectors differ in length");
  const double n = static_cast<double>(vectors.size());

  PcaResult r;
  r.mean.assign(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < d; ++i) r.mean[i] += v[i] / n;
  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += (v[i] - r.mean[i]) * (v[j] - r.mean[j]) / (n - 1.0);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];
  if (trace <= 0.0) throw std::invalid_argument("pca_2d: data has zero variance");

  std::vector<std::vector<double>> found;
  for (std::size_t k = 0; k < 2; ++k) {
    auto [lambda, axis] = detail::power_iteration(cov, d, found, trace, tol, max_iter);
    detail::canonical_sign(axis);
    r.axes[k] = axis;
    r.explained_variance[k] = lambda;
    found.push_back(std::move(axis));
  }
  for (const auto& v : vectors) {
    std::array<double, 2> p{};
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < d; ++i) p[k] += (v[i] - r.mean[i]) * r.axes[k][i];
    r.projected.push_back(p);
  }
  return r;
}

inline PcaResult pca_2d(const RepresentationSet& reps) {
  std::vector<std::vector<double>> vs;
  for (const auto& r : reps) vs.push_back(r.vector);
  return pca_2d(vs);
}

inline void write_pca_csv(std::ostream& os, const RepresentationSet& reps, const PcaResult& pca) {
  os << "label,sample_id,x,y\n";
  char buf[64];
  for (std::size_t i = 0; i < reps.size(); ++i) {
    os << rep_label_name(reps[i].label) << ',' << reps[i].sample_id;
    for (double c : pca.projected[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", c);
      os << buf;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Alignment statistics

struct AlignmentStats {
  double img_chosen_cos = 0;
  double chosen_rejected_cos = 0;
  double gap = 0;
  std::size_t excluded = 0;
};

inline void to_json(nlohmann::json& j, const AlignmentStats& s) {
  j = {{"img_chosen_cos", s.img_chosen_cos},
       {"chosen_rejected_cos", s.chosen_rejected_cos},
       {"gap", s.gap},
       {"excluded", s.excluded}};
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = detail::norm(a), nb = detail::norm(b);
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  return std::clamp(detail::dot(a, b) / (na * nb), -1.0, 1.0);
}

// Per-sample means of cos(image, chosen) and cos(chosen, rejected); samples
// with any zero vector are excluded and counted.
inline AlignmentStats alignment_stats(const RepresentationSet& reps) {
  std::map<std::string, std::array<const std::vector<double>*, 3>> triples;
  std::vector<std::string> order;
  for (const auto& r : reps) {
    auto [it, fresh] = triples.try_emplace(r.sample_id, std::array<const std::vector<double>*, 3>{});
    if (fresh) order.push_back(r.sample_id);
    it->second[static_cast<std::size_t>(r.label)] = &r.vector;
  }
  AlignmentStats s;
  std::size_t used = 0;
  for (const auto& id : order) {
    const auto& t = triples.at(id);
    if (!t[0] || !t[1] || !t[2]) throw std::invalid_argument("alignment_stats: incomplete triple for sample " + id);
    if (detail::norm(*t[0]) == 0.0 || detail::norm(*t[1]) == 0.0 || detail::norm(*t[2]) == 0.0) {
      ++s.excluded;
      continue;
    }
    s.img_chosen_cos += cosine_similarity(*t[0], *t[1]);
    s.chosen_rejected_cos += cosine_similarity(*t[1], *t[2]);
    ++used;
  }
  if (used > 0) {
    s.img_chosen_cos /= static_cast<double>(used);
    s.chosen_rejected_cos /= static_cast<double>(used);
  }
  s.gap = s.img_chosen_cos - s.chosen_rejected_cos;
  return s;
}

}  // namespace chip
