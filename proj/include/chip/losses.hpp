// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chip/config.hpp>
#include <chip/model.hpp>
#include <chip/tensor.hpp>

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chip {

// true = token belongs to a changed segment.
using SegmentMask = std::vector<bool>;

// Per-token log-probabilities for the forward passes one sample needs.
// Reference tensors are untracked constants.
struct LogProbBundle {
  Tensor policy_chosen, ref_chosen;
  Tensor policy_rejected, ref_rejected;
  std::optional<Tensor> policy_chosen_img_rej, ref_chosen_img_rej;
  TokenSequence chosen_tokens, rejected_tokens;
  SegmentMask chosen_mask, rejected_mask;
};

struct LossBreakdown {
  Tensor loss_response, loss_segment, loss_token, loss_visual, total;
  double reward_margin_text = 0.0;
  double reward_margin_visual = 0.0;
  // Value of beta * SeqKL on the chosen side, the quantity held by stop-gradient.
  double token_sg_value = 0.0;
};

// Optional override for the stop-gradient argument. Finite-difference probes
// pin it to its unperturbed value so they measure the same surrogate that
// backward differentiates.
struct LossOptions {
  std::optional<double> frozen_chosen_seqkl;
};

namespace detail {

inline void require_rows(const Tensor& lp, std::size_t n, const char* what) {
  if (lp.rank() != 2 || lp.dim(0) != n) {
    throw shape_error(std::string(what) + ": log-prob rows " + shape_str(lp.shape()) + " do not match " +
                      std::to_string(n) + " tokens");
  }
}

inline const Tensor& require_field(const std::optional<Tensor>& t, const char* name) {
  if (!t) throw std::invalid_argument(std::string("bundle is missing ") + name);
  return *t;
}

}  // namespace detail

// log pi(y|x,m) = sum_i log p(y_i | x, m, y_<i).
inline Tensor response_log_score(const Tensor& logprobs, std::span<const TokenId> tokens) {
  detail::require_rows(logprobs, tokens.size(), "response_log_score");
  return sum(gather_log_prob(logprobs, tokens));
}

// (1/C) * (sum_all log p + gamma_seg * sum_changed log p), C = |y| + gamma_seg * |y_c|.
inline Tensor segment_log_score(const Tensor& logprobs, std::span<const TokenId> tokens, const SegmentMask& mask,
                                double gamma_seg) {
  detail::require_rows(logprobs, tokens.size(), "segment_log_score");
  if (mask.size() != tokens.size()) throw shape_error("segment_log_score: mask length differs from response length");
  std::size_t changed = 0;
  for (bool m : mask) changed += m ? 1 : 0;
  const double c = static_cast<double>(tokens.size()) + gamma_seg * static_cast<double>(changed);
  if (c == 0.0) throw std::invalid_argument("segment_log_score: normalizer is zero (empty response)");
  std::vector<double> weights(tokens.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = (1.0 + (mask[i] ? gamma_seg : 0.0)) / c;
  return sum(mul(gather_log_prob(logprobs, tokens), Tensor::vector(std::move(weights))));
}

// Pre-sigmoid response-level margin beta * (Delta_w - Delta_l).
inline Tensor text_margin(const LogProbBundle& b, double beta) {
  Tensor dw = sub(response_log_score(b.policy_chosen, b.chosen_tokens), response_log_score(b.ref_chosen, b.chosen_tokens));
  Tensor dl = sub(response_log_score(b.policy_rejected, b.rejected_tokens),
                  response_log_score(b.ref_rejected, b.rejected_tokens));
  return scale(sub(dw, dl), beta);
}

// Pre-sigmoid visual margin beta * (Delta(y_w|m_w) - Delta(y_w|m_l)).
inline Tensor visual_margin(const LogProbBundle& b, double beta) {
  const Tensor& pr = detail::require_field(b.policy_chosen_img_rej, "policy_chosen_img_rej");
  const Tensor& rr = detail::require_field(b.ref_chosen_img_rej, "ref_chosen_img_rej");
  Tensor good = sub(response_log_score(b.policy_chosen, b.chosen_tokens), response_log_score(b.ref_chosen, b.chosen_tokens));
  Tensor bad = sub(response_log_score(pr, b.chosen_tokens), response_log_score(rr, b.chosen_tokens));
  return scale(sub(good, bad), beta);
}

inline Tensor dpo_response_loss(const LogProbBundle& b, double beta) { return neg(log_sigmoid(text_margin(b, beta))); }

inline Tensor segment_margin(const LogProbBundle& b, double beta, double gamma_seg) {
  Tensor dw = sub(segment_log_score(b.policy_chosen, b.chosen_tokens, b.chosen_mask, gamma_seg),
                  segment_log_score(b.ref_chosen, b.chosen_tokens, b.chosen_mask, gamma_seg));
  Tensor dl = sub(segment_log_score(b.policy_rejected, b.rejected_tokens, b.rejected_mask, gamma_seg),
                  segment_log_score(b.ref_rejected, b.rejected_tokens, b.rejected_mask, gamma_seg));
  return scale(sub(dw, dl), beta);
}

inline Tensor dpo_segment_loss(const LogProbBundle& b, double beta, double gamma_seg) {
  return neg(log_sigmoid(segment_margin(b, beta, gamma_seg)));
}

// sum_t KL(ref_t || policy_t) over [T x vocab] log-prob rows.
inline Tensor seq_kl(const Tensor& ref_logprob_rows, const Tensor& policy_logprob_rows) {
  return sum(kl_divergence_rows(ref_logprob_rows, policy_logprob_rows));
}

inline Tensor token_po_loss(const LogProbBundle& b, double beta, TokenVariant variant, double alpha_tdpo,
                            const LossOptions& opts = {}) {
  Tensor kl_w = scale(seq_kl(b.ref_chosen, b.policy_chosen), beta);
  Tensor kl_l = scale(seq_kl(b.ref_rejected, b.policy_rejected), beta);
  Tensor held = opts.frozen_chosen_seqkl ? Tensor::scalar(*opts.frozen_chosen_seqkl) : stop_gradient(kl_w);
  if (variant == TokenVariant::additive) return sub(held, kl_l);
  Tensor arg = sub(text_margin(b, beta), scale(sub(kl_l, held), alpha_tdpo));
  return neg(log_sigmoid(arg));
}

inline Tensor visual_dpo_loss(const LogProbBundle& b, double beta) { return neg(log_sigmoid(visual_margin(b, beta))); }

inline Tensor cmdpo_loss(const LogProbBundle& b, double beta) {
  return add(visual_dpo_loss(b, beta), dpo_response_loss(b, beta));
}

// (text margin, visual margin); log Z cancels in both.
inline std::pair<double, double> implicit_reward_margin(const LogProbBundle& b, double beta) {
  return {text_margin(b, beta).item(), visual_margin(b, beta).item()};
}

// total = visual + response + lambda * segment + gamma * token.
inline Tensor weighted_total(const Tensor& visual, const Tensor& response, const Tensor& segment, const Tensor& token,
                             double lambda_seg, double gamma_tok) {
  return add(add(add(visual, response), scale(segment, lambda_seg)), scale(token, gamma_tok));
}

inline LossBreakdown chip_loss(const LogProbBundle& b, const ChipConfig& config, const LossOptions& opts = {}) {
  config.validate();
  LossBreakdown out;
  Tensor tm = text_margin(b, config.beta);
  Tensor vm = visual_margin(b, config.beta);
  out.loss_response = neg(log_sigmoid(tm));
  out.loss_visual = neg(log_sigmoid(vm));
  out.loss_segment = dpo_segment_loss(b, config.beta, config.gamma_seg);
  out.loss_token = token_po_loss(b, config.beta, config.token_variant, config.alpha_tdpo, opts);
  out.total = weighted_total(out.loss_visual, out.loss_response, out.loss_segment, out.loss_token, config.lambda_seg,
                             config.gamma_tok);
  out.reward_margin_text = tm.item();
  out.reward_margin_visual = vm.item();
  out.token_sg_value = config.beta * seq_kl(b.ref_chosen, b.policy_chosen).item();
  return out;
}

// The scalar a given objective minimizes.
inline Tensor objective_loss(const LossBreakdown& lb, const ChipConfig& config) {
  switch (config.objective) {
    case Objective::dpo:
      return lb.loss_response;
    case Objective::cmdpo:
      return add(lb.loss_visual, lb.loss_response);
    case Objective::hdpo:
      return add(add(lb.loss_response, scale(lb.loss_segment, config.lambda_seg)), scale(lb.loss_token, config.gamma_tok));
    case Objective::chip:
      return lb.total;
  }
  throw std::logic_error("unknown objective");
}

// Mean over samples of every component; total re-assembled from the means.
inline LossBreakdown mean_breakdown(std::span<const LossBreakdown> parts, const ChipConfig& config) {
  if (parts.empty()) throw std::invalid_argument("mean_breakdown: no samples");
  const double inv = 1.0 / static_cast<double>(parts.size());
  auto avg = [&](auto member) {
    std::vector<Tensor> xs;
    for (const auto& p : parts) xs.push_back(p.*member);
    return scale(add_n(xs), inv);
  };
  LossBreakdown out;
  out.loss_response = avg(&LossBreakdown::loss_response);
  out.loss_segment = avg(&LossBreakdown::loss_segment);
  out.loss_token = avg(&LossBreakdown::loss_token);
  out.loss_visual = avg(&LossBreakdown::loss_visual);
  out.total = weighted_total(out.loss_visual, out.loss_response, out.loss_segment, out.loss_token, config.lambda_seg,
                             config.gamma_tok);
  for (const auto& p : parts) {
    out.reward_margin_text += p.reward_margin_text * inv;
    out.reward_margin_visual += p.reward_margin_visual * inv;
    out.token_sg_value += p.token_sg_value * inv;
  }
  return out;
}

}  // namespace chip
