#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/encoders.hpp"
#include "calign/error.hpp"

namespace calign {

struct AlignmentConfig {
  double tau1 = 0.25;  // image-level contrastive temperature
  double tau2 = 0.2;   // cross-attention and token-level contrastive temperature
  double tau3 = 0.1;   // token-wise matching temperature
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  ad::Reduction reduction = ad::Reduction::Mean;

  void validate() const {
    if (!(tau1 > 0 && tau2 > 0 && tau3 > 0)) throw ConfigError("temperatures must be > 0");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss weights must be >= 0");
  }
};

struct AttentionMap {
  ad::Var weights;   // W x R, rows sum to one
  ad::Var grounded;  // W x d, attention-weighted region features per token
};

namespace detail {
inline void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite input");
}

/// Mean of the row-wise and column-wise softmax cross-entropies of a square
/// logit matrix whose diagonal holds the matched pairs.
inline ad::Var symmetric_contrastive(const ad::Var& logits, ad::Reduction reduction) {
  const auto n = logits.rows();
  std::vector<int> diag(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
  auto rows = ad::cross_entropy_rows(logits, diag, reduction);
  auto cols = ad::cross_entropy_rows(ad::transpose(logits), diag, reduction);
  return ad::scale(ad::add(rows, cols), 0.5);
}
}  // namespace detail

struct IlaResult {
  ad::Var loss;
  Mat similarity;  // s_ij = <F_I_i, A_I_j>
};

/// Image-level contrastive loss between N unit image embeddings and their N
/// paired unit concept embeddings (row i matches row i).
inline IlaResult ila_loss(const ad::Var& image_global, const ad::Var& text_global, double tau1,
                          ad::Reduction reduction = ad::Reduction::Mean) {
  if (image_global.rows() < 1 || image_global.rows() != text_global.rows() ||
      image_global.cols() != text_global.cols()) {
    throw NumericError("ila_loss: batches must be non-empty and equally shaped");
  }
  detail::require_finite(image_global.value(), "ila_loss");
  detail::require_finite(text_global.value(), "ila_loss");
  auto sim = ad::matmul_nt(image_global, text_global);
  IlaResult out{detail::symmetric_contrastive(ad::scale(sim, 1.0 / tau1), reduction), sim.value()};
  return out;
}

/// Tokens attend over regions: weights = softmax over regions of
/// <token, region> / tau2, grounded = weights * regions.
inline AttentionMap cross_attention(const ad::Var& regions, const ad::Var& tokens, double tau2) {
  if (regions.cols() != tokens.cols()) throw NumericError("cross_attention: dimension mismatch");
  detail::require_finite(regions.value(), "cross_attention");
  detail::require_finite(tokens.value(), "cross_attention");
  AttentionMap m;
  m.weights = ad::softmax_rows(ad::scale(ad::matmul_nt(tokens, regions), 1.0 / tau2));
  m.grounded = ad::matmul(m.weights, regions);
  return m;
}

/// Soft maximum of per-token similarities: tau3 * log sum_i exp(<g_i, a_i>/tau3).
inline ad::Var token_match(const ad::Var& grounded, const ad::Var& tokens, double tau3) {
  if (grounded.rows() < 1) throw NumericError("token_match: need at least one token");
  auto sims = ad::row_dot(grounded, tokens);
  return ad::scale(ad::logsumexp_all(ad::scale(sims, 1.0 / tau3)), tau3);
}

struct TlaResult {
  ad::Var loss;
  Mat match;  // match(i, j) = G(image i attended by document j, document j)
};

/// Token-level contrastive loss. Every image is attended by every document
/// in the batch; the N x N token-wise match scores form the logits
/// (temperature tau2) of a symmetric contrastive loss.
inline TlaResult tla_loss(std::span<const VisualFeatures> images, std::span<const TextFeatures> docs,
                          double tau2, double tau3, ad::Reduction reduction = ad::Reduction::Mean) {
  const auto n = static_cast<Eigen::Index>(images.size());
  if (n < 1 || images.size() != docs.size()) throw NumericError("tla_loss: batch sizes differ or empty");
  std::vector<ad::Var> scores;
  scores.reserve(static_cast<std::size_t>(n * n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& doc = docs[static_cast<std::size_t>(j)];
      auto att = cross_attention(images[static_cast<std::size_t>(i)].regions, doc.tokens, tau2);
      scores.push_back(token_match(att.grounded, doc.tokens, tau3));
    }
  }
  auto match = ad::stack_scalars(scores, n, n);
  return {detail::symmetric_contrastive(ad::scale(match, 1.0 / tau2), reduction), match.value()};
}

}  // namespace calign
