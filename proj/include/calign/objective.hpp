#pragma once

#include <span>
#include <vector>

#include "calign/alignment.hpp"
#include "calign/cav.hpp"
#include "calign/datasets.hpp"
#include "calign/encoders.hpp"

namespace calign {

struct AlignmentLossBreakdown {
  ad::Var ila;
  ad::Var tla;
  ad::Var cla;
  ad::Var total;
  bool cla_skipped = false;  // no fitted concepts in the bank
};

/// Weighted stage-1 objective lambda1 * ILA + lambda2 * TLA + lambda3 * CLA.
/// Components with zero weight are not evaluated (reported as 0) unless
/// `evaluate_all` is set.
inline AlignmentLossBreakdown stage1_loss(std::span<const VisualFeatures> images,
                                          std::span<const TextFeatures> texts,
                                          std::span<const ConceptDocument> docs,
                                          const std::vector<std::vector<int>>& labels, const CAVBank& bank,
                                          const AlignmentConfig& cfg, bool evaluate_all = false) {
  cfg.validate();
  const auto n = images.size();
  if (n == 0 || texts.size() != n || docs.size() != n || labels.size() != n) {
    throw NumericError("stage1_loss: batch mismatch");
  }
  AlignmentLossBreakdown out;
  out.ila = ad::Var::scalar(0.0);
  out.tla = ad::Var::scalar(0.0);
  out.cla = ad::Var::scalar(0.0);

  if (cfg.lambda1 > 0 || evaluate_all) {
    std::vector<ad::Var> fi, ai;
    for (std::size_t i = 0; i < n; ++i) {
      fi.push_back(images[i].global);
      ai.push_back(texts[i].global);
    }
    out.ila = ila_loss(ad::concat_rows(fi), ad::concat_rows(ai), cfg.tau1, cfg.reduction).loss;
  }
  if (cfg.lambda2 > 0 || evaluate_all) {
    out.tla = tla_loss(images, texts, cfg.tau2, cfg.tau3, cfg.reduction).loss;
  }
  if (cfg.lambda3 > 0 || evaluate_all) {
    std::vector<ad::Var> grounded;
    for (std::size_t i = 0; i < n; ++i) {
      grounded.push_back(cross_attention(images[i].regions, texts[i].tokens, cfg.tau2).grounded);
    }
    auto cla = cla_loss(grounded, docs, labels, bank, cfg.reduction);
    out.cla = cla.loss;
    out.cla_skipped = cla.no_fitted_concepts;
  }
  out.total = ad::add(ad::add(ad::scale(out.ila, cfg.lambda1), ad::scale(out.tla, cfg.lambda2)),
                      ad::scale(out.cla, cfg.lambda3));
  return out;
}

}  // namespace calign
