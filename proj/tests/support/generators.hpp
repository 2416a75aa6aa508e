#pragma once

// Hand-rolled random case generators shared by the property tests and the
// acceptance binary. Each case carries its own description for failure output.

#include <sstream>
#include <string>
#include <vector>

#include "calign/alignment.hpp"
#include "calign/cav.hpp"
#include "support/oracles.hpp"

namespace gen {

using namespace calign;

inline int between(Rng& rng, int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(hi - lo + 1))); }
inline double between(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// A scalar loss of several matrix inputs, ready for a finite-difference check.
struct GradCase {
  std::string description;
  std::vector<Mat> inputs;
  std::function<ad::Var(const std::vector<ad::Var>&)> loss;
};

/// Image-level loss on N pairs of unnormalized d-vectors (normalized inside).
inline GradCase image_level_case(Rng& rng) {
  const int n = between(rng, 1, 5);
  const int d = between(rng, 2, 8);
  const double tau = between(rng, 0.1, 1.0);
  const auto reduction = uniform01(rng) < 0.5 ? ad::Reduction::Mean : ad::Reduction::Sum;
  std::ostringstream s;
  s << "ila n=" << n << " d=" << d << " tau1=" << tau << (reduction == ad::Reduction::Mean ? " mean" : " sum");
  return {s.str(),
          {oracle::random_matrix(n, d, rng), oracle::random_matrix(n, d, rng)},
          [=](const std::vector<ad::Var>& x) {
            return ila_loss(ad::l2_normalize_rows(x[0]), ad::l2_normalize_rows(x[1]), tau, reduction).loss;
          }};
}

/// Token-level loss: N images with R regions, N documents of 1..3 tokens.
inline GradCase token_level_case(Rng& rng) {
  const int n = between(rng, 1, 3);
  const int r = between(rng, 2, 5);
  const int d = between(rng, 2, 6);
  const double tau2 = between(rng, 0.1, 0.6);
  const double tau3 = between(rng, 0.05, 0.5);
  std::vector<Mat> inputs;
  std::ostringstream s;
  s << "tla n=" << n << " R=" << r << " d=" << d << " tau2=" << tau2 << " tau3=" << tau3 << " W=";
  for (int i = 0; i < n; ++i) inputs.push_back(oracle::random_matrix(r, d, rng));
  for (int i = 0; i < n; ++i) {
    const int w = between(rng, 1, 3);
    s << w << (i + 1 < n ? "," : "");
    inputs.push_back(oracle::random_matrix(w, d, rng));
  }
  return {s.str(), inputs, [=](const std::vector<ad::Var>& x) {
            std::vector<VisualFeatures> v(static_cast<std::size_t>(n));
            std::vector<TextFeatures> t(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
              v[static_cast<std::size_t>(i)].regions = ad::l2_normalize_rows(x[static_cast<std::size_t>(i)]);
              t[static_cast<std::size_t>(i)].tokens = ad::l2_normalize_rows(x[static_cast<std::size_t>(n + i)]);
            }
            return tla_loss(v, t, tau2, tau3).loss;
          }};
}

/// Concept-level loss on grounded token features against a bank fitted to
/// random labelled data. Inputs stay small so scores sit away from the clip.
inline GradCase concept_level_case(Rng& rng) {
  const int n = between(rng, 1, 3);
  const int nc = between(rng, 1, 3);
  const int d = between(rng, 2, 6);
  CAVBank bank;
  std::vector<std::string> names;
  for (int k = 0; k < nc; ++k) names.push_back("c" + std::to_string(k));
  do {
    const Mat feats = oracle::random_matrix(24, d, rng);
    std::vector<std::vector<int>> y;
    for (int i = 0; i < 24; ++i) {
      std::vector<int> row;
      for (int k = 0; k < nc; ++k) row.push_back(feats(i, k % d) + 0.3 * feats(i, (k + 1) % d) > 0);
      y.push_back(row);
    }
    bank = fit_cavs(feats, y, names);
  } while (bank.fitted_count() == 0);

  std::vector<ConceptDocument> docs;
  std::vector<std::vector<int>> labels;
  std::vector<Mat> inputs;
  std::ostringstream s;
  s << "cla n=" << n << " Nc=" << nc << " d=" << d << " fitted=" << bank.fitted_count();
  for (int i = 0; i < n; ++i) {
    ConceptDocument doc;
    const int w = between(rng, 1, 4);
    for (int t = 0; t < w; ++t) {
      doc.token_ids.push_back(t);
      doc.token_to_concept.push_back(between(rng, -1, nc - 1));
    }
    std::vector<int> l;
    for (int k = 0; k < nc; ++k) l.push_back(uniform01(rng) < 0.5);
    docs.push_back(doc);
    labels.push_back(l);
    inputs.push_back(oracle::random_matrix(w, d, rng, 0.05));
  }
  return {s.str(), inputs, [=](const std::vector<ad::Var>& g) { return cla_loss(g, docs, labels, bank).loss; }};
}

/// Separable data: labels are the sign of a random hyperplane, points nearer
/// than `margin` to it are pushed out.
inline std::pair<Mat, std::vector<int>> separable(Rng& rng, int n, int d, double margin) {
  RowVec w = oracle::random_matrix(1, d, rng).row(0);
  w /= w.norm();
  const double b = between(rng, -0.3, 0.3);
  Mat x = oracle::random_matrix(n, d, rng);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    const double f = x.row(i).dot(w) + b;
    const double want = pos ? std::max(f, margin) : std::min(f, -margin);
    x.row(i) += (want - f) * w;
    y[static_cast<std::size_t>(i)] = pos;
  }
  return {x, y};
}

}  // namespace gen
