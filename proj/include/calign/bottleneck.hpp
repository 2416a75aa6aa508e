#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calign/alignment.hpp"
#include "calign/autograd.hpp"
#include "calign/datasets.hpp"
#include "calign/encoders.hpp"
#include "calign/error.hpp"
#include "calign/optim.hpp"
#include "calign/rng.hpp"

namespace calign {

struct HeadTrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 1e-4;
  double beta = 1.0;  // weight of the diagnosis term
  std::uint64_t seed = 0;
};

/// Per-feature standardization fitted on the training features. Folded in
/// front of the first affine layer of each head.
struct FeatureScaler {
  RowVec mean;
  RowVec inv_std;

  static FeatureScaler fit(const Mat& x) {
    FeatureScaler s;
    s.mean = x.colwise().mean();
    RowVec var = (x.rowwise() - s.mean).cwiseAbs2().colwise().mean();
    s.inv_std = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0; });
    return s;
  }

  Mat apply(const Mat& x) const {
    return (x.rowwise() - mean).array().rowwise() * inv_std.array();
  }
};

/// Concept head f_c (affine + logistic) followed by the linear diagnosis
/// head f_d, which reads post-logistic concept scores.
struct BottleneckHeads {
  FeatureScaler scaler;
  Mat concept_w;  // d_v x N_c
  RowVec concept_b;
  Mat diag_w;     // N_c x N_y
  RowVec diag_b;
  double beta = 1.0;

  int num_concepts() const { return static_cast<int>(concept_w.cols()); }
  int num_classes() const { return static_cast<int>(diag_w.cols()); }

  Mat concept_scores(const Mat& features) const {
    Mat logits = (scaler.apply(features) * concept_w).rowwise() + concept_b;
    return logits.unaryExpr([](double v) { return ad::logistic(v); });
  }

  Mat diagnosis_logits(const Mat& scores) const { return (scores * diag_w).rowwise() + diag_b; }
};

/// Diagnosis straight from encoder features, without the concept layer.
struct DirectHead {
  FeatureScaler scaler;
  Mat w;  // d_v x N_y
  RowVec b;

  int num_classes() const { return static_cast<int>(w.cols()); }
  Mat logits(const Mat& features) const { return (scaler.apply(features) * w).rowwise() + b; }
};

/// Replacement concept scores applied before the diagnosis layer.
struct InterventionRequest {
  std::map<int, double> overrides;

  void validate(int num_concepts) const {
    for (const auto& [k, v] : overrides) {
      if (k < 0 || k >= num_concepts) {
        throw RequestError("intervention concept index " + std::to_string(k) + " out of range [0, " +
                           std::to_string(num_concepts) + ")");
      }
      if (!(v >= 0.0 && v <= 1.0)) {
        throw RequestError("intervention value for concept " + std::to_string(k) + " must be in [0,1]");
      }
    }
  }

  void apply(RowVec& scores) const {
    for (const auto& [k, v] : overrides) scores(k) = v;
  }
};

struct Prediction {
  RowVec concept_scores;
  RowVec logits;
  int predicted_class = 0;
};

inline int argmax(const RowVec& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

/// Encoder global features for every sample, n x d_v.
inline Mat extract_features(const ImageEncoder& encoder, std::span<const ImageSample> samples) {
  Mat out(static_cast<Eigen::Index>(samples.size()), encoder.config().d_v);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = encoder.global_features(samples[i].image);
  }
  return out;
}

namespace detail {
inline Mat label_matrix(std::span<const ImageSample> samples, int nc) {
  Mat m(static_cast<Eigen::Index>(samples.size()), nc);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (int k = 0; k < nc; ++k) m(static_cast<Eigen::Index>(i), k) = samples[i].concepts.at(static_cast<std::size_t>(k));
  return m;
}

template <class Step>
void run_minibatches(std::size_t n, const HeadTrainConfig& cfg, Step&& step) {
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("invalid head training schedule");
  Rng rng(derive_seed(cfg.seed, "heads"));
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (int e = 0; e < cfg.epochs; ++e) {
    shuffle(order, rng);
    for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(n, s + static_cast<std::size_t>(cfg.batch_size));
      step(std::vector<Eigen::Index>(order.begin() + static_cast<std::ptrdiff_t>(s),
                                     order.begin() + static_cast<std::ptrdiff_t>(end)));
    }
  }
}

inline Mat gather(const Mat& m, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}
}  // namespace detail

/// Joint bottleneck training on precomputed frozen features:
///   sum_i [ BCE(f_c(v_i), C_i) + beta * CE(f_d(f_c(v_i)), y_i) ]
/// averaged per mini-batch.
inline BottleneckHeads train_bottleneck(const Mat& features, const Mat& concept_labels,
                                        const std::vector<int>& diagnosis, int num_classes,
                                        const HeadTrainConfig& cfg) {
  const auto n = features.rows();
  if (n == 0) throw ConfigError("empty training set");
  if (cfg.beta < 0) throw ConfigError("beta must be >= 0");
  if (concept_labels.rows() != n || static_cast<Eigen::Index>(diagnosis.size()) != n) {
    throw ConfigError("feature/label count mismatch");
  }
  const auto dv = features.cols();
  const auto nc = concept_labels.cols();
  BottleneckHeads heads;
  heads.beta = cfg.beta;
  heads.scaler = FeatureScaler::fit(features);
  const Mat x = heads.scaler.apply(features);

  Rng rng(derive_seed(cfg.seed, "bottleneck-init"));
  ParameterSet p;
  auto wc = p.add("fc.w", detail::random_normal(dv, nc, 0.01, rng));
  auto bc = p.add("fc.b", Mat::Zero(1, nc));
  auto wd = p.add("fd.w", detail::random_normal(nc, num_classes, 0.01, rng));
  auto bd = p.add("fd.b", Mat::Zero(1, num_classes));
  Adam opt({wc, bc, wd, bd}, {cfg.learning_rate});
  const Mat ones = Mat::Ones(1, nc);

  detail::run_minibatches(static_cast<std::size_t>(n), cfg, [&](const std::vector<Eigen::Index>& idx) {
    const auto b = static_cast<double>(idx.size());
    ad::Var xb(detail::gather(x, idx));
    Mat cb = detail::gather(concept_labels, idx);
    std::vector<int> yb;
    for (auto i : idx) yb.push_back(diagnosis[static_cast<std::size_t>(i)]);
    auto logits_c = ad::add_row(ad::matmul(xb, wc), bc);
    auto concept_loss = ad::scale(ad::bce_with_logits_sum(logits_c, cb, Mat::Ones(cb.rows(), cb.cols())), 1.0 / b);
    ad::Var loss = concept_loss;
    if (cfg.beta > 0) {
      auto logits_d = ad::add_row(ad::matmul(ad::sigmoid(logits_c), wd), bd);
      loss = ad::add(loss, ad::scale(ad::cross_entropy_rows(logits_d, yb), cfg.beta));
    }
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
  });

  heads.concept_w = wc.value();
  heads.concept_b = bc.value().row(0);
  heads.diag_w = wd.value();
  heads.diag_b = bd.value().row(0);
  return heads;
}

inline DirectHead train_direct(const Mat& features, const std::vector<int>& diagnosis, int num_classes,
                               const HeadTrainConfig& cfg) {
  const auto n = features.rows();
  if (n == 0) throw ConfigError("empty training set");
  if (static_cast<Eigen::Index>(diagnosis.size()) != n) throw ConfigError("feature/label count mismatch");
  DirectHead head;
  head.scaler = FeatureScaler::fit(features);
  const Mat x = head.scaler.apply(features);
  Rng rng(derive_seed(cfg.seed, "direct-init"));
  ParameterSet p;
  auto w = p.add("direct.w", detail::random_normal(features.cols(), num_classes, 0.01, rng));
  auto b = p.add("direct.b", Mat::Zero(1, num_classes));
  Adam opt({w, b}, {cfg.learning_rate});
  detail::run_minibatches(static_cast<std::size_t>(n), cfg, [&](const std::vector<Eigen::Index>& idx) {
    ad::Var xb(detail::gather(x, idx));
    std::vector<int> yb;
    for (auto i : idx) yb.push_back(diagnosis[static_cast<std::size_t>(i)]);
    auto loss = ad::cross_entropy_rows(ad::add_row(ad::matmul(xb, w), b), yb);
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
  });
  head.w = w.value();
  head.b = b.value().row(0);
  return head;
}

/// Expert edit of the diagnosis layer: sets the weight linking concept
/// `k` to class `cls`.
inline void override_diagnosis_weight(BottleneckHeads& heads, int k, int cls, double weight) {
  if (k < 0 || k >= heads.num_concepts() || cls < 0 || cls >= heads.num_classes()) {
    throw RequestError("weight override (" + std::to_string(k) + ", " + std::to_string(cls) + ") out of range");
  }
  if (!std::isfinite(weight)) throw RequestError("weight override must be finite");
  heads.diag_w(k, cls) = weight;
}

inline Prediction predict_from_features(const BottleneckHeads& heads, const RowVec& features,
                                        const InterventionRequest* intervention = nullptr) {
  Prediction p;
  p.concept_scores = heads.concept_scores(features).row(0);
  if (intervention) {
    intervention->validate(heads.num_concepts());
    intervention->apply(p.concept_scores);
  }
  p.logits = heads.diagnosis_logits(p.concept_scores).row(0);
  p.predicted_class = argmax(p.logits);
  return p;
}

inline Prediction predict(const BottleneckHeads& heads, const ImageEncoder& encoder, const Image& image,
                          const std::optional<InterventionRequest>& intervention = std::nullopt) {
  return predict_from_features(heads, encoder.global_features(image),
                               intervention ? &*intervention : nullptr);
}

// ---------------------------------------------------------------------------
// Explanations

struct ConceptExplanation {
  std::string name;
  double score = 0.0;
  double term = 0.0;  // score * weight for the predicted class
  double contribution_pct = 0.0;
  bool positive_influence = true;
  Mat localization;  // grid_h x grid_w, max 1
};

struct Explanation {
  std::string id;
  int predicted_class = 0;
  std::string class_name;
  std::vector<ConceptExplanation> concepts;
  std::string sentence;
};

/// Contribution percentages: softmax over concepts of score_k * w(k, cls).
inline RowVec contribution_percentages(const RowVec& scores, const Mat& diag_w, int cls) {
  RowVec terms = scores.cwiseProduct(diag_w.col(cls).transpose());
  RowVec e = (terms.array() - terms.maxCoeff()).exp();
  return 100.0 * e / e.sum();
}

/// Token-to-region attention of concept k's phrase, averaged over its tokens
/// and max-normalized, as a grid_h x grid_w map.
inline Mat concept_localization(const ad::Var& regions, const TextEncoder& text, const ConceptVocabulary& vocab,
                                int k, int grid_h, int grid_w, double tau2) {
  ad::NoGradGuard guard;
  auto tokens = text.encode(phrase_document(vocab, k)).tokens;
  auto att = cross_attention(regions, tokens, tau2);
  RowVec mean = att.weights.value().colwise().mean();
  const double mx = mean.maxCoeff();
  if (mx > 0) mean /= mx;
  Mat grid(grid_h, grid_w);
  for (int r = 0; r < grid_h * grid_w; ++r) grid(r / grid_w, r % grid_w) = mean(r);
  return grid;
}

namespace detail {
inline std::string format_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", v);
  return buf;
}
}  // namespace detail

/// Positive-influence concepts are those whose term is at least the mean
/// term; they are listed after "because of", the rest after "despite".
inline std::string explanation_sentence(const std::string& class_name,
                                        const std::vector<ConceptExplanation>& concepts) {
  std::vector<const ConceptExplanation*> pos;
  std::vector<const ConceptExplanation*> neg;
  for (const auto& c : concepts) (c.positive_influence ? pos : neg).push_back(&c);
  auto by_pct = [](const auto* a, const auto* b) { return a->contribution_pct > b->contribution_pct; };
  std::stable_sort(pos.begin(), pos.end(), by_pct);
  std::stable_sort(neg.begin(), neg.end(), by_pct);
  std::string s = "Diagnosis " + class_name;
  if (!pos.empty()) {
    s += " because of ";
    for (std::size_t i = 0; i < pos.size(); ++i) {
      s += (i ? ", " : "") + pos[i]->name + " (" + detail::format_pct(pos[i]->contribution_pct) + ")";
    }
  }
  if (!neg.empty()) {
    s += ", despite ";
    for (std::size_t i = 0; i < neg.size(); ++i) s += (i ? ", " : "") + neg[i]->name;
  }
  return s + ".";
}

inline Explanation explain(const BottleneckHeads& heads, const ImageEncoder& encoder, const TextEncoder& text,
                           const ConceptVocabulary& vocab, const std::vector<std::string>& class_names,
                           const ImageSample& sample, double tau2) {
  ad::NoGradGuard guard;
  auto features = encoder.encode(sample.image);
  auto pred = predict_from_features(heads, features.global_raw.value().row(0));
  Explanation ex;
  ex.id = sample.id;
  ex.predicted_class = pred.predicted_class;
  ex.class_name = class_names.at(static_cast<std::size_t>(pred.predicted_class));
  const RowVec pct = contribution_percentages(pred.concept_scores, heads.diag_w, pred.predicted_class);
  const RowVec terms = pred.concept_scores.cwiseProduct(heads.diag_w.col(pred.predicted_class).transpose());
  const double mean_term = terms.mean();
  const auto& cfg = encoder.config();
  for (int k = 0; k < heads.num_concepts(); ++k) {
    ConceptExplanation c;
    c.name = vocab.entry(k).phrase;
    c.score = pred.concept_scores(k);
    c.term = terms(k);
    c.contribution_pct = pct(k);
    c.positive_influence = terms(k) >= mean_term;
    c.localization = concept_localization(features.regions, text, vocab, k, cfg.grid_h, cfg.grid_w, tau2);
    ex.concepts.push_back(std::move(c));
  }
  ex.sentence = explanation_sentence(ex.class_name, ex.concepts);
  return ex;
}

/// Nearest-neighbour upsampling of a localization grid to image size.
inline Image upsample_grid(const Mat& grid, int height, int width) {
  Image out(height, width, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out.at(y, x, 0) = grid(y * grid.rows() / height, x * grid.cols() / width);
  return out;
}

/// Blends a red heat map over the image.
inline Image heatmap_overlay(const Image& image, const Mat& grid, double alpha = 0.5) {
  const auto heat = upsample_grid(grid, image.height, image.width);
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double h = heat.at(y, x, 0) * alpha;
      for (int c = 0; c < image.channels; ++c) {
        const double target = c == 0 ? 1.0 : 0.0;
        out.at(y, x, c) = (1 - h) * image.at(y, x, c) + h * target;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Faithfulness probes

inline double accuracy_from_logits(const Mat& logits, std::span<const int> labels) {
  if (logits.rows() == 0) return 0.0;
  int hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    hits += argmax(logits.row(i)) == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

/// For each threshold, zero every concept score above it (per image, per
/// concept) and report diagnosis accuracy.
inline std::vector<std::pair<double, double>> threshold_zero_curve(const BottleneckHeads& heads,
                                                                   const Mat& features,
                                                                   std::span<const int> labels,
                                                                   std::span<const double> thresholds) {
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (thresholds[i] > thresholds[i - 1]) throw RequestError("thresholds must be sorted descending");
  }
  const Mat scores = heads.concept_scores(features);
  std::vector<std::pair<double, double>> curve;
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw RequestError("thresholds must lie in [0,1]");
    Mat s = (scores.array() > t).select(0.0, scores);
    curve.emplace_back(t, accuracy_from_logits(heads.diagnosis_logits(s), labels));
  }
  return curve;
}

}  // namespace calign
