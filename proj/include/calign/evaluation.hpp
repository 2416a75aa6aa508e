#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/datasets.hpp"
#include "calign/error.hpp"

namespace calign {

/// Rank-based AUROC with half credit for ties. Undefined (nullopt) unless
/// both classes are present.
inline std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw NumericError("binary_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups.
  double pos_rank_sum = 0.0;
  long n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const long n_neg = static_cast<long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Binary precision/recall F1 of the positive class.
inline double binary_f1(std::span<const int> predicted, std::span<const int> labels) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    tp += predicted[i] && labels[i];
    fp += predicted[i] && !labels[i];
    fn += !predicted[i] && labels[i];
  }
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Scores for one run, in percent. `auc` is empty when undefined.
struct MetricValues {
  std::optional<double> auc;
  double acc = 0.0;
  double f1 = 0.0;
  std::map<std::string, double> per_criterion;
  std::vector<std::optional<double>> per_item_auc;  // per class or per concept
};

/// Diagnosis metrics from class probabilities (rows sum to one): macro
/// one-vs-rest AUROC over classes with a defined AUC, accuracy of the
/// argmax, macro F1.
inline MetricValues diagnosis_metrics(const Mat& probabilities, std::span<const int> labels) {
  const auto n = probabilities.rows();
  const int k = static_cast<int>(probabilities.cols());
  if (static_cast<Eigen::Index>(labels.size()) != n || n == 0) throw NumericError("diagnosis_metrics: bad shapes");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(probabilities.row(i).sum() - 1.0) > 1e-6) {
      throw NumericError("diagnosis_metrics: probability rows must sum to 1");
    }
  }
  MetricValues m;
  std::vector<int> predicted(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index a = 0;
    probabilities.row(i).maxCoeff(&a);
    predicted[static_cast<std::size_t>(i)] = static_cast<int>(a);
  }
  long hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) hits += predicted[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  m.acc = 100.0 * static_cast<double>(hits) / static_cast<double>(n);

  double auc_sum = 0.0;
  int auc_count = 0;
  double f1_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    std::vector<int> p(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = probabilities(i, c);
      y[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == c;
      p[static_cast<std::size_t>(i)] = predicted[static_cast<std::size_t>(i)] == c;
    }
    auto auc = binary_auc(s, y);
    m.per_item_auc.push_back(auc);
    if (auc) {
      auc_sum += *auc;
      ++auc_count;
    }
    f1_sum += binary_f1(p, y);
  }
  if (auc_count > 0) m.auc = 100.0 * auc_sum / auc_count;
  m.f1 = 100.0 * f1_sum / k;
  return m;
}

/// Concept-detection metrics from per-concept scores in [0,1]: macro AUROC
/// over concepts with both labels present, accuracy at threshold 0.5 over all
/// entries, macro binary F1, and per-criterion accuracy (mean of the
/// fine-grained concept accuracies sharing a criterion).
inline MetricValues concept_metrics(const Mat& scores, const Mat& labels, const ConceptVocabulary& vocab,
                                    double threshold = 0.5) {
  const auto n = scores.rows();
  const int nc = static_cast<int>(scores.cols());
  if (labels.rows() != n || labels.cols() != nc || nc != vocab.size() || n == 0) {
    throw NumericError("concept_metrics: bad shapes");
  }
  if ((scores.array() < 0.0).any() || (scores.array() > 1.0).any()) {
    throw NumericError("concept_metrics: scores must lie in [0,1]");
  }
  MetricValues m;
  double auc_sum = 0.0;
  int auc_count = 0;
  double f1_sum = 0.0;
  long hits = 0;
  std::vector<double> concept_acc(static_cast<std::size_t>(nc));
  for (int k = 0; k < nc; ++k) {
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    std::vector<int> p(static_cast<std::size_t>(n));
    long kh = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(i);
      s[u] = scores(i, k);
      y[u] = labels(i, k) > 0.5;
      p[u] = scores(i, k) >= threshold;
      kh += p[u] == y[u];
    }
    hits += kh;
    concept_acc[static_cast<std::size_t>(k)] = 100.0 * static_cast<double>(kh) / static_cast<double>(n);
    auto auc = binary_auc(s, y);
    m.per_item_auc.push_back(auc);
    if (auc) {
      auc_sum += *auc;
      ++auc_count;
    }
    f1_sum += binary_f1(p, y);
  }
  if (auc_count > 0) m.auc = 100.0 * auc_sum / auc_count;
  m.acc = 100.0 * static_cast<double>(hits) / static_cast<double>(n * nc);
  m.f1 = 100.0 * f1_sum / nc;
  for (const auto& crit : vocab.criteria()) {
    double sum = 0.0;
    int count = 0;
    for (int k = 0; k < nc; ++k) {
      if (vocab.entry(k).criterion == crit) {
        sum += concept_acc[static_cast<std::size_t>(k)];
        ++count;
      }
    }
    m.per_criterion[crit] = sum / count;
  }
  return m;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population convention over seeds
  int count = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.count = static_cast<int>(xs.size());
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(v / static_cast<double>(xs.size()));
  return r;
}

/// Seed-aggregated report. AUC aggregates only the seeds where it was defined.
struct MetricReport {
  std::optional<MeanStd> auc;
  MeanStd acc;
  MeanStd f1;
  std::map<std::string, MeanStd> per_criterion;
  std::map<std::string, std::vector<std::pair<double, double>>> curves;
};

inline MetricReport aggregate(std::span<const MetricValues> runs) {
  MetricReport r;
  std::vector<double> auc, acc, f1;
  std::map<std::string, std::vector<double>> crit;
  for (const auto& m : runs) {
    if (m.auc) auc.push_back(*m.auc);
    acc.push_back(m.acc);
    f1.push_back(m.f1);
    for (const auto& [k, v] : m.per_criterion) crit[k].push_back(v);
  }
  if (!auc.empty()) r.auc = mean_std(auc);
  r.acc = mean_std(acc);
  r.f1 = mean_std(f1);
  for (const auto& [k, v] : crit) r.per_criterion[k] = mean_std(v);
  return r;
}

inline Mat softmax(const Mat& logits) { return ad::softmax_rows_value(logits); }

}  // namespace calign
