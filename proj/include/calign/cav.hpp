#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/datasets.hpp"
#include "calign/error.hpp"

namespace calign {

struct CavFitConfig {
  double C = 1.0;         // hinge weight against 0.5 * ||w||^2
  int max_iters = 3000;
  int patience = 200;     // stop when the best objective stalls this long
  double tolerance = 1e-7;
  int min_per_class = 2;
};

struct CavFitMeta {
  bool fitted = false;
  int n_pos = 0;
  int n_neg = 0;
  int sign_violations = 0;    // examples on the wrong side of the boundary
  int margin_violations = 0;  // examples with y * f(x) < 1
  int iterations = 0;
  int epoch = 0;
  double objective = 0.0;
};

/// One concept's linear boundary omega . x + phi = 0.
struct LinearBoundary {
  RowVec omega;
  double phi = 0.0;
  CavFitMeta meta;
};

/// Concept activation vectors: column k of `directions` is the unit normal
/// of concept k's boundary, or zero when the concept could not be fitted.
struct CAVBank {
  std::vector<std::string> names;
  Mat directions;  // d x N_c
  std::vector<RowVec> omegas;
  std::vector<double> phis;
  std::vector<CavFitMeta> meta;

  int dim() const { return static_cast<int>(directions.rows()); }
  int size() const { return static_cast<int>(directions.cols()); }
  bool fitted(int k) const { return meta.at(static_cast<std::size_t>(k)).fitted; }
  int fitted_count() const {
    int n = 0;
    for (const auto& m : meta) n += m.fitted;
    return n;
  }
  bool empty() const { return directions.size() == 0; }
};

namespace detail {
inline double svm_objective(const Mat& x, const std::vector<double>& y, const RowVec& w, double phi,
                            double c) {
  double hinge = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    hinge += std::max(0.0, 1.0 - y[static_cast<std::size_t>(i)] * (x.row(i).dot(w) + phi));
  }
  return 0.5 * (w.squaredNorm() + phi * phi) + c * hinge;
}
}  // namespace detail

/// Soft-margin linear SVM by full-batch subgradient descent on
///   0.5 * (||w||^2 + phi^2) + C * sum_i max(0, 1 - y_i (w . x_i + phi)),
/// with the bias handled as a weight on a constant feature. Steps follow the
/// strongly convex 1/t schedule; the best iterate seen is returned.
inline LinearBoundary fit_linear_svm(const Mat& x, const std::vector<int>& labels,
                                     const CavFitConfig& cfg = {}) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw NumericError("fit_linear_svm: label count mismatch");
  }
  LinearBoundary out;
  out.omega = RowVec::Zero(x.cols());
  std::vector<double> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    y[i] = labels[i] ? 1.0 : -1.0;
    (labels[i] ? out.meta.n_pos : out.meta.n_neg) += 1;
  }
  if (out.meta.n_pos < cfg.min_per_class || out.meta.n_neg < cfg.min_per_class) return out;
  if (!x.allFinite()) throw NumericError("fit_linear_svm: non-finite features");

  RowVec w = RowVec::Zero(x.cols());
  double phi = 0.0;
  RowVec best_w = w;
  double best_phi = phi;
  double best = detail::svm_objective(x, y, w, phi, cfg.C);
  int since_best = 0;
  int t = 1;
  for (; t <= cfg.max_iters; ++t) {
    RowVec gw = w;
    double gphi = phi;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double yi = y[static_cast<std::size_t>(i)];
      if (yi * (x.row(i).dot(w) + phi) < 1.0) {
        gw -= cfg.C * yi * x.row(i);
        gphi -= cfg.C * yi;
      }
    }
    const double step = 1.0 / t;
    w -= step * gw;
    phi -= step * gphi;
    const double obj = detail::svm_objective(x, y, w, phi, cfg.C);
    if (obj < best - cfg.tolerance * std::max(1.0, std::abs(best))) {
      best = obj;
      best_w = w;
      best_phi = phi;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  out.omega = best_w;
  out.phi = best_phi;
  out.meta.fitted = best_w.norm() > 0.0;
  out.meta.iterations = std::min(t, cfg.max_iters);
  out.meta.objective = best;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = y[static_cast<std::size_t>(i)] * (x.row(i).dot(best_w) + best_phi);
    out.meta.sign_violations += m <= 0.0;
    out.meta.margin_violations += m < 1.0;
  }
  return out;
}

/// Fits one boundary per concept. `features[k]` holds the n x d examples for
/// concept k (the same matrix may be shared by all concepts); `labels` is
/// n x N_c in {0,1}.
inline CAVBank fit_cavs(const std::vector<Mat>& features, const std::vector<std::vector<int>>& labels,
                        const std::vector<std::string>& names, const CavFitConfig& cfg = {},
                        int epoch = 0) {
  const int nc = static_cast<int>(features.size());
  if (nc == 0) throw NumericError("fit_cavs: no concepts");
  const auto d = features[0].cols();
  CAVBank bank;
  bank.names = names;
  bank.names.resize(static_cast<std::size_t>(nc));
  bank.directions = Mat::Zero(d, nc);
  for (int k = 0; k < nc; ++k) {
    const auto& x = features[static_cast<std::size_t>(k)];
    if (x.cols() != d || x.rows() != static_cast<Eigen::Index>(labels.size())) {
      throw NumericError("fit_cavs: feature shape mismatch for concept " + std::to_string(k));
    }
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i].at(static_cast<std::size_t>(k));
    auto boundary = fit_linear_svm(x, y, cfg);
    boundary.meta.epoch = epoch;
    if (boundary.meta.fitted) {
      bank.directions.col(k) = boundary.omega.transpose() / boundary.omega.norm();
    }
    bank.omegas.push_back(boundary.omega);
    bank.phis.push_back(boundary.phi);
    bank.meta.push_back(boundary.meta);
  }
  return bank;
}

/// Shared-feature convenience overload: one vector per example.
inline CAVBank fit_cavs(const Mat& features, const std::vector<std::vector<int>>& labels,
                        const std::vector<std::string>& names, const CavFitConfig& cfg = {},
                        int epoch = 0) {
  if (labels.empty()) throw NumericError("fit_cavs: no examples");
  std::vector<Mat> per(labels.front().size(), features);
  return fit_cavs(per, labels, names, cfg, epoch);
}

inline constexpr double kConceptScoreScale = 0.1;

/// Projection coefficients c_k = <g, b_k> / ||b_k||^2 as a 1 x N_c row;
/// unfitted concepts get 0.
inline RowVec concept_coefficients(const RowVec& g, const CAVBank& bank) {
  if (g.size() != bank.dim()) throw NumericError("concept_coefficients: dimension mismatch");
  RowVec c(bank.size());
  for (int k = 0; k < bank.size(); ++k) {
    const double nn = bank.directions.col(k).squaredNorm();
    c(k) = nn > 0.0 ? g.dot(bank.directions.col(k).transpose()) / nn : 0.0;
  }
  return c;
}

/// Concept scores h_k = logistic(c_k / scale), in (0, 1). Unfitted concepts
/// score 0.5.
inline RowVec project_concept_scores(const RowVec& g, const CAVBank& bank,
                                     double scale = kConceptScoreScale) {
  RowVec c = concept_coefficients(g, bank);
  return c.unaryExpr([scale](double v) { return ad::logistic(v / scale); });
}

/// Per-concept pooling weights over a document's token positions: tokens of
/// concept k when the document mentions k, otherwise every token. Returned
/// as W x N_c with columns summing to one.
inline Mat concept_pooling_weights(const ConceptDocument& doc, int num_concepts) {
  const auto w = static_cast<Eigen::Index>(doc.token_ids.size());
  Mat m = Mat::Zero(w, num_concepts);
  for (int k = 0; k < num_concepts; ++k) {
    int hits = 0;
    for (Eigen::Index r = 0; r < w; ++r) hits += doc.token_to_concept[static_cast<std::size_t>(r)] == k;
    for (Eigen::Index r = 0; r < w; ++r) {
      if (hits > 0) {
        if (doc.token_to_concept[static_cast<std::size_t>(r)] == k) m(r, k) = 1.0 / hits;
      } else {
        m(r, k) = 1.0 / static_cast<double>(w);
      }
    }
  }
  return m;
}

/// Pooled grounded representation of concept k for one image/document pair.
inline RowVec pooled_grounded(const Mat& grounded, const ConceptDocument& doc, int k, int num_concepts) {
  const Mat pool = concept_pooling_weights(doc, num_concepts);
  return pool.col(k).transpose() * grounded;
}

struct ClaResult {
  ad::Var loss;
  bool no_fitted_concepts = false;
};

/// Concept-level alignment: binary cross-entropy between projected concept
/// scores of each image's pooled grounded tokens and its concept labels,
/// summed over fitted concepts and averaged over the batch. The bank is a
/// constant; gradients reach only the grounded features.
inline ClaResult cla_loss(std::span<const ad::Var> grounded, std::span<const ConceptDocument> docs,
                          const std::vector<std::vector<int>>& labels, const CAVBank& bank,
                          ad::Reduction reduction = ad::Reduction::Mean,
                          double scale = kConceptScoreScale, double clip = 1e-6) {
  const auto n = grounded.size();
  if (n == 0 || docs.size() != n || labels.size() != n) throw NumericError("cla_loss: batch mismatch");
  ClaResult out;
  if (bank.empty() || bank.fitted_count() == 0) {
    out.loss = ad::Var::scalar(0.0);
    out.no_fitted_concepts = true;
    return out;
  }
  const int nc = bank.size();
  Mat proj = Mat::Zero(bank.dim(), nc);
  Mat mask = Mat::Zero(1, nc);
  for (int k = 0; k < nc; ++k) {
    if (!bank.fitted(k)) continue;
    proj.col(k) = bank.directions.col(k) / bank.directions.col(k).squaredNorm();
    mask(0, k) = 1.0;
  }
  ad::Var basis(proj);
  std::vector<ad::Var> terms;
  terms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = grounded[i];
    ad::Var pool(concept_pooling_weights(docs[i], nc));
    // c_k = sum_r pool(r,k) * <g_r, b_k>
    auto per_token = ad::matmul(g, basis);
    ad::Var ones(Mat::Ones(1, g.rows()));
    auto coeff = ad::matmul(ones, ad::mul(pool, per_token));
    auto h = ad::sigmoid(ad::scale(coeff, 1.0 / scale));
    Mat target(1, nc);
    for (int k = 0; k < nc; ++k) target(0, k) = labels[i].at(static_cast<std::size_t>(k));
    terms.push_back(ad::bce_probs_sum(h, target, mask, clip));
  }
  auto total = ad::sum_all(ad::concat_rows(terms));
  if (reduction == ad::Reduction::Mean) total = ad::scale(total, 1.0 / static_cast<double>(n));
  out.loss = total;
  return out;
}

// ---------------------------------------------------------------------------
// Bank export: tab-separated, one concept per line, values printed with
// 17 significant digits so a reload is exact.

inline void save_bank(const std::filesystem::path& path, const CAVBank& bank) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write bank file " + path.string());
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "# calign-cav-bank v1 dim=" << bank.dim() << " concepts=" << bank.size() << '\n';
  out << "name\tfitted\tn_pos\tn_neg\tsign_violations\tmargin_violations\titerations\tepoch\tobjective\tphi"
         "\tomega\tb\n";
  for (int k = 0; k < bank.size(); ++k) {
    const auto& m = bank.meta[static_cast<std::size_t>(k)];
    out << bank.names[static_cast<std::size_t>(k)] << '\t' << m.fitted << '\t' << m.n_pos << '\t' << m.n_neg
        << '\t' << m.sign_violations << '\t' << m.margin_violations << '\t' << m.iterations << '\t'
        << m.epoch << '\t' << num(m.objective) << '\t' << num(bank.phis[static_cast<std::size_t>(k)]) << '\t';
    const auto& w = bank.omegas[static_cast<std::size_t>(k)];
    for (Eigen::Index j = 0; j < w.size(); ++j) out << (j ? " " : "") << num(w(j));
    out << '\t';
    for (Eigen::Index j = 0; j < bank.dim(); ++j) out << (j ? " " : "") << num(bank.directions(j, k));
    out << '\n';
  }
}

inline CAVBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open bank file " + path.string());
  std::string line;
  std::getline(in, line);
  int dim = 0;
  int count = 0;
  if (std::sscanf(line.c_str(), "# calign-cav-bank v1 dim=%d concepts=%d", &dim, &count) != 2) {
    throw SchemaError("bad bank header in " + path.string());
  }
  std::getline(in, line);
  CAVBank bank;
  bank.directions = Mat::Zero(dim, count);
  for (int k = 0; k < count; ++k) {
    if (!std::getline(in, line)) throw SchemaError("truncated bank file " + path.string());
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (f.size() < 11) throw SchemaError("bad bank row " + std::to_string(k));
    if (f.size() == 11) f.emplace_back();
    CavFitMeta m;
    m.fitted = f[1] == "1";
    m.n_pos = std::stoi(f[2]);
    m.n_neg = std::stoi(f[3]);
    m.sign_violations = std::stoi(f[4]);
    m.margin_violations = std::stoi(f[5]);
    m.iterations = std::stoi(f[6]);
    m.epoch = std::stoi(f[7]);
    m.objective = std::strtod(f[8].c_str(), nullptr);
    bank.names.push_back(f[0]);
    bank.meta.push_back(m);
    bank.phis.push_back(std::strtod(f[9].c_str(), nullptr));
    auto parse_vec = [](const std::string& s) {
      std::vector<double> v;
      std::stringstream vs(s);
      std::string tok;
      while (vs >> tok) v.push_back(std::strtod(tok.c_str(), nullptr));
      return v;
    };
    auto w = parse_vec(f[10]);
    bank.omegas.push_back(Eigen::Map<RowVec>(w.data(), static_cast<Eigen::Index>(w.size())));
    auto b = parse_vec(f[11]);
    if (static_cast<int>(b.size()) != dim) throw SchemaError("bank direction has wrong dimension");
    for (int j = 0; j < dim; ++j) bank.directions(j, k) = b[static_cast<std::size_t>(j)];
  }
  return bank;
}

}  // namespace calign
