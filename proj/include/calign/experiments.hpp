#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "calign/evaluation.hpp"
#include "calign/training.hpp"

namespace calign {

struct PipelineResult {
  Checkpoint checkpoint;
  EvalResult test;
};

/// Stage 1, stage 2 and held-out evaluation on one dataset.
inline PipelineResult run_pipeline(const TrainConfig& cfg, const Dataset& data,
                                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  const auto train = data.split(Split::Train);
  const auto test = data.split(Split::Test);
  if (test.empty()) throw ConfigError("dataset has no test split");
  ConceptLabelView view(train);
  PipelineResult r;
  r.checkpoint = run_stage2(run_stage1(cfg, view, data.vocab, data.class_names, on_epoch), cfg, train);
  r.test = evaluate(r.checkpoint.model, test);
  return r;
}

/// Fixed-precision text rendering of a result; equal runs give equal text.
inline std::string format_report(const EvalResult& r) {
  auto num = [](std::optional<double> v) { return v ? detail::fmt17(*v) : std::string("undefined"); };
  std::string s = "diagnosis.auc=" + num(r.diagnosis.auc) + "\ndiagnosis.acc=" + detail::fmt17(r.diagnosis.acc) +
                  "\ndiagnosis.f1=" + detail::fmt17(r.diagnosis.f1) + "\n";
  if (r.concepts) {
    s += "concepts.auc=" + num(r.concepts->auc) + "\nconcepts.acc=" + detail::fmt17(r.concepts->acc) +
         "\nconcepts.f1=" + detail::fmt17(r.concepts->f1) + "\n";
    for (const auto& [crit, acc] : r.concepts->per_criterion) s += "criterion." + crit + ".acc=" + detail::fmt17(acc) + "\n";
  }
  return s;
}

struct AblationVariant {
  std::string name;
  double lambda1, lambda2, lambda3;
};

inline const std::array<AblationVariant, 6>& ablation_variants() {
  static const std::array<AblationVariant, 6> v{{
      {"none", 0, 0, 0},
      {"ila", 1, 0, 0},
      {"ila+tla", 1, 1, 0},
      {"ila+cla", 1, 0, 1},
      {"tla+cla", 0, 1, 1},
      {"ila+tla+cla", 1, 1, 1},
  }};
  return v;
}

struct AblationRow {
  AblationVariant variant;
  std::vector<double> auc_d;  // per seed, percent
  std::vector<double> auc_c;
  MeanStd diagnosis() const { return mean_std(auc_d); }
  MeanStd concepts() const { return mean_std(auc_c); }
};

/// All six loss combinations, each trained and evaluated per seed. The
/// variant weights replace lambda1..3 of `base`; everything else is kept.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& data,
                                             const std::vector<std::uint64_t>& seeds,
                                             const std::function<void(const std::string&)>& log = {}) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    AblationRow row{v, {}, {}};
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.stage2.bottleneck = true;
      cfg.stage1.align.lambda1 = v.lambda1;
      cfg.stage1.align.lambda2 = v.lambda2;
      cfg.stage1.align.lambda3 = v.lambda3;
      auto r = run_pipeline(cfg, data);
      row.auc_d.push_back(r.test.diagnosis.auc.value_or(0.0));
      row.auc_c.push_back(r.test.concepts->auc.value_or(0.0));
      if (log) log(v.name + " seed " + std::to_string(seed) + ": AUC_D " + detail::fmt17(row.auc_d.back()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct EfficiencyRow {
  double fraction = 1.0;
  std::vector<double> acc;  // per seed, percent
  std::vector<double> auc;
  MeanStd accuracy() const { return mean_std(acc); }
  MeanStd auc_stats() const { return mean_std(auc); }
};

/// Stage 2 at each label fraction on top of one stage-1 run per seed.
/// Rows are returned in ascending fraction order.
inline std::vector<EfficiencyRow> run_efficiency(const TrainConfig& base, const Dataset& data,
                                                 std::vector<double> fractions,
                                                 const std::vector<std::uint64_t>& seeds) {
  std::sort(fractions.begin(), fractions.end());
  std::vector<EfficiencyRow> rows;
  for (double f : fractions) rows.push_back({f, {}, {}});
  const auto train = data.split(Split::Train);
  const auto test = data.split(Split::Test);
  for (auto seed : seeds) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    ConceptLabelView view(train);
    const auto stage1 = run_stage1(cfg, view, data.vocab, data.class_names);
    for (auto& row : rows) {
      cfg.stage2.label_fraction = row.fraction;
      const auto ck = run_stage2(stage1, cfg, train);
      const auto ev = evaluate(ck.model, test);
      row.acc.push_back(ev.diagnosis.acc);
      row.auc.push_back(ev.diagnosis.auc.value_or(0.0));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "# std is the population standard deviation over seeds\n";
  out << "config,lambda1,lambda2,lambda3,auc_d_mean,auc_d_std,auc_c_mean,auc_c_std,seeds\n";
  for (const auto& r : rows) {
    const auto d = r.diagnosis();
    const auto c = r.concepts();
    out << r.variant.name << ',' << r.variant.lambda1 << ',' << r.variant.lambda2 << ',' << r.variant.lambda3 << ','
        << detail::fmt17(d.mean) << ',' << detail::fmt17(d.std) << ',' << detail::fmt17(c.mean) << ','
        << detail::fmt17(c.std) << ',' << d.count << '\n';
  }
}

inline void write_efficiency_csv(const std::filesystem::path& path, const std::vector<EfficiencyRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "# std is the population standard deviation over seeds\n";
  out << "label_fraction,acc_mean,acc_std,auc_mean,auc_std,seeds\n";
  for (const auto& r : rows) {
    const auto a = r.accuracy();
    const auto u = r.auc_stats();
    out << detail::fmt17(r.fraction) << ',' << detail::fmt17(a.mean) << ',' << detail::fmt17(a.std) << ','
        << detail::fmt17(u.mean) << ',' << detail::fmt17(u.std) << ',' << a.count << '\n';
  }
}

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<std::pair<double, double>>& curve) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "threshold,accuracy\n";
  for (const auto& [t, a] : curve) out << detail::fmt17(t) << ',' << detail::fmt17(a) << '\n';
}

/// Accuracy-vs-threshold line chart as a standalone SVG document.
inline std::string curve_svg(const std::vector<std::pair<double, double>>& curve, const std::string& title) {
  const double w = 480, h = 320, left = 56, right = 16, top = 36, bottom = 48;
  const double pw = w - left - right;
  const double ph = h - top - bottom;
  auto px = [&](double t) { return left + t * pw; };
  auto py = [&](double a) { return top + (1.0 - a) * ph; };
  char buf[160];
  std::string s;
  std::snprintf(buf, sizeof(buf), "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\">\n", w, h);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">", w / 2);
  s += buf + title + "</text>\n";
  std::snprintf(buf, sizeof(buf), "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#444\"/>\n",
                left, top, pw, ph);
  s += buf;
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"middle\">%.1f</text>\n"
                  "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"end\">%.0f</text>\n",
                  px(v), h - bottom + 16, v, left - 6, py(v) + 3, v * 100);
    s += buf;
  }
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">threshold</text>\n",
                left + pw / 2, h - 10);
  s += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"14\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 %g)\">"
                "accuracy (%%)</text>\n",
                top + ph / 2, top + ph / 2);
  s += buf;
  s += "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  for (const auto& [t, a] : curve) {
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(t), py(a));
    s += buf;
  }
  s += "\"/>\n";
  for (const auto& [t, a] : curve) {
    std::snprintf(buf, sizeof(buf), "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"#c0392b\"/>\n", px(t), py(a));
    s += buf;
  }
  return s + "</svg>\n";
}

/// Thresholds 1.0, 0.9, ..., 0.0.
inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int i = 10; i >= 0; --i) t.push_back(i / 10.0);
  return t;
}

}  // namespace calign
