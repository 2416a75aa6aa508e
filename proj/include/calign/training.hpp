#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calign/alignment.hpp"
#include "calign/bottleneck.hpp"
#include "calign/cav.hpp"
#include "calign/config.hpp"
#include "calign/datasets.hpp"
#include "calign/encoders.hpp"
#include "calign/evaluation.hpp"
#include "calign/objective.hpp"
#include "calign/optim.hpp"
#include "calign/rng.hpp"

namespace calign {

struct Stage1Config {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 5e-5;
  AlignmentConfig align;
  CavFitConfig cav;
};

struct Stage2Config {
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 1e-4;
  double beta = 1.0;
  double label_fraction = 1.0;
  bool bottleneck = true;  // false: direct classification head
};

struct DataConfig {
  std::string source = "synthetic";  // or "manifest"
  std::string manifest;
  std::string classes;       // comma-separated class order for manifests
  std::string keep_classes;  // comma-separated row filter for manifests
  std::string aliases;       // comma-separated raw=name pairs
  int min_concept_support = 0;
  SynthConfig synth;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  Stage1Config stage1;
  Stage2Config stage2;
  DataConfig data;
  std::string checkpoint_dir;
  std::string embedding_cache;  // optional external token embeddings

  /// Settings for the synthetic motif data with a from-scratch encoder. The
  /// plain defaults keep the small learning rates suited to a pretrained
  /// backbone, which barely move a randomly initialized one in 30 epochs.
  static TrainConfig synthetic_preset(std::uint64_t seed = 0) {
    TrainConfig c;
    c.seed = seed;
    c.stage1.batch_size = 16;
    c.stage1.learning_rate = 1e-3;
    c.stage2.learning_rate = 1e-2;
    return c;
  }

  void validate() const {
    if (!(stage1.learning_rate > 0) || !(stage2.learning_rate > 0)) throw ConfigError("learning rates must be > 0");
    if (stage1.batch_size < 2) throw ConfigError("stage1.batch_size must be >= 2 for contrastive training");
    if (stage2.batch_size < 1) throw ConfigError("stage2.batch_size must be >= 1");
    if (stage1.epochs < 0 || stage2.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (stage2.beta < 0) throw ConfigError("beta must be >= 0");
    if (!(stage2.label_fraction > 0.0 && stage2.label_fraction <= 1.0)) {
      throw ConfigError("label_fraction must be in (0, 1]");
    }
    stage1.align.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("seed", static_cast<unsigned long long>(seed));
    kv.set("encoder.image_size", encoder.image_size);
    kv.set("encoder.channels", encoder.channels);
    kv.set("encoder.width1", encoder.width1);
    kv.set("encoder.width2", encoder.width2);
    kv.set("encoder.d_r", encoder.d_r);
    kv.set("encoder.d_v", encoder.d_v);
    kv.set("encoder.d_t", encoder.d_t);
    kv.set("encoder.d", encoder.d);
    kv.set("encoder.grid_h", encoder.grid_h);
    kv.set("encoder.grid_w", encoder.grid_w);
    kv.set("encoder.train_token_embeddings", encoder.train_token_embeddings);
    kv.set("stage1.epochs", stage1.epochs);
    kv.set("stage1.batch_size", stage1.batch_size);
    kv.set("stage1.learning_rate", stage1.learning_rate);
    kv.set("tau1", stage1.align.tau1);
    kv.set("tau2", stage1.align.tau2);
    kv.set("tau3", stage1.align.tau3);
    kv.set("lambda1", stage1.align.lambda1);
    kv.set("lambda2", stage1.align.lambda2);
    kv.set("lambda3", stage1.align.lambda3);
    kv.set("reduction", std::string(stage1.align.reduction == ad::Reduction::Mean ? "mean" : "sum"));
    kv.set("cav.C", stage1.cav.C);
    kv.set("cav.max_iters", stage1.cav.max_iters);
    kv.set("cav.patience", stage1.cav.patience);
    kv.set("stage2.epochs", stage2.epochs);
    kv.set("stage2.batch_size", stage2.batch_size);
    kv.set("stage2.learning_rate", stage2.learning_rate);
    kv.set("beta", stage2.beta);
    kv.set("stage2.label_fraction", stage2.label_fraction);
    kv.set("stage2.variant", std::string(stage2.bottleneck ? "bottleneck" : "direct"));
    kv.set("data.source", data.source);
    kv.set("data.manifest", data.manifest);
    kv.set("data.classes", data.classes);
    kv.set("data.keep_classes", data.keep_classes);
    kv.set("data.aliases", data.aliases);
    kv.set("data.min_concept_support", data.min_concept_support);
    kv.set("synth.n_train", data.synth.n_train);
    kv.set("synth.n_val", data.synth.n_val);
    kv.set("synth.n_test", data.synth.n_test);
    kv.set("synth.num_concepts", data.synth.num_concepts);
    kv.set("synth.image_size", data.synth.image_size);
    kv.set("synth.grid", data.synth.grid);
    kv.set("synth.motif_size", data.synth.motif_size);
    kv.set("synth.concept_prob", data.synth.concept_prob);
    kv.set("synth.num_classes", data.synth.num_classes);
    kv.set("synth.seed", static_cast<unsigned long long>(data.synth.seed));
    kv.set("checkpoint_dir", checkpoint_dir);
    kv.set("embedding_cache", embedding_cache);
    return kv;
  }

  /// Overrides defaults with the keys present in `kv`; unknown keys throw.
  static TrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig{}); }
  static TrainConfig from_kv(const KeyValues& kv, TrainConfig c) {
    kv.read("seed", c.seed);
    kv.read("encoder.image_size", c.encoder.image_size);
    kv.read("encoder.channels", c.encoder.channels);
    kv.read("encoder.width1", c.encoder.width1);
    kv.read("encoder.width2", c.encoder.width2);
    kv.read("encoder.d_r", c.encoder.d_r);
    kv.read("encoder.d_v", c.encoder.d_v);
    kv.read("encoder.d_t", c.encoder.d_t);
    kv.read("encoder.d", c.encoder.d);
    kv.read("encoder.grid_h", c.encoder.grid_h);
    kv.read("encoder.grid_w", c.encoder.grid_w);
    kv.read("encoder.train_token_embeddings", c.encoder.train_token_embeddings);
    kv.read("stage1.epochs", c.stage1.epochs);
    kv.read("stage1.batch_size", c.stage1.batch_size);
    kv.read("stage1.learning_rate", c.stage1.learning_rate);
    kv.read("tau1", c.stage1.align.tau1);
    kv.read("tau2", c.stage1.align.tau2);
    kv.read("tau3", c.stage1.align.tau3);
    kv.read("lambda1", c.stage1.align.lambda1);
    kv.read("lambda2", c.stage1.align.lambda2);
    kv.read("lambda3", c.stage1.align.lambda3);
    std::string reduction = c.stage1.align.reduction == ad::Reduction::Mean ? "mean" : "sum";
    kv.read("reduction", reduction);
    if (reduction != "mean" && reduction != "sum") throw ConfigError("reduction must be mean or sum");
    c.stage1.align.reduction = reduction == "mean" ? ad::Reduction::Mean : ad::Reduction::Sum;
    kv.read("cav.C", c.stage1.cav.C);
    kv.read("cav.max_iters", c.stage1.cav.max_iters);
    kv.read("cav.patience", c.stage1.cav.patience);
    kv.read("stage2.epochs", c.stage2.epochs);
    kv.read("stage2.batch_size", c.stage2.batch_size);
    kv.read("stage2.learning_rate", c.stage2.learning_rate);
    kv.read("beta", c.stage2.beta);
    kv.read("stage2.label_fraction", c.stage2.label_fraction);
    std::string variant = c.stage2.bottleneck ? "bottleneck" : "direct";
    kv.read("stage2.variant", variant);
    if (variant != "bottleneck" && variant != "direct") throw ConfigError("stage2.variant must be bottleneck or direct");
    c.stage2.bottleneck = variant == "bottleneck";
    kv.read("data.source", c.data.source);
    kv.read("data.manifest", c.data.manifest);
    kv.read("data.classes", c.data.classes);
    kv.read("data.keep_classes", c.data.keep_classes);
    kv.read("data.aliases", c.data.aliases);
    kv.read("data.min_concept_support", c.data.min_concept_support);
    kv.read("synth.n_train", c.data.synth.n_train);
    kv.read("synth.n_val", c.data.synth.n_val);
    kv.read("synth.n_test", c.data.synth.n_test);
    kv.read("synth.num_concepts", c.data.synth.num_concepts);
    kv.read("synth.image_size", c.data.synth.image_size);
    kv.read("synth.grid", c.data.synth.grid);
    kv.read("synth.motif_size", c.data.synth.motif_size);
    kv.read("synth.concept_prob", c.data.synth.concept_prob);
    kv.read("synth.num_classes", c.data.synth.num_classes);
    kv.read("synth.seed", c.data.synth.seed);
    kv.read("checkpoint_dir", c.checkpoint_dir);
    kv.read("embedding_cache", c.embedding_cache);
    kv.reject_unknown();
    return c;
  }
};

namespace detail {
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}
}  // namespace detail

/// Dataset described by a config: the synthetic generator or a manifest.
inline Dataset load_dataset(const DataConfig& data, int image_size, int channels) {
  if (data.source == "synthetic") {
    auto synth = data.synth;
    synth.image_size = image_size;
    return generate_synthetic(synth);
  }
  if (data.source == "manifest") {
    ManifestOptions opt;
    opt.image_size = image_size;
    opt.channels = channels;
    opt.classes = detail::split_list(data.classes);
    opt.keep_classes = detail::split_list(data.keep_classes);
    for (const auto& pair : detail::split_list(data.aliases)) {
      const auto eq = pair.find('=');
      if (eq == std::string::npos) throw ConfigError("data.aliases entries must be raw=name");
      opt.label_aliases[pair.substr(0, eq)] = pair.substr(eq + 1);
    }
    opt.min_concept_support = data.min_concept_support;
    return load_manifest(data.manifest, opt);
  }
  throw ConfigError("data.source must be synthetic or manifest");
}

struct Model {
  ConceptVocabulary vocab;
  std::vector<std::string> class_names;
  ImageEncoder image;
  TextEncoder text;
  CAVBank bank;
  std::optional<BottleneckHeads> heads;
  std::optional<DirectHead> direct;
};

struct EpochRecord {
  int epoch = 0;
  double ila = 0;
  double tla = 0;
  double cla = 0;
  double total = 0;
  int fitted_concepts = 0;

  bool operator==(const EpochRecord&) const = default;
};

struct Checkpoint {
  TrainConfig config;
  Model model;
  std::vector<EpochRecord> history;
  std::string rng_state;
  AdamConfig optimizer;
  long optimizer_steps = 0;
  bool stage2_done = false;
};

/// Builds freshly initialized encoders for a vocabulary.
inline Model init_model(const TrainConfig& cfg, const ConceptVocabulary& vocab,
                        const std::vector<std::string>& class_names) {
  Model m;
  m.vocab = vocab;
  m.class_names = class_names;
  EncoderConfig ec = cfg.encoder;
  ec.vocab_size = vocab.token_count();
  ec.seed = derive_seed(cfg.seed, "encoders");
  m.image = ImageEncoder(ec);
  if (!cfg.embedding_cache.empty()) {
    m.text = TextEncoder(ec, EmbeddingCache::load(cfg.embedding_cache), vocab);
  } else {
    m.text = TextEncoder(ec);
  }
  return m;
}

inline std::vector<ad::Var> trainable(Model& m) {
  std::vector<ad::Var> out;
  for (auto* set : {&m.image.parameters(), &m.text.parameters()}) {
    for (auto& e : set->entries())
      if (e.var.requires_grad()) out.push_back(e.var);
  }
  return out;
}

/// Per-concept pooled grounded features of every sample attended by its own
/// concept document, one n x d matrix per concept.
inline std::vector<Mat> grounded_concept_features(const Model& m, const ConceptLabelView& data,
                                                  const std::vector<ConceptDocument>& docs, double tau2) {
  ad::NoGradGuard guard;
  const int nc = m.vocab.size();
  std::vector<Mat> out(static_cast<std::size_t>(nc), Mat(static_cast<Eigen::Index>(data.size()), m.image.config().d));
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto vf = m.image.encode(data.image(i));
    auto tf = m.text.encode(docs[i]);
    const Mat g = cross_attention(vf.regions, tf.tokens, tau2).grounded.value();
    const Mat pool = concept_pooling_weights(docs[i], nc);
    for (int k = 0; k < nc; ++k) {
      out[static_cast<std::size_t>(k)].row(static_cast<Eigen::Index>(i)) = pool.col(k).transpose() * g;
    }
  }
  return out;
}

inline CAVBank refit_bank(const Model& m, const ConceptLabelView& data, const std::vector<ConceptDocument>& docs,
                          const Stage1Config& cfg, int epoch) {
  auto feats = grounded_concept_features(m, data, docs, cfg.align.tau2);
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < data.size(); ++i) labels.push_back(data.concepts(i));
  std::vector<std::string> names;
  for (const auto& e : m.vocab.entries()) names.push_back(e.phrase);
  return fit_cavs(feats, labels, names, cfg.cav, epoch);
}

/// Stage 1: multi-level alignment trained from concept labels only. The
/// CAV bank is refit from current features at the start of every epoch after
/// the first (when the concept-level weight is non-zero) and held fixed
/// within the epoch.
inline Checkpoint run_stage1(const TrainConfig& cfg, const ConceptLabelView& train,
                             const ConceptVocabulary& vocab, const std::vector<std::string>& class_names,
                             const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("stage 1 needs training samples");
  Checkpoint ck;
  ck.config = cfg;
  ck.model = init_model(cfg, vocab, class_names);
  ck.optimizer = AdamConfig{cfg.stage1.learning_rate};
  Adam opt(trainable(ck.model), ck.optimizer);
  Rng rng(derive_seed(cfg.seed, "stage1"));

  std::vector<ConceptDocument> docs;
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (static_cast<int>(train.concepts(i).size()) != vocab.size()) {
      throw ConfigError("sample " + train.id(i) + " has no concept labels matching the vocabulary");
    }
    docs.push_back(build_concept_document(std::span<const int>(train.concepts(i)), vocab));
    labels.push_back(train.concepts(i));
  }
  const auto& align = cfg.stage1.align;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const bool any_term = align.lambda1 > 0 || align.lambda2 > 0 || align.lambda3 > 0;
  for (int epoch = 1; epoch <= cfg.stage1.epochs && any_term; ++epoch) {
    if (align.lambda3 > 0 && epoch >= 2) {
      ck.model.bank = refit_bank(ck.model, train, docs, cfg.stage1, epoch);
    }
    shuffle(order, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.fitted_concepts = ck.model.bank.empty() ? 0 : ck.model.bank.fitted_count();
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.stage1.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.stage1.batch_size));
      if (end - start < 2 && order.size() >= 2) continue;  // a lone sample has no negatives
      std::vector<VisualFeatures> vis;
      std::vector<TextFeatures> txt;
      std::vector<ConceptDocument> bdocs;
      std::vector<std::vector<int>> blabels;
      for (std::size_t j = start; j < end; ++j) {
        const auto i = order[j];
        vis.push_back(ck.model.image.encode(train.image(i)));
        txt.push_back(ck.model.text.encode(docs[i]));
        bdocs.push_back(docs[i]);
        blabels.push_back(labels[i]);
      }
      auto where = [&] {
        std::string ids;
        for (std::size_t j = start; j < end; ++j) ids += (ids.empty() ? "" : ",") + train.id(order[j]);
        return "epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) + " samples: " + ids;
      };
      std::optional<AlignmentLossBreakdown> computed;
      try {
        computed = stage1_loss(vis, txt, bdocs, blabels, ck.model.bank, align);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where());
      }
      auto& loss = *computed;
      if (!std::isfinite(loss.total.item())) {
        throw NumericError("non-finite stage-1 loss (ila=" + std::to_string(loss.ila.item()) +
                           " tla=" + std::to_string(loss.tla.item()) + " cla=" + std::to_string(loss.cla.item()) +
                           ") at " + where());
      }
      opt.zero_grad();
      ad::backward(loss.total);
      opt.step();
      rec.ila += loss.ila.item();
      rec.tla += loss.tla.item();
      rec.cla += loss.cla.item();
      rec.total += loss.total.item();
      ++batches;
    }
    if (batches > 0) {
      rec.ila /= batches;
      rec.tla /= batches;
      rec.cla /= batches;
      rec.total /= batches;
    }
    ck.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  opt.zero_grad();
  ck.optimizer_steps = opt.steps();
  std::ostringstream rs;
  rs << rng;
  ck.rng_state = rs.str();
  return ck;
}

/// Class-stratified, seed-deterministic subset of `labels` with
/// round(fraction * n) rows, allocated by largest remainder. Returned
/// indices are ascending.
inline std::vector<std::size_t> stratified_subsample(std::span<const int> labels, int num_classes, double fraction,
                                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("label fraction must be in (0, 1]");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  if (fraction == 1.0) {
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(labels.size())));
  std::vector<std::size_t> take(by_class.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = fraction * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total && r < remainders.size(); ++r, ++assigned) take[remainders[r].second]++;
  std::vector<std::size_t> out;
  Rng rng(derive_seed(seed, "label-fraction"));
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    if (take[c] < 1) {
      throw ConfigError("label fraction " + std::to_string(fraction) + " leaves class " + std::to_string(c) +
                        " without samples");
    }
    auto members = by_class[c];
    shuffle(members, rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::uint64_t encoder_checksum(const Model& m) {
  return m.image.parameters().checksum() ^ (m.text.parameters().checksum() * 31);
}

/// Stage 2: classification heads on the frozen stage-1 encoder, trained on a
/// stratified fraction of the training split.
inline Checkpoint run_stage2(const Checkpoint& stage1, const TrainConfig& cfg, std::span<const ImageSample> train) {
  cfg.validate();
  if (train.empty()) throw ConfigError("stage 2 needs training samples");
  Checkpoint ck = stage1;
  ck.config.stage2 = cfg.stage2;
  const auto before = encoder_checksum(ck.model);
  std::vector<int> diag;
  for (const auto& s : train) diag.push_back(s.diagnosis);
  const auto rows = stratified_subsample(diag, static_cast<int>(ck.model.class_names.size()),
                                         cfg.stage2.label_fraction, cfg.seed);
  Mat features(static_cast<Eigen::Index>(rows.size()), ck.model.image.config().d_v);
  Mat concepts(static_cast<Eigen::Index>(rows.size()), ck.model.vocab.size());
  std::vector<int> y;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& s = train[rows[r]];
    features.row(static_cast<Eigen::Index>(r)) = ck.model.image.global_features(s.image);
    for (int k = 0; k < ck.model.vocab.size(); ++k) concepts(static_cast<Eigen::Index>(r), k) = s.concepts.at(static_cast<std::size_t>(k));
    y.push_back(s.diagnosis);
  }
  // Epochs count passes over the full split: a subset trains for
  // proportionally more passes so every fraction gets the same update budget.
  HeadTrainConfig hc;
  hc.epochs = static_cast<int>((static_cast<long>(cfg.stage2.epochs) * static_cast<long>(train.size()) +
                                static_cast<long>(rows.size()) - 1) / static_cast<long>(rows.size()));
  hc.batch_size = cfg.stage2.batch_size;
  hc.learning_rate = cfg.stage2.learning_rate;
  hc.beta = cfg.stage2.beta;
  hc.seed = derive_seed(cfg.seed, "stage2");
  const int ny = static_cast<int>(ck.model.class_names.size());
  if (cfg.stage2.bottleneck) {
    ck.model.heads = train_bottleneck(features, concepts, y, ny, hc);
    ck.model.direct.reset();
  } else {
    ck.model.direct = train_direct(features, y, ny, hc);
    ck.model.heads.reset();
  }
  if (encoder_checksum(ck.model) != before) throw NumericError("encoder parameters changed during stage 2");
  ck.stage2_done = true;
  return ck;
}

struct EvalResult {
  MetricValues diagnosis;
  std::optional<MetricValues> concepts;
  Mat features;
  Mat probabilities;
  Mat concept_scores;
  std::vector<int> labels;
};

/// Diagnosis (and, with a bottleneck, concept detection) metrics on samples.
inline EvalResult evaluate(const Model& m, std::span<const ImageSample> samples) {
  if (!m.heads && !m.direct) throw ConfigError("model has no trained head");
  EvalResult r;
  r.features = extract_features(m.image, samples);
  for (const auto& s : samples) r.labels.push_back(s.diagnosis);
  Mat logits;
  if (m.heads) {
    r.concept_scores = m.heads->concept_scores(r.features);
    logits = m.heads->diagnosis_logits(r.concept_scores);
    Mat labels = detail::label_matrix(samples, m.vocab.size());
    r.concepts = concept_metrics(r.concept_scores, labels, m.vocab);
  } else {
    logits = m.direct->logits(r.features);
  }
  r.probabilities = softmax(logits);
  r.diagnosis = diagnosis_metrics(r.probabilities, r.labels);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint directory: config.cfg, vocab.tsv, params.txt, bank.tsv,
// heads.txt (after stage 2), history.csv, state.txt. Values are written with
// 17 significant digits, which reloads doubles exactly.

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_matrix(std::ostream& out, const std::string& name, const Mat& m) {
  out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << fmt17(m(r, c));
    out << '\n';
  }
}

inline std::map<std::string, Mat> read_matrices(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::map<std::string, Mat> out;
  std::string header;
  std::getline(in, header);
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  while (in >> name >> rows >> cols) {
    Mat m(rows, cols);
    std::string tok;
    for (Eigen::Index i = 0; i < rows * cols; ++i) {
      if (!(in >> tok)) throw SchemaError("truncated matrix " + name + " in " + path.string());
      m.data()[i] = std::strtod(tok.c_str(), nullptr);
    }
    out[name] = std::move(m);
  }
  return out;
}

inline void restore(ParameterSet& set, const std::map<std::string, Mat>& values) {
  for (auto& e : set.entries()) {
    auto it = values.find(e.name);
    if (it == values.end()) throw SchemaError("checkpoint lacks parameter " + e.name);
    if (it->second.rows() != e.var.rows() || it->second.cols() != e.var.cols()) {
      throw SchemaError("checkpoint parameter " + e.name + " has wrong shape");
    }
    e.var.mutable_value() = it->second;
  }
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  ck.config.to_kv().save(tmp / "config.cfg");
  {
    std::ofstream out(tmp / "vocab.tsv");
    out << "criterion\tfine_label\tphrase\n";
    for (const auto& e : ck.model.vocab.entries()) out << e.criterion << '\t' << e.fine_label << '\t' << e.phrase << '\n';
    out << "#classes";
    for (const auto& c : ck.model.class_names) out << '\t' << c;
    out << '\n';
  }
  {
    std::ofstream out(tmp / "params.txt");
    out << "# calign-params v1\n";
    for (const auto* set : {&ck.model.image.parameters(), &ck.model.text.parameters()})
      for (const auto& e : set->entries()) detail::write_matrix(out, e.name, e.var.value());
  }
  if (!ck.model.bank.empty()) save_bank(tmp / "bank.tsv", ck.model.bank);
  if (ck.model.heads || ck.model.direct) {
    std::ofstream out(tmp / "heads.txt");
    out << "# calign-heads v1\n";
    if (const auto& h = ck.model.heads) {
      detail::write_matrix(out, "bottleneck.scaler_mean", h->scaler.mean);
      detail::write_matrix(out, "bottleneck.scaler_inv_std", h->scaler.inv_std);
      detail::write_matrix(out, "bottleneck.concept_w", h->concept_w);
      detail::write_matrix(out, "bottleneck.concept_b", h->concept_b);
      detail::write_matrix(out, "bottleneck.diag_w", h->diag_w);
      detail::write_matrix(out, "bottleneck.diag_b", h->diag_b);
      Mat beta(1, 1);
      beta(0, 0) = h->beta;
      detail::write_matrix(out, "bottleneck.beta", beta);
    }
    if (const auto& d = ck.model.direct) {
      detail::write_matrix(out, "direct.scaler_mean", d->scaler.mean);
      detail::write_matrix(out, "direct.scaler_inv_std", d->scaler.inv_std);
      detail::write_matrix(out, "direct.w", d->w);
      detail::write_matrix(out, "direct.b", d->b);
    }
  }
  {
    std::ofstream out(tmp / "history.csv");
    out << "epoch,ila,tla,cla,total,fitted_concepts\n";
    for (const auto& r : ck.history) {
      out << r.epoch << ',' << detail::fmt17(r.ila) << ',' << detail::fmt17(r.tla) << ',' << detail::fmt17(r.cla)
          << ',' << detail::fmt17(r.total) << ',' << r.fitted_concepts << '\n';
    }
  }
  {
    std::ofstream out(tmp / "state.txt");
    out << "optimizer=adam\nlearning_rate=" << detail::fmt17(ck.optimizer.learning_rate)
        << "\nbeta1=" << detail::fmt17(ck.optimizer.beta1) << "\nbeta2=" << detail::fmt17(ck.optimizer.beta2)
        << "\nepsilon=" << detail::fmt17(ck.optimizer.epsilon) << "\nsteps=" << ck.optimizer_steps
        << "\nstage2_done=" << ck.stage2_done << "\nrng=" << ck.rng_state << '\n';
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("checkpoint directory not found: " + dir.string());
  Checkpoint ck;
  ck.config = TrainConfig::from_kv(KeyValues::load(dir / "config.cfg"));
  {
    std::ifstream in(dir / "vocab.tsv");
    if (!in) throw SchemaError("checkpoint lacks vocab.tsv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string field;
      while (std::getline(ss, field, '\t')) f.push_back(field);
      if (!f.empty() && f[0] == "#classes") {
        ck.model.class_names.assign(f.begin() + 1, f.end());
      } else if (f.size() == 3) {
        ck.model.vocab.add(f[0], f[1], f[2]);
      }
    }
  }
  const auto params = detail::read_matrices(dir / "params.txt");
  EncoderConfig ec = ck.config.encoder;
  ec.vocab_size = ck.model.vocab.token_count();
  ec.seed = derive_seed(ck.config.seed, "encoders");
  if (auto it = params.find("txt.embed"); it != params.end()) ec.d_t = static_cast<int>(it->second.cols());
  ck.model.image = ImageEncoder(ec);
  ck.model.text = TextEncoder(ec);
  detail::restore(ck.model.image.parameters(), params);
  detail::restore(ck.model.text.parameters(), params);
  if (!ck.config.embedding_cache.empty()) ck.model.text.parameters().at("txt.embed").node()->requires_grad = false;
  if (fs::exists(dir / "bank.tsv")) ck.model.bank = load_bank(dir / "bank.tsv");
  if (fs::exists(dir / "heads.txt")) {
    auto h = detail::read_matrices(dir / "heads.txt");
    if (h.count("bottleneck.concept_w")) {
      BottleneckHeads b;
      b.scaler.mean = h.at("bottleneck.scaler_mean").row(0);
      b.scaler.inv_std = h.at("bottleneck.scaler_inv_std").row(0);
      b.concept_w = h.at("bottleneck.concept_w");
      b.concept_b = h.at("bottleneck.concept_b").row(0);
      b.diag_w = h.at("bottleneck.diag_w");
      b.diag_b = h.at("bottleneck.diag_b").row(0);
      b.beta = h.at("bottleneck.beta")(0, 0);
      ck.model.heads = std::move(b);
    }
    if (h.count("direct.w")) {
      DirectHead d;
      d.scaler.mean = h.at("direct.scaler_mean").row(0);
      d.scaler.inv_std = h.at("direct.scaler_inv_std").row(0);
      d.w = h.at("direct.w");
      d.b = h.at("direct.b").row(0);
      ck.model.direct = std::move(d);
    }
  }
  {
    std::ifstream in(dir / "history.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string field;
      while (std::getline(ss, field, ',')) f.push_back(field);
      if (f.size() != 6) continue;
      EpochRecord r;
      r.epoch = std::stoi(f[0]);
      r.ila = std::strtod(f[1].c_str(), nullptr);
      r.tla = std::strtod(f[2].c_str(), nullptr);
      r.cla = std::strtod(f[3].c_str(), nullptr);
      r.total = std::strtod(f[4].c_str(), nullptr);
      r.fitted_concepts = std::stoi(f[5]);
      ck.history.push_back(r);
    }
  }
  {
    std::ifstream in(dir / "state.txt");
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(0, eq);
      const auto val = line.substr(eq + 1);
      if (key == "learning_rate") ck.optimizer.learning_rate = std::strtod(val.c_str(), nullptr);
      else if (key == "beta1") ck.optimizer.beta1 = std::strtod(val.c_str(), nullptr);
      else if (key == "beta2") ck.optimizer.beta2 = std::strtod(val.c_str(), nullptr);
      else if (key == "epsilon") ck.optimizer.epsilon = std::strtod(val.c_str(), nullptr);
      else if (key == "steps") ck.optimizer_steps = std::stol(val);
      else if (key == "stage2_done") ck.stage2_done = val == "1";
      else if (key == "rng") ck.rng_state = val;
    }
  }
  return ck;
}

}  // namespace calign
