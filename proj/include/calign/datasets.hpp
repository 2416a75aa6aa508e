#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "calign/csv.hpp"
#include "calign/error.hpp"
#include "calign/image.hpp"
#include "calign/rng.hpp"

namespace calign {

enum class Split { Train, Val, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val" || s == "valid" || s == "validation") return Split::Val;
  if (s == "test") return Split::Test;
  throw SchemaError("unknown split: " + std::string(s));
}

struct ImageSample {
  std::string id;
  Image image;
  std::vector<int> concepts;  // 0/1 per concept
  int diagnosis = 0;
  Split split = Split::Train;
  /// Region-grid cell holding each concept's motif, -1 when absent or unknown.
  std::vector<int> concept_cells;
};

/// One binary concept column. Fine-grained labels of a criterion (for
/// example typical vs atypical pigment network) are separate entries that
/// share a criterion.
struct ConceptEntry {
  std::string criterion;
  std::string fine_label;
  std::string phrase;
  std::vector<int> token_ids;
};

/// Lower-cased whitespace tokenization.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Ordered concept set plus the word-level token table its phrases use.
/// Token ids 0 and 1 are reserved for the "no findings" fallback phrase.
class ConceptVocabulary {
 public:
  static constexpr std::string_view kFallbackPhrase = "no findings";

  ConceptVocabulary() {
    for (const auto& w : tokenize(kFallbackPhrase)) fallback_.push_back(intern(w));
  }

  int add(std::string criterion, std::string fine_label, std::string phrase) {
    auto words = tokenize(phrase);
    if (words.empty()) throw ConfigError("concept phrase must not be empty");
    ConceptEntry e{std::move(criterion), std::move(fine_label), std::move(phrase), {}};
    for (const auto& w : words) e.token_ids.push_back(intern(w));
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  const ConceptEntry& entry(int k) const { return entries_.at(static_cast<std::size_t>(k)); }
  const std::vector<ConceptEntry>& entries() const { return entries_; }
  const std::vector<int>& fallback_tokens() const { return fallback_; }

  int token_count() const { return static_cast<int>(words_.size()); }
  const std::string& token_string(int id) const {
    if (id < 0 || id >= token_count()) throw VocabularyError("unknown token id " + std::to_string(id));
    return words_[static_cast<std::size_t>(id)];
  }
  std::optional<int> token_id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  /// Distinct criteria in first-appearance order.
  std::vector<std::string> criteria() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (std::find(out.begin(), out.end(), e.criterion) == out.end()) out.push_back(e.criterion);
    return out;
  }

 private:
  int intern(const std::string& w) {
    auto [it, inserted] = ids_.emplace(w, static_cast<int>(words_.size()));
    if (inserted) words_.push_back(w);
    return it->second;
  }

  std::vector<ConceptEntry> entries_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> fallback_;
};

struct ConceptDocument {
  std::vector<int> token_ids;
  /// Concept index for each token position, -1 for filler tokens.
  std::vector<int> token_to_concept;

  int size() const { return static_cast<int>(token_ids.size()); }
};

/// Concatenates the phrases of every positive concept in vocabulary order;
/// an all-negative label vector yields the fallback phrase.
inline ConceptDocument build_concept_document(std::span<const int> concepts,
                                              const ConceptVocabulary& vocab) {
  if (static_cast<int>(concepts.size()) != vocab.size()) {
    throw SchemaError("concept vector length does not match vocabulary");
  }
  ConceptDocument doc;
  for (int k = 0; k < vocab.size(); ++k) {
    if (!concepts[static_cast<std::size_t>(k)]) continue;
    for (int t : vocab.entry(k).token_ids) {
      doc.token_ids.push_back(t);
      doc.token_to_concept.push_back(k);
    }
  }
  if (doc.token_ids.empty()) {
    doc.token_ids = vocab.fallback_tokens();
    doc.token_to_concept.assign(doc.token_ids.size(), -1);
  }
  return doc;
}

inline ConceptDocument build_concept_document(const ImageSample& sample,
                                              const ConceptVocabulary& vocab) {
  return build_concept_document(std::span<const int>(sample.concepts), vocab);
}

/// Document holding only concept k's phrase.
inline ConceptDocument phrase_document(const ConceptVocabulary& vocab, int k) {
  ConceptDocument doc;
  doc.token_ids = vocab.entry(k).token_ids;
  doc.token_to_concept.assign(doc.token_ids.size(), k);
  return doc;
}

/// Samples grouped contiguously by split (train, val, test).
struct Dataset {
  ConceptVocabulary vocab;
  std::vector<std::string> class_names;
  std::vector<ImageSample> samples;

  int num_concepts() const { return vocab.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  void sort_by_split() {
    std::stable_sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) {
      return static_cast<int>(a.split) < static_cast<int>(b.split);
    });
  }

  std::span<const ImageSample> split(Split s) const {
    auto lo = std::find_if(samples.begin(), samples.end(), [s](const auto& x) { return x.split == s; });
    auto hi = std::find_if(lo, samples.end(), [s](const auto& x) { return x.split != s; });
    return {samples.data() + (lo - samples.begin()), static_cast<std::size_t>(hi - lo)};
  }
};

/// Read access to samples that counts every diagnosis-label lookup. The
/// concept-alignment stage consumes data through this view.
class ConceptLabelView {
 public:
  explicit ConceptLabelView(std::span<const ImageSample> samples) : samples_(samples) {}

  std::size_t size() const { return samples_.size(); }
  const std::string& id(std::size_t i) const { return samples_[i].id; }
  const Image& image(std::size_t i) const { return samples_[i].image; }
  const std::vector<int>& concepts(std::size_t i) const { return samples_[i].concepts; }
  int diagnosis(std::size_t i) const {
    ++diagnosis_reads_;
    return samples_[i].diagnosis;
  }
  long diagnosis_reads() const { return diagnosis_reads_.load(); }

 private:
  std::span<const ImageSample> samples_;
  mutable std::atomic<long> diagnosis_reads_{0};
};

// ---------------------------------------------------------------------------
// CSV manifests

struct ManifestOptions {
  int image_size = 64;
  int channels = 3;
  /// Class names in id order. Empty: discovered in order of first appearance.
  std::vector<std::string> classes;
  /// Raw diagnosis string -> class name, applied before class lookup.
  std::map<std::string, std::string> label_aliases;
  /// When non-empty, rows whose (aliased) diagnosis is not listed are dropped.
  std::vector<std::string> keep_classes;
  /// Concept columns with fewer positives (over kept rows) are dropped.
  int min_concept_support = 0;
};

namespace detail {
inline ConceptEntry parse_concept_header(const std::string& column) {
  ConceptEntry e;
  const auto colon = column.find(':');
  if (colon == std::string::npos) {
    e.criterion = column;
    e.phrase = column;
  } else {
    e.criterion = column.substr(0, colon);
    e.phrase = column.substr(colon + 1);
  }
  e.fine_label = e.phrase;
  return e;
}
}  // namespace detail

/// Loads `id,image_path,split,diagnosis,<concept columns...>`. Concept columns
/// are named by phrase, optionally prefixed with `criterion:`. Image paths are
/// relative to the manifest's directory.
inline Dataset load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {}) {
  const auto table = csv::read(path.string());
  const std::vector<std::string> fixed{"id", "image_path", "split", "diagnosis"};
  if (table.header.size() < fixed.size() ||
      !std::equal(fixed.begin(), fixed.end(), table.header.begin())) {
    throw SchemaError("manifest header must start with id,image_path,split,diagnosis");
  }
  const std::size_t n_concepts = table.header.size() - fixed.size();

  Dataset ds;
  ds.class_names = options.classes;
  auto class_of = [&](const std::string& raw, std::size_t row) -> std::optional<int> {
    std::string label = raw;
    if (auto it = options.label_aliases.find(raw); it != options.label_aliases.end()) label = it->second;
    if (!options.keep_classes.empty() &&
        std::find(options.keep_classes.begin(), options.keep_classes.end(), label) ==
            options.keep_classes.end()) {
      return std::nullopt;
    }
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it != ds.class_names.end()) return static_cast<int>(it - ds.class_names.begin());
    if (!options.classes.empty()) {
      throw SchemaError("row " + std::to_string(row + 1) + ": unknown diagnosis '" + raw + "'");
    }
    ds.class_names.push_back(label);
    return static_cast<int>(ds.class_names.size()) - 1;
  };

  struct Row {
    std::size_t index;
    int diagnosis;
  };
  std::vector<Row> kept;
  std::vector<int> support(n_concepts, 0);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    auto cls = class_of(table.rows[r][3], r);
    if (!cls) continue;
    kept.push_back({r, *cls});
    for (std::size_t k = 0; k < n_concepts; ++k) {
      const auto& v = table.rows[r][fixed.size() + k];
      if (v != "0" && v != "1") {
        throw SchemaError("row " + std::to_string(r + 1) + ": concept value must be 0 or 1, got '" + v + "'");
      }
      support[k] += v == "1";
    }
  }

  std::vector<std::size_t> concept_columns;
  for (std::size_t k = 0; k < n_concepts; ++k) {
    if (support[k] < options.min_concept_support) continue;
    auto e = detail::parse_concept_header(table.header[fixed.size() + k]);
    ds.vocab.add(e.criterion, e.fine_label, e.phrase);
    concept_columns.push_back(k);
  }

  const auto base = path.parent_path();
  for (const auto& row : kept) {
    const auto& fields = table.rows[row.index];
    ImageSample s;
    s.id = fields[0];
    s.split = parse_split(fields[2]);
    s.diagnosis = row.diagnosis;
    const auto image_path = base / fields[1];
    if (!std::filesystem::exists(image_path)) {
      throw IngestionError("row " + std::to_string(row.index + 1) + " (id " + s.id +
                           "): missing image file " + image_path.string());
    }
    try {
      s.image = resize_bilinear(load_image(image_path, options.channels), options.image_size,
                                options.image_size);
    } catch (const IngestionError& e) {
      throw IngestionError("row " + std::to_string(row.index + 1) + " (id " + s.id + "): " + e.what());
    }
    for (auto k : concept_columns) s.concepts.push_back(fields[fixed.size() + k] == "1");
    s.concept_cells.assign(s.concepts.size(), -1);
    ds.samples.push_back(std::move(s));
  }
  ds.sort_by_split();
  return ds;
}

/// Writes every sample as PNG under `dir/images` plus `dir/manifest.csv`.
inline void write_manifest(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir / "images");
  csv::Table t;
  t.header = {"id", "image_path", "split", "diagnosis"};
  for (const auto& e : ds.vocab.entries()) {
    t.header.push_back(e.criterion == e.phrase ? e.phrase : e.criterion + ":" + e.phrase);
  }
  for (const auto& s : ds.samples) {
    const std::string rel = "images/" + s.id + ".png";
    write_png(dir / rel, s.image);
    std::vector<std::string> row{s.id, rel, std::string(to_string(s.split)),
                                 ds.class_names.at(static_cast<std::size_t>(s.diagnosis))};
    for (int c : s.concepts) row.push_back(c ? "1" : "0");
    t.rows.push_back(std::move(row));
  }
  csv::write((dir / "manifest.csv").string(), t);
}

// ---------------------------------------------------------------------------
// Synthetic motif dataset

struct SynthConfig {
  int n_train = 600;
  int n_val = 150;
  int n_test = 300;
  int num_concepts = 6;
  int image_size = 64;
  int grid = 4;
  int motif_size = 10;
  double concept_prob = 0.35;
  int num_classes = 2;
  std::uint64_t seed = 0;
};

enum class MotifShape { Disk, Stripes, Ring, Cross, Square, Dots, Diagonal, Checker };

struct MotifSpec {
  MotifShape shape;
  std::array<double, 3> color;
  const char* phrase;
};

inline constexpr std::array<MotifSpec, 8> kMotifs{{
    {MotifShape::Disk, {0.10, 0.20, 0.90}, "blue disk"},
    {MotifShape::Stripes, {0.90, 0.10, 0.10}, "red stripes"},
    {MotifShape::Ring, {0.10, 0.80, 0.20}, "green ring"},
    {MotifShape::Cross, {0.95, 0.90, 0.10}, "yellow cross"},
    {MotifShape::Square, {0.85, 0.10, 0.85}, "magenta square"},
    {MotifShape::Dots, {0.10, 0.85, 0.90}, "cyan dots"},
    {MotifShape::Diagonal, {1.00, 1.00, 1.00}, "white diagonal"},
    {MotifShape::Checker, {0.05, 0.05, 0.05}, "black checker"},
}};

/// Label rule of the synthetic data. Two classes: positive iff concept 0 is
/// present or at least two of concepts 1..3 are. Three classes: that rule
/// gives class 2; otherwise concept 4 or 5 gives class 1; else class 0.
inline int synthetic_diagnosis(std::span<const int> c, int num_classes = 2) {
  auto at = [&c](std::size_t k) { return k < c.size() ? c[k] : 0; };
  const bool positive = at(0) || (at(1) + at(2) + at(3)) >= 2;
  if (num_classes == 2) return positive ? 1 : 0;
  if (positive) return 2;
  return (at(4) || at(5)) ? 1 : 0;
}

namespace detail {
inline bool motif_pixel(MotifShape shape, int y, int x, int size) {
  const double c = (size - 1) / 2.0;
  const double dy = y - c;
  const double dx = x - c;
  const double r = std::sqrt(dy * dy + dx * dx);
  switch (shape) {
    case MotifShape::Disk: return r <= size / 2.0;
    case MotifShape::Stripes: return y % 3 == 0;
    case MotifShape::Ring: return r <= size / 2.0 && r >= size / 2.0 - 2.0;
    case MotifShape::Cross: return std::abs(dy) <= 1.0 || std::abs(dx) <= 1.0;
    case MotifShape::Square: return true;
    case MotifShape::Dots: return y % 4 < 2 && x % 4 < 2;
    case MotifShape::Diagonal: return std::abs(y - x) <= 1 || std::abs(y + x - (size - 1)) <= 1;
    case MotifShape::Checker: return ((y / 2) + (x / 2)) % 2 == 0;
  }
  return false;
}
}  // namespace detail

/// Draws one synthetic sample from its own seed. Concept motifs land in
/// distinct grid cells, each fully inside its cell.
inline ImageSample render_synthetic(const SynthConfig& cfg, std::uint64_t sample_seed,
                                    std::span<const int> concepts) {
  Rng rng(sample_seed);
  ImageSample s;
  s.concepts.assign(concepts.begin(), concepts.end());
  s.concept_cells.assign(concepts.size(), -1);
  Image img(cfg.image_size, cfg.image_size, 3);
  const std::array<double, 3> skin{0.78 + 0.06 * (uniform01(rng) - 0.5), 0.56, 0.45};
  const double blob_y = uniform01(rng) * cfg.image_size;
  const double blob_x = uniform01(rng) * cfg.image_size;
  const double blob_r = cfg.image_size * (0.25 + 0.2 * uniform01(rng));
  for (int y = 0; y < cfg.image_size; ++y) {
    for (int x = 0; x < cfg.image_size; ++x) {
      const double d = std::hypot(y - blob_y, x - blob_x) / blob_r;
      const double lesion = d < 1.0 ? 0.25 * (1.0 - d) : 0.0;
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = skin[static_cast<std::size_t>(c)] * (1.0 - lesion) + 0.04 * (uniform01(rng) - 0.5);
      }
    }
  }
  const int cells = cfg.grid * cfg.grid;
  std::vector<int> free_cells(static_cast<std::size_t>(cells));
  for (int i = 0; i < cells; ++i) free_cells[static_cast<std::size_t>(i)] = i;
  shuffle(free_cells, rng);
  const int cell_px = cfg.image_size / cfg.grid;
  std::size_t next = 0;
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    if (!concepts[k]) continue;
    const int cell = free_cells[next++];
    s.concept_cells[k] = cell;
    const int slack = cell_px - cfg.motif_size;
    const int oy = (cell / cfg.grid) * cell_px + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(slack + 1)));
    const int ox = (cell % cfg.grid) * cell_px + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(slack + 1)));
    const auto& motif = kMotifs[k];
    for (int y = 0; y < cfg.motif_size; ++y)
      for (int x = 0; x < cfg.motif_size; ++x)
        if (detail::motif_pixel(motif.shape, y, x, cfg.motif_size))
          for (int c = 0; c < 3; ++c) img.at(oy + y, ox + x, c) = motif.color[static_cast<std::size_t>(c)];
  }
  quantize8(img);
  s.image = std::move(img);
  return s;
}

inline void validate(const SynthConfig& cfg) {
  if (cfg.num_concepts < 1 || cfg.num_concepts > static_cast<int>(kMotifs.size())) {
    throw ConfigError("synthetic data supports 1..8 concepts");
  }
  if (cfg.grid < 1 || cfg.image_size % cfg.grid != 0) throw ConfigError("grid must divide image size");
  if (cfg.motif_size < 1 || cfg.motif_size > cfg.image_size / cfg.grid) {
    throw ConfigError("motif larger than a grid cell");
  }
  if (cfg.num_concepts > cfg.grid * cfg.grid) throw ConfigError("more concepts than grid cells");
  if (cfg.num_classes != 2 && cfg.num_classes != 3) throw ConfigError("synthetic data has 2 or 3 classes");
  if (!(cfg.concept_prob >= 0.0 && cfg.concept_prob <= 1.0)) throw ConfigError("concept_prob must be in [0,1]");
  if (cfg.n_train < 0 || cfg.n_val < 0 || cfg.n_test < 0) throw ConfigError("split sizes must be >= 0");
}

inline Dataset generate_synthetic(const SynthConfig& cfg) {
  validate(cfg);
  Dataset ds;
  for (int k = 0; k < cfg.num_concepts; ++k) {
    const auto& m = kMotifs[static_cast<std::size_t>(k)];
    ds.vocab.add("G" + std::to_string(k / 2), m.phrase, m.phrase);
  }
  ds.class_names = cfg.num_classes == 2
                       ? std::vector<std::string>{"benign", "malignant"}
                       : std::vector<std::string>{"non-neoplastic", "benign", "malignant"};
  const int total = cfg.n_train + cfg.n_val + cfg.n_test;
  std::vector<int> order(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng(derive_seed(cfg.seed, "split"));
  shuffle(order, split_rng);
  std::vector<Split> split_of(static_cast<std::size_t>(total));
  for (int r = 0; r < total; ++r) {
    split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
        r < cfg.n_train ? Split::Train : (r < cfg.n_train + cfg.n_val ? Split::Val : Split::Test);
  }
  ds.samples.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    const auto sample_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng label_rng(derive_seed(sample_seed, "labels"));
    std::vector<int> concepts(static_cast<std::size_t>(cfg.num_concepts));
    for (auto& c : concepts) c = uniform01(label_rng) < cfg.concept_prob ? 1 : 0;
    auto s = render_synthetic(cfg, derive_seed(sample_seed, "pixels"), concepts);
    char id[32];
    std::snprintf(id, sizeof(id), "syn%05d", i);
    s.id = id;
    s.diagnosis = synthetic_diagnosis(concepts, cfg.num_classes);
    s.split = split_of[static_cast<std::size_t>(i)];
    ds.samples.push_back(std::move(s));
  }
  ds.sort_by_split();
  return ds;
}

}  // namespace calign
