#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/datasets.hpp"
#include "calign/error.hpp"
#include "calign/image.hpp"
#include "calign/optim.hpp"
#include "calign/rng.hpp"

namespace calign {

struct EncoderConfig {
  int image_size = 64;
  int channels = 3;
  int width1 = 32;  // stem (4x4 patches, stride 4)
  int width2 = 64;
  int d_r = 32;     // region feature channels (third block)
  int d_v = 64;     // global feature channels (fourth block)
  int d_t = 32;     // raw token embedding width
  int d = 64;       // shared embedding space
  int grid_h = 4;
  int grid_w = 4;
  int vocab_size = 0;
  std::uint64_t seed = 0;
  /// Token embeddings stay frozen unless set, mirroring a frozen language model.
  bool train_token_embeddings = false;

  int regions() const { return grid_h * grid_w; }

  /// The region map is the third block's output at image_size / 16.
  void validate() const {
    if (d <= 0 || d_v <= 0 || d_r <= 0 || d_t <= 0 || width1 <= 0 || width2 <= 0 || channels <= 0) {
      throw ConfigError("encoder dimensions must be positive");
    }
    if (image_size % 16 != 0) throw ConfigError("image_size must be a multiple of 16");
    if (grid_h != image_size / 16 || grid_w != image_size / 16) {
      throw ConfigError("region grid must equal image_size/16 (" + std::to_string(image_size / 16) +
                        ") in each dimension");
    }
  }
};

struct VisualFeatures {
  ad::Var global_raw;   // 1 x d_v, spatial mean of the last block
  ad::Var regions_raw;  // R x d_r, third block, row-major cells
  ad::Var global;       // 1 x d, unit norm
  ad::Var regions;      // R x d, unit-norm rows
};

struct TextFeatures {
  ad::Var tokens_raw;     // W x d_t
  ad::Var aggregate_raw;  // 1 x d_t, token mean
  ad::Var global;         // 1 x d, unit norm
  ad::Var tokens;         // W x d, unit-norm rows
};

namespace detail {
inline Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * standard_normal(rng);
  return m;
}
}  // namespace detail

/// Four strided convolution blocks with ReLU. The third block's map is the
/// region feature grid; the spatial mean of the fourth is the global vector.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  explicit ImageEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg.seed, "image-encoder"));
    const auto geos = geometries();
    const int outs[4] = {cfg.width1, cfg.width2, cfg.d_r, cfg.d_v};
    for (int b = 0; b < 4; ++b) {
      const auto& g = geos[static_cast<std::size_t>(b)];
      const double std_he = std::sqrt(2.0 / g.patch_size());
      params_.add("img.conv" + std::to_string(b + 1) + ".w",
                  detail::random_normal(g.patch_size(), outs[b], std_he, rng));
      params_.add("img.conv" + std::to_string(b + 1) + ".b", Mat::Zero(1, outs[b]));
    }
    params_.add("img.proj_global", detail::random_normal(cfg.d_v, cfg.d, 1.0 / std::sqrt(cfg.d_v), rng));
    params_.add("img.proj_region", detail::random_normal(cfg.d_r, cfg.d, 1.0 / std::sqrt(cfg.d_r), rng));
  }

  const EncoderConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  std::array<ad::ConvGeometry, 4> geometries() const {
    const int s = cfg_.image_size;
    return {{
        {s, s, cfg_.channels, 4, 4, 0},
        {s / 4, s / 4, cfg_.width1, 3, 2, 1},
        {s / 8, s / 8, cfg_.width2, 3, 2, 1},
        {s / 16, s / 16, cfg_.d_r, 3, 2, 1},
    }};
  }

  VisualFeatures encode(const Image& image) const {
    if (image.height != cfg_.image_size || image.width != cfg_.image_size ||
        image.channels != cfg_.channels) {
      throw ConfigError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                        "x" + std::to_string(image.channels) + ", encoder expects " +
                        std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + "x" +
                        std::to_string(cfg_.channels));
    }
    const auto geos = geometries();
    const auto& p = params_.entries();
    ad::Var x(image.to_matrix());
    ad::Var maps[4];
    for (std::size_t b = 0; b < 4; ++b) {
      x = ad::relu(ad::conv2d(x, geos[b], p[2 * b].var, p[2 * b + 1].var));
      maps[b] = x;
    }
    VisualFeatures f;
    f.regions_raw = maps[2];
    f.global_raw = ad::mean_rows(maps[3]);
    f.global = ad::l2_normalize_rows(ad::matmul(f.global_raw, p[8].var));
    f.regions = ad::l2_normalize_rows(ad::matmul(f.regions_raw, p[9].var));
    return f;
  }

  /// Global features only, without recording a graph.
  RowVec global_features(const Image& image) const {
    ad::NoGradGuard guard;
    return encode(image).global_raw.value().row(0);
  }

  void freeze(bool frozen = true) {
    for (auto& e : params_.entries()) e.var.node()->requires_grad = !frozen;
  }

 private:
  EncoderConfig cfg_;
  ParameterSet params_;
};

/// Token string -> frozen vector table produced by an external language
/// model. Text format:
///   # calign-embedding-cache v1
///   model=<identifier>
///   dim=<d_t>
///   <token><TAB><v_1> <v_2> ... <v_dim>
struct EmbeddingCache {
  std::string model_id;
  int dim = 0;
  std::map<std::string, std::vector<double>> vectors;

  static EmbeddingCache load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw AdapterError("cannot open embedding cache " + path.string());
    EmbeddingCache cache;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# calign-embedding-cache", 0) != 0) {
      throw AdapterError("missing embedding cache header in " + path.string());
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.rfind("model=", 0) == 0) {
        cache.model_id = line.substr(6);
      } else if (line.rfind("dim=", 0) == 0) {
        cache.dim = std::stoi(line.substr(4));
      } else {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw AdapterError("malformed cache line: " + line);
        if (cache.dim <= 0) throw AdapterError("cache dim must precede vectors");
        std::istringstream vs(line.substr(tab + 1));
        std::vector<double> v;
        double x;
        while (vs >> x) v.push_back(x);
        if (static_cast<int>(v.size()) != cache.dim) {
          throw AdapterError("cache vector for '" + line.substr(0, tab) + "' has " +
                             std::to_string(v.size()) + " values, expected " + std::to_string(cache.dim));
        }
        cache.vectors[line.substr(0, tab)] = std::move(v);
      }
    }
    return cache;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw AdapterError("cannot write embedding cache " + path.string());
    out << "# calign-embedding-cache v1\nmodel=" << model_id << "\ndim=" << dim << '\n';
    out.precision(17);
    for (const auto& [tok, v] : vectors) {
      out << tok << '\t';
      for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
      out << '\n';
    }
  }
};

/// Token-embedding concept encoder. Either a seeded embedding table keyed by
/// token id, or a frozen table filled from an EmbeddingCache.
class TextEncoder {
 public:
  TextEncoder() = default;
  explicit TextEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    Rng rng(derive_seed(cfg.seed, "text-encoder"));
    params_.add("txt.embed", detail::random_normal(cfg.vocab_size, cfg.d_t, 1.0, rng),
                cfg.train_token_embeddings);
    init_projections(rng);
    present_.assign(static_cast<std::size_t>(cfg.vocab_size), true);
  }

  /// Adapter backend: rows come from `cache` by token string and are frozen.
  TextEncoder(EncoderConfig cfg, const EmbeddingCache& cache, const ConceptVocabulary& vocab)
      : cfg_(cfg) {
    cfg_.d_t = cache.dim;
    cfg_.vocab_size = vocab.token_count();
    cfg_.train_token_embeddings = false;
    adapter_model_ = cache.model_id;
    Mat table = Mat::Zero(cfg_.vocab_size, cfg_.d_t);
    present_.assign(static_cast<std::size_t>(cfg_.vocab_size), false);
    for (int id = 0; id < cfg_.vocab_size; ++id) {
      auto it = cache.vectors.find(vocab.token_string(id));
      if (it == cache.vectors.end()) continue;
      table.row(id) = Eigen::Map<const RowVec>(it->second.data(), cfg_.d_t);
      present_[static_cast<std::size_t>(id)] = true;
    }
    Rng rng(derive_seed(cfg_.seed, "text-encoder"));
    params_.add("txt.embed", std::move(table), false);
    init_projections(rng);
    vocab_words_.reserve(static_cast<std::size_t>(cfg_.vocab_size));
    for (int id = 0; id < cfg_.vocab_size; ++id) vocab_words_.push_back(vocab.token_string(id));
  }

  const EncoderConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  bool is_adapter() const { return adapter_model_.has_value(); }

  TextFeatures encode(const ConceptDocument& doc) const {
    if (doc.token_ids.empty()) throw VocabularyError("empty concept document");
    std::vector<Eigen::Index> ids;
    ids.reserve(doc.token_ids.size());
    for (int t : doc.token_ids) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
      }
      if (!present_[static_cast<std::size_t>(t)]) {
        throw AdapterError("token '" + vocab_words_[static_cast<std::size_t>(t)] +
                           "' missing from embedding cache of model " + *adapter_model_);
      }
      ids.push_back(t);
    }
    const auto& p = params_.entries();
    TextFeatures f;
    f.tokens_raw = ad::select_rows(p[0].var, std::move(ids));
    f.aggregate_raw = ad::mean_rows(f.tokens_raw);
    f.global = ad::l2_normalize_rows(ad::matmul(f.aggregate_raw, p[1].var));
    f.tokens = ad::l2_normalize_rows(ad::matmul(f.tokens_raw, p[2].var));
    return f;
  }

 private:
  void init_projections(Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.d_t));
    params_.add("txt.proj_global", detail::random_normal(cfg_.d_t, cfg_.d, s, rng));
    params_.add("txt.proj_token", detail::random_normal(cfg_.d_t, cfg_.d, s, rng));
  }

  EncoderConfig cfg_;
  ParameterSet params_;
  std::vector<bool> present_;
  std::optional<std::string> adapter_model_;
  std::vector<std::string> vocab_words_;
};

}  // namespace calign
