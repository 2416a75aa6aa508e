#pragma once

// JSON export of explanations. Kept apart from the core headers so that only
// code which writes explanations needs the JSON dependency.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "calign/bottleneck.hpp"
#include "calign/image.hpp"

namespace calign {

inline nlohmann::json to_json(const Explanation& ex) {
  nlohmann::json j;
  j["id"] = ex.id;
  j["predicted_class"] = ex.predicted_class;
  j["class_name"] = ex.class_name;
  j["sentence"] = ex.sentence;
  auto& arr = j["concepts"] = nlohmann::json::array();
  for (const auto& c : ex.concepts) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["score"] = c.score;
    cj["term"] = c.term;
    cj["contribution_pct"] = c.contribution_pct;
    cj["positive_influence"] = c.positive_influence;
    auto& grid = cj["localization"] = nlohmann::json::array();
    for (Eigen::Index r = 0; r < c.localization.rows(); ++r) {
      std::vector<double> row(c.localization.cols());
      for (Eigen::Index q = 0; q < c.localization.cols(); ++q) row[static_cast<std::size_t>(q)] = c.localization(r, q);
      grid.push_back(row);
    }
    arr.push_back(std::move(cj));
  }
  return j;
}

/// Writes `<id>.json` into `dir`, plus one heat-map overlay PNG per concept
/// (`<id>_<k>.png`) when `image` is given.
inline void export_explanation(const std::filesystem::path& dir, const Explanation& ex, const Image* image = nullptr) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / (ex.id + ".json"));
  if (!out) throw ConfigError("cannot write explanation to " + dir.string());
  out << to_json(ex).dump(2) << '\n';
  if (!image) return;
  for (std::size_t k = 0; k < ex.concepts.size(); ++k) {
    write_png(dir / (ex.id + "_" + std::to_string(k) + ".png"), heatmap_overlay(*image, ex.concepts[k].localization));
  }
}

}  // namespace calign
