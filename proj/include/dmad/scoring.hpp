#pragma once

// Image scores, full-resolution anomaly maps and per-object evaluation.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmad/checkpoint.hpp"
#include "dmad/feature_store.hpp"
#include "dmad/memory_bank.hpp"
#include "dmad/metrics.hpp"

namespace dmad {

// Mean of the five largest values, or of all values when fewer than five.
double image_score(std::span<const double> patch_scores);

// Bilinear upsampling of an h0 x w0 score grid to h x w followed by a
// Gaussian blur; blur_sigma == 0 skips the blur.
MatrixD pixel_map(const MatrixD& patch_scores, std::size_t h, std::size_t w, double blur_sigma);

struct ScoreMap {
  std::string object_id;
  std::string image_id;
  std::uint32_t h0 = 0;
  std::uint32_t w0 = 0;
  std::vector<double> patch_scores;
  double image_score = 0.0;
  std::optional<MatrixD> pixel_map;  // source_h x source_w
};

struct EvalConfig {
  double blur_sigma = 4.0;
  ProConfig pro;
  int threads = 1;
};

ScoreMap score_image(const FeatureGrid& grid, const Checkpoint& ckpt, const DualMemoryBank& dual,
                     const EvalConfig& cfg, bool with_pixel_map);

// Writes a pixel map as a single-channel .dmft grid.
void write_pixel_map(const ScoreMap& map, const std::filesystem::path& path);

// Metrics that cannot be computed (single-class object) are absent.
struct MetricSet {
  std::optional<double> image_auroc;
  std::optional<double> image_ap;
  std::optional<double> image_f1max;
  std::optional<double> pixel_auroc;
  std::optional<double> pixel_ap;
  std::optional<double> pixel_f1max;
  std::optional<double> pro;
};

struct ObjectReport {
  std::string object_id;
  std::size_t normal_images = 0;
  std::size_t anomalous_images = 0;
  MetricSet metrics;
};

struct ImageResult {
  std::string object_id;
  std::string image_id;
  Label label = Label::normal;
  double image_score = 0.0;
};

struct EvalReport {
  std::vector<ObjectReport> objects;  // sorted by object id
  MetricSet mean;                     // unweighted mean over objects with the metric present
  std::vector<ImageResult> images;    // sorted by object id, then image id
};

EvalReport evaluate(const DatasetManifest& test, const Checkpoint& ckpt, const DualMemoryBank& dual,
                    const EvalConfig& cfg);

std::string report_to_json(const EvalReport& report);
// One row per object plus a final mean row; metrics in percent.
std::string report_to_csv(const EvalReport& report);
std::string image_scores_csv(const EvalReport& report);

}  // namespace dmad
