#pragma once

// Synthetic multi-object patch-feature datasets with rectangular defects.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmad/feature_store.hpp"

namespace dmad {

struct SynthSpec {
  std::size_t num_objects = 3;
  std::size_t train_normal = 40;
  std::size_t test_normal = 10;
  std::size_t test_anomalous = 10;
  std::size_t seen_anomalies = 0;  // annotated anomalous images per object in the train split
  std::uint32_t h0 = 8;
  std::uint32_t w0 = 8;
  std::uint32_t c = 16;
  double cluster_spread = 0.1;
  double center_std = 1.0;  // cluster centers ~ N(0, center_std^2) per coordinate
  double anomaly_shift = 1.5;
  double defect_patch_fraction = 0.05;
  std::size_t outlier_images = 8;
  std::uint32_t patch_px = 8;  // pixels per patch side in masks and source size
  std::size_t defect_directions = 3;
  double outlier_std = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

SynthSpec synth_spec_from_json(const std::string& text);
std::string synth_spec_to_json(const SynthSpec& spec);

struct DefectPlacement {
  std::string object_id;
  std::string image_id;
  SplitRole split = SplitRole::test;
  std::uint32_t row = 0;  // top-left patch
  std::uint32_t col = 0;
  std::uint32_t height = 0;  // in patches
  std::uint32_t width = 0;
  std::size_t direction = 0;  // index into the shared direction pool
};

struct SynthDataset {
  DatasetManifest train;
  DatasetManifest test;
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path outlier_dir;
  std::vector<std::filesystem::path> outliers;
  std::vector<DefectPlacement> defects;
  // Cluster centers, one row per object.
  std::vector<std::vector<float>> centers;
};

// Writes train/, test/, outliers/, train.json, test.json and synth_spec.json
// under out_dir. Byte-identical output for identical specs.
SynthDataset generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

// Defect block side lengths (in patches) for the spec's grid.
std::pair<std::uint32_t, std::uint32_t> defect_block_size(const SynthSpec& spec);

}  // namespace dmad
