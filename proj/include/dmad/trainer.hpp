#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dmad/checkpoint.hpp"
#include "dmad/feature_store.hpp"
#include "dmad/memory_bank.hpp"

namespace dmad {

struct TrainConfig {
  std::size_t epochs = 48;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Mode mode = Mode::unsupervised;
  int threads = 1;
};

struct TrainSettings {
  TrainConfig train;
  ModelShape shape;  // shape.c is taken from the data
  KnowledgeMode knowledge;
  LossConfig loss;
  AugmentConfig augment;
  OptimizerConfig optimizer;
  // Keep only mask-flagged patches of seen anomalies; false feeds every patch.
  bool apply_filter = true;
};

struct LossLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossTerms terms;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossLogRow> log;

  // Mean total loss of each epoch, in order.
  std::vector<double> epoch_means() const;
};

// Anomalous training inputs: the patches of one seen anomaly that feed the
// o_a branch (flagged patches only when the filter is on).
struct AnomalousSample {
  MatrixF patches;
};

TrainResult train(std::span<const FeatureGrid> normal_grids, std::span<const AnomalousSample> anomalies,
                  const DualMemoryBank& dual, const TrainSettings& settings);

// Loads the manifest's normal images and (semi-supervised mode) its
// anomalous images with masks, then trains.
TrainResult train(const DatasetManifest& manifest, const DualMemoryBank& dual, const TrainSettings& settings);

void write_loss_log(const std::vector<LossLogRow>& log, const std::filesystem::path& path);

}  // namespace dmad
