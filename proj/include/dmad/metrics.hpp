#pragma once

// Ranking metrics (AUROC, AP, F1max) and the per-region-overlap localization
// metric. Higher scores mean "more anomalous"; label 1 marks a positive.

#include <cstdint>
#include <span>
#include <vector>

#include "dmad/matrix.hpp"

namespace dmad {

// Mann-Whitney statistic with ties counted 1/2. Needs both classes.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Step integration of the PR curve, equal scores processed as one block.
// Needs at least one positive.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Best F1 over thresholds at every distinct score (positive iff score >= t).
double f1max(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct ProConfig {
  double fpr_limit = 0.3;
  int connectivity = 8;
};

// Mean per-region overlap integrated against the false-positive rate on
// normal pixels up to fpr_limit, normalized by fpr_limit.
double pro(std::span<const MatrixD> score_maps, std::span<const Matrix<std::uint8_t>> gt_masks,
           const ProConfig& cfg = {});

}  // namespace dmad
