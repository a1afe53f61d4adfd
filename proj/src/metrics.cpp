#include "dmad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmad/error.hpp"
#include "dmad/image_ops.hpp"

namespace dmad {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
  if (scores.size() != labels.size()) throw ValidationError(std::string(what) + ": scores and labels differ in length");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw ValidationError(std::string(what) + ": non-finite score");
    if (labels[i] > 1) throw ValidationError(std::string(what) + ": labels must be 0 or 1");
  }
}

std::size_t count_positive(std::span<const std::uint8_t> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

// Indices sorted by descending score; ties keep input order.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Calls fn(tp, fp) after each block of equal scores, walking from the top.
template <typename Fn>
void sweep_blocks(std::span<const double> scores, std::span<const std::uint8_t> labels, Fn&& fn) {
  const auto order = descending_order(scores);
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (labels[order[i]]) {
        ++tp;
      } else {
        ++fp;
      }
    }
    fn(tp, fp);
  }
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "auroc");
  const std::size_t pos = count_positive(labels);
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("auroc: both classes must be present");
  // Sum of positive ranks with average ranks for ties.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t block_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      block_pos += labels[order[j]];
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    rank_sum += avg_rank * static_cast<double>(block_pos);
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "average_precision");
  const std::size_t pos = count_positive(labels);
  if (pos == 0) throw ValidationError("average_precision: no positive labels");
  double ap = 0.0;
  std::size_t prev_tp = 0;
  sweep_blocks(scores, labels, [&](std::size_t tp, std::size_t fp) {
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += static_cast<double>(tp - prev_tp) * precision;
    prev_tp = tp;
  });
  return ap / static_cast<double>(pos);
}

double f1max(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "f1max");
  const std::size_t pos = count_positive(labels);
  if (pos == 0) throw ValidationError("f1max: no positive labels");
  double best = 0.0;
  sweep_blocks(scores, labels, [&](std::size_t tp, std::size_t fp) {
    const std::size_t fn = pos - tp;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    best = std::max(best, f1);
  });
  return best;
}

double pro(std::span<const MatrixD> score_maps, std::span<const Matrix<std::uint8_t>> gt_masks, const ProConfig& cfg) {
  if (score_maps.size() != gt_masks.size()) throw ValidationError("pro: one mask per score map");
  if (!(cfg.fpr_limit > 0.0 && cfg.fpr_limit <= 1.0)) throw ValidationError("pro: fpr_limit must be in (0, 1]");

  // Flatten pixels; region id -1 marks normal pixels.
  std::vector<double> scores;
  std::vector<std::int64_t> region;
  std::vector<double> region_size;
  for (std::size_t m = 0; m < score_maps.size(); ++m) {
    const auto& s = score_maps[m];
    const auto& g = gt_masks[m];
    if (s.rows() != g.rows() || s.cols() != g.cols()) throw ValidationError("pro: score map and mask shapes differ");
    const auto comps = label_components(g, cfg.connectivity);
    const auto base = static_cast<std::int64_t>(region_size.size());
    region_size.resize(region_size.size() + static_cast<std::size_t>(comps.count), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double v = s.data()[k];
      if (!std::isfinite(v)) throw ValidationError("pro: non-finite score");
      scores.push_back(v);
      const std::int32_t lab = comps.labels.data()[k];
      if (lab > 0) {
        const std::int64_t id = base + lab - 1;
        region.push_back(id);
        region_size[static_cast<std::size_t>(id)] += 1.0;
      } else {
        region.push_back(-1);
      }
    }
  }
  if (region_size.empty()) throw ValidationError("pro: no anomalous pixels");
  const auto normal_count = static_cast<double>(std::count(region.begin(), region.end(), std::int64_t{-1}));
  if (normal_count == 0.0) throw ValidationError("pro: no normal pixels to measure false positives");
  const double regions = static_cast<double>(region_size.size());

  // Curve points (fpr, mean overlap), one per distinct threshold, from (0, 0).
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  const auto order = descending_order(scores);
  double overlap_sum = 0.0;
  double fp = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      const auto id = region[order[i]];
      if (id < 0) {
        fp += 1.0;
      } else {
        overlap_sum += 1.0 / region_size[static_cast<std::size_t>(id)];
      }
    }
    curve.emplace_back(fp / normal_count, overlap_sum / regions);
  }

  double area = 0.0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    const auto [x0, y0] = curve[k - 1];
    auto [x1, y1] = curve[k];
    if (x0 >= cfg.fpr_limit) break;
    if (x1 > cfg.fpr_limit) {
      y1 = y0 + (y1 - y0) * (cfg.fpr_limit - x0) / (x1 - x0);
      x1 = cfg.fpr_limit;
    }
    area += 0.5 * (x1 - x0) * (y0 + y1);
  }
  return area / cfg.fpr_limit;
}

}  // namespace dmad
