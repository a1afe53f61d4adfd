#include "dmad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dmad/binary_io.hpp"

namespace dmad {

std::vector<double> TrainResult::epoch_means() const {
  std::vector<double> sums;
  std::vector<std::size_t> counts;
  for (const auto& row : log) {
    if (row.epoch >= sums.size()) {
      sums.resize(row.epoch + 1, 0.0);
      counts.resize(row.epoch + 1, 0);
    }
    sums[row.epoch] += row.terms.total;
    counts[row.epoch] += 1;
  }
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= static_cast<double>(std::max<std::size_t>(counts[i], 1));
  return sums;
}

TrainResult train(std::span<const FeatureGrid> normal_grids, std::span<const AnomalousSample> anomalies,
                  const DualMemoryBank& dual, const TrainSettings& settings) {
  const auto& tc = settings.train;
  if (normal_grids.empty()) throw ValidationError("train: empty training set");
  if (tc.epochs < 1 || tc.batch_size < 1) throw ValidationError("train: epochs and batch_size must be >= 1");
  dual.validate();
  const bool semi = tc.mode == Mode::semi_supervised;
  if (semi && anomalies.empty()) throw ValidationError("train: semi-supervised mode needs annotated anomalies");
  if (semi && settings.loss.lambda2 <= 0.0) throw ValidationError("train: semi-supervised mode needs lambda2 > 0");

  const std::size_t c = dual.normal.c();
  for (const auto& g : normal_grids) {
    if (g.c != c) throw ValidationError("train: feature channels do not match the banks");
  }

  // Bank contents and features are fixed, so neighbors are computed once.
  std::vector<PatchNeighbors<float>> normal_inputs(normal_grids.size());
  for (std::size_t i = 0; i < normal_grids.size(); ++i) {
    normal_inputs[i] = find_neighbors(normal_grids[i].features, dual, tc.threads);
  }
  std::vector<PatchNeighbors<float>> anomalous_inputs;
  if (semi) {
    for (const auto& a : anomalies) {
      if (a.patches.rows() == 0) continue;
      anomalous_inputs.push_back(find_neighbors(a.patches, dual, tc.threads));
    }
    if (anomalous_inputs.empty()) throw ValidationError("train: no anomalous patches after filtering");
  }

  ModelShape shape = settings.shape;
  shape.c = c;
  TrainResult result;
  auto& ckpt = result.checkpoint;
  ckpt.params = init_model<float>(shape, tc.seed);
  ckpt.knowledge = settings.knowledge;
  ckpt.mode = tc.mode;
  ckpt.optimizer = make_optimizer(ckpt.params, settings.optimizer);

  std::mt19937_64 order_rng(tc.seed ^ 0x5bd1e995ULL);
  std::mt19937_64 noise_rng(settings.augment.seed);
  std::vector<std::size_t> normal_order(normal_inputs.size());
  std::vector<std::size_t> anomaly_order(anomalous_inputs.size());
  std::iota(normal_order.begin(), normal_order.end(), 0);
  std::iota(anomaly_order.begin(), anomaly_order.end(), 0);
  const std::size_t steps = (normal_inputs.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t anomalies_per_step =
      anomalous_inputs.empty() ? 0 : (anomalous_inputs.size() + steps - 1) / steps;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(normal_order.begin(), normal_order.end(), order_rng);
    std::shuffle(anomaly_order.begin(), anomaly_order.end(), order_rng);
    std::size_t anomaly_cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      TrainBatch<float> batch;
      const std::size_t begin = step * tc.batch_size;
      const std::size_t end = std::min(normal_order.size(), begin + tc.batch_size);
      for (std::size_t k = begin; k < end; ++k) {
        const auto& in = normal_inputs[normal_order[k]];
        batch.normal.push_back(in);
        batch.noise.push_back(gaussian_noise<float>(in.q.rows(), 3 * c, settings.augment.noise_std, noise_rng));
      }
      for (std::size_t k = 0; k < anomalies_per_step; ++k) {
        batch.anomalous.push_back(anomalous_inputs[anomaly_order[anomaly_cursor % anomaly_order.size()]]);
        ++anomaly_cursor;
      }
      auto grads = zeros_like(ckpt.params);
      const LossTerms terms =
          batch_loss(ckpt.params, batch, settings.knowledge, settings.loss, &grads, true, tc.threads);
      if (!std::isfinite(terms.total)) {
        throw NumericError(fmt::format("train: non-finite loss at epoch {} step {}", epoch, step));
      }
      optimizer_step(ckpt.params, grads, ckpt.optimizer);
      result.log.push_back({epoch, step, terms});
    }
    const auto means = result.epoch_means();
    spdlog::info("epoch {}/{} mean loss {:.6f}", epoch + 1, tc.epochs, means.back());
  }
  return result;
}

TrainResult train(const DatasetManifest& manifest, const DualMemoryBank& dual, const TrainSettings& settings) {
  std::vector<FeatureGrid> normals;
  for (const auto& e : manifest.with_label(Label::normal)) normals.push_back(read_feature_file(e.feature_path));
  std::vector<AnomalousSample> anomalies;
  if (settings.train.mode == Mode::semi_supervised) {
    for (const auto& e : manifest.with_label(Label::anomalous)) {
      if (!e.mask_path) throw ValidationError("train: anomalous entry lacks mask: " + e.feature_path.string());
      const auto grid = read_feature_file(e.feature_path);
      if (settings.apply_filter) {
        const auto mask = read_mask_file(*e.mask_path);
        anomalies.push_back({filter_anomalous(grid, downscale_mask(mask, grid.h0, grid.w0))});
      } else {
        anomalies.push_back({grid.features});
      }
    }
  }
  return train(std::span<const FeatureGrid>(normals), std::span<const AnomalousSample>(anomalies), dual, settings);
}

void write_loss_log(const std::vector<LossLogRow>& log, const std::filesystem::path& path) {
  std::string text = "epoch,step,loss,term_n,term_p,term_a\n";
  for (const auto& row : log) {
    text += fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g}\n", row.epoch, row.step, row.terms.total,
                        row.terms.term_n, row.terms.term_p, row.terms.term_a);
  }
  io::write_text_atomic(path, text);
}

}  // namespace dmad
