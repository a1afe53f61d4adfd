#pragma once

// Hand-built scorer for synthetic data: identity projection, no attention,
// silent MLP blocks and a head that reads the normal-knowledge block along
// the mean defect residual. Scores are s = u . (q - nearest normal row).

#include <cmath>

#include "dmad/checkpoint.hpp"
#include "dmad/feature_store.hpp"
#include "dmad/memory_bank.hpp"
#include "dmad/synth.hpp"

namespace dmad::test {

inline std::vector<double> mean_defect_residual(const DatasetManifest& manifest, const MemoryBank& normal) {
  std::vector<double> u(normal.c(), 0.0);
  std::size_t count = 0;
  for (const auto& e : manifest.entries) {
    if (e.label != Label::anomalous || !e.mask_path) continue;
    const auto grid = read_feature_file(e.feature_path);
    const auto rows = filter_anomalous(grid, downscale_mask(read_mask_file(*e.mask_path), grid.h0, grid.w0));
    const auto nn = nearest_rows(normal, rows);
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      for (std::size_t j = 0; j < u.size(); ++j) u[j] += static_cast<double>(rows(r, j)) - nn(r, j);
      ++count;
    }
  }
  double norm = 0.0;
  for (auto& v : u) {
    v /= static_cast<double>(count);
    norm += v * v;
  }
  for (auto& v : u) v /= std::sqrt(norm);
  return u;
}

inline Checkpoint directional_checkpoint(const std::vector<double>& u) {
  const std::size_t c = u.size();
  ModelShape shape;
  shape.c = c;
  Checkpoint ck;
  ck.params = init_model<float>(shape, 0);
  ck.params.proj.w_p = MatrixF(c, c, 0.0f);
  for (std::size_t i = 0; i < c; ++i) ck.params.proj.w_p(i, i) = 1.0f;
  ck.params.proj.b_p.assign(c, 0.0f);
  for (auto& blk : ck.params.mlp.blocks) {
    std::fill(blk.bn_gamma.begin(), blk.bn_gamma.end(), 0.0f);
    std::fill(blk.bn_beta.begin(), blk.bn_beta.end(), 0.0f);
  }
  std::fill(ck.params.mlp.w_h.begin(), ck.params.mlp.w_h.end(), 0.0f);
  for (std::size_t j = 0; j < c; ++j) ck.params.mlp.w_h[c + j] = static_cast<float>(-u[j]);
  ck.params.mlp.b_h = 0.0f;
  ck.knowledge = KnowledgeMode{false, true, false};
  ck.mode = Mode::unsupervised;
  ck.optimizer = make_optimizer(ck.params, OptimizerConfig{});
  return ck;
}

}  // namespace dmad::test
