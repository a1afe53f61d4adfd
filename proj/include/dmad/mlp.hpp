#pragma once

// Scoring MLP: residual blocks x <- x + LeakyReLU(BN(W x + b)) followed by a
// scalar affine head.

#include <cstddef>
#include <vector>

#include "dmad/matrix.hpp"

namespace dmad {

template <typename T>
struct MlpBlock {
  Matrix<T> w;
  std::vector<T> b;
  std::vector<T> bn_gamma;
  std::vector<T> bn_beta;
  std::vector<T> bn_running_mean;
  std::vector<T> bn_running_var;
};

template <typename T>
struct MlpParams {
  std::vector<MlpBlock<T>> blocks;
  std::vector<T> w_h;
  T b_h{};
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t width() const { return w_h.size(); }
};

enum class Phase { train, eval };

template <typename T>
struct MlpBlockCache {
  Matrix<T> input;
  Matrix<T> xhat;
  Matrix<T> bn_out;
  std::vector<double> inv_std;
};

template <typename T>
struct MlpCache {
  std::vector<MlpBlockCache<T>> blocks;
  Matrix<T> head_input;
};

// Train phase normalizes with batch statistics (needs >= 2 rows) and, when
// `update_running` is set, folds them into the running statistics. Eval phase
// uses running statistics only and never mutates `params`.
template <typename T>
std::vector<T> mlp_forward(const Matrix<T>& o, MlpParams<T>& params, Phase phase, MlpCache<T>* cache = nullptr,
                           bool update_running = true);

template <typename T>
std::vector<T> mlp_eval(const Matrix<T>& o, const MlpParams<T>& params);

// Accumulates gradients of sum_i d_scores[i] * score_i into `grads` (trainable
// tensors only) and returns d(o). Requires a train-phase cache.
template <typename T>
Matrix<T> mlp_backward(const MlpParams<T>& params, const MlpCache<T>& cache, const std::vector<T>& d_scores,
                       MlpParams<T>& grads);

// Zero-initialized parameter set with the same shapes as `like`.
template <typename T>
MlpParams<T> mlp_zeros_like(const MlpParams<T>& like);

}  // namespace dmad
