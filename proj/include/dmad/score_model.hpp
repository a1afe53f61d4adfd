#pragma once

// Trainable scorer: projection + attention embeddings + MLP, the three-part
// hinge loss, Gaussian feature augmentation, and batch-level forward/backward.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dmad/knowledge.hpp"
#include "dmad/memory_bank.hpp"
#include "dmad/mlp.hpp"

namespace dmad {

struct ModelShape {
  std::size_t c = 0;
  std::size_t num_blocks = 4;
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

template <typename T>
struct ModelParams {
  ProjectionParams<T> proj;
  AttentionParams<T> attn;
  MlpParams<T> mlp;

  std::size_t c() const { return proj.b_p.size(); }
};

enum class ParamGroup { attention_and_projection, mlp };

// Linear layers use U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
// biases; BN starts at gamma = 1, beta = 0, running (0, 1).
template <typename T>
ModelParams<T> init_model(const ModelShape& shape, std::uint64_t seed);

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& like);

template <typename To, typename From>
ModelParams<To> model_cast(const ModelParams<From>& from);

struct TensorInfo {
  std::string name;
  ParamGroup group;
  bool trainable;
  std::vector<std::uint32_t> dims;
};

// Calls fn(info, span of values) for every tensor in a fixed order. P is a
// possibly-const ModelParams.
template <typename P, typename Fn>
void for_each_tensor(P& p, Fn&& fn) {
  const auto c = static_cast<std::uint32_t>(p.proj.b_p.size());
  const auto d = static_cast<std::uint32_t>(p.mlp.w_h.size());
  const auto ap = ParamGroup::attention_and_projection;
  fn(TensorInfo{"proj.w", ap, true, {c, c}}, std::span(p.proj.w_p.data()));
  fn(TensorInfo{"proj.b", ap, true, {c}}, std::span(p.proj.b_p));
  fn(TensorInfo{"attn.w_k", ap, true, {c, c}}, std::span(p.attn.w_k.data()));
  fn(TensorInfo{"attn.b_k", ap, true, {c}}, std::span(p.attn.b_k));
  fn(TensorInfo{"attn.w_v", ap, true, {c, c}}, std::span(p.attn.w_v.data()));
  fn(TensorInfo{"attn.b_v", ap, true, {c}}, std::span(p.attn.b_v));
  for (std::size_t i = 0; i < p.mlp.blocks.size(); ++i) {
    auto& b = p.mlp.blocks[i];
    const std::string pre = "mlp.block" + std::to_string(i) + ".";
    fn(TensorInfo{pre + "w", ParamGroup::mlp, true, {d, d}}, std::span(b.w.data()));
    fn(TensorInfo{pre + "b", ParamGroup::mlp, true, {d}}, std::span(b.b));
    fn(TensorInfo{pre + "bn_gamma", ParamGroup::mlp, true, {d}}, std::span(b.bn_gamma));
    fn(TensorInfo{pre + "bn_beta", ParamGroup::mlp, true, {d}}, std::span(b.bn_beta));
    fn(TensorInfo{pre + "bn_running_mean", ParamGroup::mlp, false, {d}}, std::span(b.bn_running_mean));
    fn(TensorInfo{pre + "bn_running_var", ParamGroup::mlp, false, {d}}, std::span(b.bn_running_var));
  }
  fn(TensorInfo{"mlp.head.w", ParamGroup::mlp, true, {d}}, std::span(p.mlp.w_h));
  fn(TensorInfo{"mlp.head.b", ParamGroup::mlp, true, {}}, std::span(&p.mlp.b_h, 1));
}

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.0;
  double margin = 0.5;
};

struct LossTerms {
  double total = 0.0;
  double term_n = 0.0;  // mean max(0, margin - psi(o_n))
  double term_p = 0.0;  // mean max(0, margin + psi(o_p)), before lambda1
  double term_a = 0.0;  // mean max(0, margin + psi(o_a)), before lambda2
};

// Each term is mean-reduced over its own set; an empty set contributes 0.
// psi_a must be supplied exactly when lambda2 > 0.
LossTerms hinge_loss(std::span<const double> psi_n, std::span<const double> psi_p,
                     std::optional<std::span<const double>> psi_a, const LossConfig& cfg);

struct AugmentConfig {
  double noise_std = 0.015;
  std::uint64_t seed = 0;
};

template <typename T>
EnhancedRepresentation<T> gaussian_augment(const EnhancedRepresentation<T>& o_n, const AugmentConfig& cfg);
// Noise matrix of the given shape drawn from `rng`.
template <typename T>
Matrix<T> gaussian_noise(std::size_t rows, std::size_t cols, double std_dev, std::mt19937_64& rng);

// One optimizer step's worth of inputs. noise[i] is added to the enhanced
// representation of normal[i] to form its pseudo negative.
template <typename T>
struct TrainBatch {
  std::vector<PatchNeighbors<T>> normal;
  std::vector<Matrix<T>> noise;
  std::vector<PatchNeighbors<T>> anomalous;
};

// Forward pass of the full loss; when `grads` is non-null, also accumulates
// exact gradients of the total loss into it. Banks and neighbor rows are
// constants. Per-image work may run on `threads` workers; gradient partials
// are summed in image order. `pattern`, when given, receives the on/off state
// of every LeakyReLU and hinge, which changes only when a kink is crossed.
template <typename T>
LossTerms batch_loss(ModelParams<T>& params, const TrainBatch<T>& batch, const KnowledgeMode& mode,
                     const LossConfig& loss, ModelParams<T>* grads, bool update_running, int threads = 1,
                     std::vector<std::uint8_t>* pattern = nullptr);

// Nearest normal and abnormal rows for every patch.
PatchNeighbors<float> find_neighbors(const MatrixF& q, const DualMemoryBank& dual, int threads = 1);

// Nearest-neighbor lookup followed by knowledge enhancement.
EnhancedRepresentation<float> enhance_pipeline(const MatrixF& q, const DualMemoryBank& dual,
                                               const ModelParams<float>& params, const KnowledgeMode& mode,
                                               int threads = 1);

// Eval-phase anomaly scores s = -psi for every patch.
template <typename T>
std::vector<T> patch_anomaly_scores(const ModelParams<T>& params, const PatchNeighbors<T>& in,
                                    const KnowledgeMode& mode);

}  // namespace dmad
