#pragma once

// Knowledge enhancement: residuals to the nearest normal/abnormal bank rows,
// cross-attention with the neighbors as queries, and the shared projection
// that builds the 3C-wide enhanced representation. Every forward op has a
// matching backward used by the trainer.

#include <cstddef>
#include <optional>
#include <vector>

#include "dmad/matrix.hpp"

namespace dmad {

struct KnowledgeMode {
  bool use_attention = true;
  bool use_distance = true;
  // Key and value embeddings share one affine map.
  bool shared_kv = false;
};

template <typename T>
struct AttentionParams {
  Matrix<T> w_k;
  std::vector<T> b_k;
  Matrix<T> w_v;
  std::vector<T> b_v;
};

template <typename T>
struct ProjectionParams {
  Matrix<T> w_p;
  std::vector<T> b_p;
};

// N x 3C; column blocks are (feature, normal knowledge, abnormal knowledge).
template <typename T>
struct EnhancedRepresentation {
  std::size_t n = 0;
  std::size_t c = 0;
  Matrix<T> data;
};

// y = x * w^T + b with w shaped (out, in).
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const std::vector<T>& b);

// Accumulates dw += dy^T x and db += colsum(dy); returns dx = dy * w when
// `want_dx` is set, otherwise an empty matrix.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& dy, Matrix<T>& dw,
                          std::vector<T>& db, bool want_dx);

// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

template <typename T>
Matrix<T> knowledge_distance(const Matrix<T>& q, const Matrix<T>& q_star);

template <typename T>
struct AttentionCache {
  Matrix<T> keys;
  Matrix<T> values;
  Matrix<T> weights;  // N x N softmax
};

// softmax(q_star * K^T / sqrt(C)) * V with K, V affine embeddings of q.
template <typename T>
Matrix<T> cross_attention(const Matrix<T>& q_star, const Matrix<T>& q, const AttentionParams<T>& params,
                          bool shared_kv, AttentionCache<T>* cache = nullptr);

// Gradients of the attention output w.r.t. the embedding parameters; q and
// q_star are constants.
template <typename T>
void cross_attention_backward(const Matrix<T>& q_star, const Matrix<T>& q, const AttentionParams<T>& params,
                              bool shared_kv, const AttentionCache<T>& cache, const Matrix<T>& d_out,
                              AttentionParams<T>& grads);

// d + a when attention is in use, otherwise d.
template <typename T>
Matrix<T> knowledge(const Matrix<T>& d, const std::optional<Matrix<T>>& a, const KnowledgeMode& mode);

template <typename T>
EnhancedRepresentation<T> enhance(const Matrix<T>& q, const Matrix<T>& k_n, const Matrix<T>& k_a,
                                  const ProjectionParams<T>& proj);

// Accumulates projection gradients; returns d(k_n) and d(k_a).
template <typename T>
std::pair<Matrix<T>, Matrix<T>> enhance_backward(const Matrix<T>& q, const Matrix<T>& k_n, const Matrix<T>& k_a,
                                                 const ProjectionParams<T>& proj, const Matrix<T>& d_out,
                                                 ProjectionParams<T>& grads);

// Constant inputs of one image (or one image's filtered patches): the patch
// features and their nearest rows in each bank. `nn_abnormal` is empty when
// the abnormal bank is absent, in which case the abnormal knowledge is zero.
template <typename T>
struct PatchNeighbors {
  Matrix<T> q;
  Matrix<T> nn_normal;
  Matrix<T> nn_abnormal;
};

template <typename T>
struct EnhanceCache {
  Matrix<T> k_n;
  Matrix<T> k_a;
  AttentionCache<T> attn_n;
  AttentionCache<T> attn_a;
};

// Residuals, optional attention, knowledge sum and projection for one image.
template <typename T>
EnhancedRepresentation<T> enhance_patches(const PatchNeighbors<T>& in, const AttentionParams<T>& attn,
                                          const ProjectionParams<T>& proj, const KnowledgeMode& mode,
                                          EnhanceCache<T>* cache = nullptr);

template <typename T>
void enhance_patches_backward(const PatchNeighbors<T>& in, const AttentionParams<T>& attn,
                              const ProjectionParams<T>& proj, const KnowledgeMode& mode,
                              const EnhanceCache<T>& cache, const Matrix<T>& d_out, AttentionParams<T>& attn_grads,
                              ProjectionParams<T>& proj_grads);

}  // namespace dmad
