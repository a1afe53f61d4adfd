#include "dmad/knowledge.hpp"

#include <cmath>
#include <string>

namespace dmad {

namespace {

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const std::vector<T>& b) {
  if (x.cols() != w.cols() || b.size() != w.rows()) throw ValidationError("linear: shape mismatch");
  Matrix<T> y(x.rows(), w.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const auto wr = w.row(o);
      double acc = b[o];
      for (std::size_t i = 0; i < xr.size(); ++i) acc += static_cast<double>(xr[i]) * wr[i];
      y(r, o) = static_cast<T>(acc);
    }
  }
  return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& dy, Matrix<T>& dw,
                          std::vector<T>& db, bool want_dx) {
  const std::size_t n = x.rows();
  const std::size_t in = w.cols();
  const std::size_t out = w.rows();
  for (std::size_t o = 0; o < out; ++o) {
    double bsum = 0.0;
    for (std::size_t r = 0; r < n; ++r) bsum += dy(r, o);
    db[o] += static_cast<T>(bsum);
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t r = 0; r < n; ++r) acc += static_cast<double>(dy(r, o)) * x(r, i);
      dw(o, i) += static_cast<T>(acc);
    }
  }
  if (!want_dx) return {};
  Matrix<T> dx(n, in);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) acc += static_cast<double>(dy(r, o)) * w(o, i);
      dx(r, i) = static_cast<T>(acc);
    }
  }
  return dx;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    double mx = -INFINITY;
    for (auto v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double e = std::exp(static_cast<double>(row[j]) - mx);
      out(r, j) = static_cast<T>(e);
      sum += e;
    }
    for (std::size_t j = 0; j < row.size(); ++j) out(r, j) = static_cast<T>(out(r, j) / sum);
  }
  return out;
}

template <typename T>
Matrix<T> knowledge_distance(const Matrix<T>& q, const Matrix<T>& q_star) {
  require_same_shape(q, q_star, "knowledge_distance");
  Matrix<T> d(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.size(); ++i) d.data()[i] = q.data()[i] - q_star.data()[i];
  return d;
}

template <typename T>
Matrix<T> cross_attention(const Matrix<T>& q_star, const Matrix<T>& q, const AttentionParams<T>& params,
                          bool shared_kv, AttentionCache<T>* cache) {
  require_same_shape(q_star, q, "cross_attention");
  if (q.rows() == 0) throw ValidationError("cross_attention: no patches");
  const std::size_t n = q.rows();
  const std::size_t c = q.cols();
  Matrix<T> keys = linear(q, params.w_k, params.b_k);
  Matrix<T> values = shared_kv ? keys : linear(q, params.w_v, params.b_v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  Matrix<T> logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += static_cast<double>(q_star(i, k)) * keys(j, k);
      logits(i, j) = static_cast<T>(acc * scale);
    }
  }
  Matrix<T> weights = softmax_rows(logits);
  Matrix<T> out(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(weights(i, j)) * values(j, k);
      if (!std::isfinite(acc)) throw NumericError("cross_attention: non-finite output in row " + std::to_string(i));
      out(i, k) = static_cast<T>(acc);
    }
  }
  if (cache != nullptr) {
    cache->keys = std::move(keys);
    cache->values = std::move(values);
    cache->weights = std::move(weights);
  }
  return out;
}

template <typename T>
void cross_attention_backward(const Matrix<T>& q_star, const Matrix<T>& q, const AttentionParams<T>& params,
                              bool shared_kv, const AttentionCache<T>& cache, const Matrix<T>& d_out,
                              AttentionParams<T>& grads) {
  const std::size_t n = q.rows();
  const std::size_t c = q.cols();
  if (cache.weights.rows() != n) throw StateError("cross_attention_backward: missing forward cache");
  const auto& w = cache.weights;
  const auto& v = cache.values;
  Matrix<T> d_values(n, c);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(w(i, j)) * d_out(i, k);
      d_values(j, k) = static_cast<T>(acc);
    }
  }
  // d(logits) through the row-wise softmax.
  Matrix<T> d_logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> dw(n);
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += static_cast<double>(d_out(i, k)) * v(j, k);
      dw[j] = acc;
      dot += acc * w(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) d_logits(i, j) = static_cast<T>(w(i, j) * (dw[j] - dot));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  Matrix<T> d_keys(n, c);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(d_logits(i, j)) * q_star(i, k);
      d_keys(j, k) = static_cast<T>(acc * scale);
    }
  }
  linear_backward(q, params.w_k, d_keys, grads.w_k, grads.b_k, false);
  if (shared_kv) {
    linear_backward(q, params.w_k, d_values, grads.w_k, grads.b_k, false);
  } else {
    linear_backward(q, params.w_v, d_values, grads.w_v, grads.b_v, false);
  }
}

template <typename T>
Matrix<T> knowledge(const Matrix<T>& d, const std::optional<Matrix<T>>& a, const KnowledgeMode& mode) {
  if (a.has_value() != mode.use_attention) {
    throw ValidationError("knowledge: attention term must be present iff attention is enabled");
  }
  Matrix<T> k = mode.use_distance ? d : Matrix<T>(d.rows(), d.cols());
  if (a) {
    require_same_shape(d, *a, "knowledge");
    add_into(k, *a);
  }
  return k;
}

template <typename T>
EnhancedRepresentation<T> enhance(const Matrix<T>& q, const Matrix<T>& k_n, const Matrix<T>& k_a,
                                  const ProjectionParams<T>& proj) {
  require_same_shape(q, k_n, "enhance");
  require_same_shape(q, k_a, "enhance");
  const std::size_t n = q.rows();
  const std::size_t c = q.cols();
  EnhancedRepresentation<T> out{n, c, Matrix<T>(n, 3 * c)};
  const Matrix<T>* blocks[3] = {&q, &k_n, &k_a};
  for (std::size_t b = 0; b < 3; ++b) {
    const Matrix<T> y = linear(*blocks[b], proj.w_p, proj.b_p);
    for (std::size_t r = 0; r < n; ++r) {
      std::copy(y.row(r).begin(), y.row(r).end(), out.data.row(r).begin() + static_cast<std::ptrdiff_t>(b * c));
    }
  }
  return out;
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> enhance_backward(const Matrix<T>& q, const Matrix<T>& k_n, const Matrix<T>& k_a,
                                                 const ProjectionParams<T>& proj, const Matrix<T>& d_out,
                                                 ProjectionParams<T>& grads) {
  const std::size_t n = q.rows();
  const std::size_t c = q.cols();
  auto block = [&](std::size_t b) {
    Matrix<T> m(n, c);
    for (std::size_t r = 0; r < n; ++r) {
      const auto src = d_out.row(r).subspan(b * c, c);
      std::copy(src.begin(), src.end(), m.row(r).begin());
    }
    return m;
  };
  linear_backward(q, proj.w_p, block(0), grads.w_p, grads.b_p, false);
  auto d_kn = linear_backward(k_n, proj.w_p, block(1), grads.w_p, grads.b_p, true);
  auto d_ka = linear_backward(k_a, proj.w_p, block(2), grads.w_p, grads.b_p, true);
  return {std::move(d_kn), std::move(d_ka)};
}

template <typename T>
EnhancedRepresentation<T> enhance_patches(const PatchNeighbors<T>& in, const AttentionParams<T>& attn,
                                          const ProjectionParams<T>& proj, const KnowledgeMode& mode,
                                          EnhanceCache<T>* cache) {
  auto branch = [&](const Matrix<T>& nn, AttentionCache<T>* ac) {
    const Matrix<T> d = knowledge_distance(in.q, nn);
    std::optional<Matrix<T>> a;
    if (mode.use_attention) a = cross_attention(nn, in.q, attn, mode.shared_kv, ac);
    return knowledge(d, a, mode);
  };
  Matrix<T> k_n = branch(in.nn_normal, cache ? &cache->attn_n : nullptr);
  Matrix<T> k_a = in.nn_abnormal.empty() ? Matrix<T>(in.q.rows(), in.q.cols())
                                         : branch(in.nn_abnormal, cache ? &cache->attn_a : nullptr);
  auto out = enhance(in.q, k_n, k_a, proj);
  if (cache != nullptr) {
    cache->k_n = std::move(k_n);
    cache->k_a = std::move(k_a);
  }
  return out;
}

template <typename T>
void enhance_patches_backward(const PatchNeighbors<T>& in, const AttentionParams<T>& attn,
                              const ProjectionParams<T>& proj, const KnowledgeMode& mode,
                              const EnhanceCache<T>& cache, const Matrix<T>& d_out, AttentionParams<T>& attn_grads,
                              ProjectionParams<T>& proj_grads) {
  if (cache.k_n.rows() != in.q.rows()) throw StateError("enhance_patches_backward: missing forward cache");
  auto [d_kn, d_ka] = enhance_backward(in.q, cache.k_n, cache.k_a, proj, d_out, proj_grads);
  if (!mode.use_attention) return;
  cross_attention_backward(in.nn_normal, in.q, attn, mode.shared_kv, cache.attn_n, d_kn, attn_grads);
  if (!in.nn_abnormal.empty()) {
    cross_attention_backward(in.nn_abnormal, in.q, attn, mode.shared_kv, cache.attn_a, d_ka, attn_grads);
  }
}

#define DMAD_INSTANTIATE_KNOWLEDGE(T)                                                                            \
  template Matrix<T> linear(const Matrix<T>&, const Matrix<T>&, const std::vector<T>&);                          \
  template Matrix<T> linear_backward(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, Matrix<T>&,           \
                                     std::vector<T>&, bool);                                                     \
  template Matrix<T> softmax_rows(const Matrix<T>&);                                                             \
  template Matrix<T> knowledge_distance(const Matrix<T>&, const Matrix<T>&);                                     \
  template Matrix<T> cross_attention(const Matrix<T>&, const Matrix<T>&, const AttentionParams<T>&, bool,        \
                                     AttentionCache<T>*);                                                        \
  template void cross_attention_backward(const Matrix<T>&, const Matrix<T>&, const AttentionParams<T>&, bool,    \
                                         const AttentionCache<T>&, const Matrix<T>&, AttentionParams<T>&);       \
  template Matrix<T> knowledge(const Matrix<T>&, const std::optional<Matrix<T>>&, const KnowledgeMode&);         \
  template EnhancedRepresentation<T> enhance(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,               \
                                             const ProjectionParams<T>&);                                        \
  template std::pair<Matrix<T>, Matrix<T>> enhance_backward(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, \
                                                            const ProjectionParams<T>&, const Matrix<T>&,        \
                                                            ProjectionParams<T>&);                               \
  template EnhancedRepresentation<T> enhance_patches(const PatchNeighbors<T>&, const AttentionParams<T>&,        \
                                                     const ProjectionParams<T>&, const KnowledgeMode&,           \
                                                     EnhanceCache<T>*);                                          \
  template void enhance_patches_backward(const PatchNeighbors<T>&, const AttentionParams<T>&,                    \
                                         const ProjectionParams<T>&, const KnowledgeMode&, const EnhanceCache<T>&, \
                                         const Matrix<T>&, AttentionParams<T>&, ProjectionParams<T>&);

DMAD_INSTANTIATE_KNOWLEDGE(float)
DMAD_INSTANTIATE_KNOWLEDGE(double)

#undef DMAD_INSTANTIATE_KNOWLEDGE

}  // namespace dmad
