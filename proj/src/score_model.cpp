#include "dmad/score_model.hpp"

#include <cmath>

#include "dmad/parallel.hpp"

namespace dmad {

namespace {

template <typename T>
void fill_uniform(std::span<T> values, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : values) v = static_cast<T>(u(rng));
}

template <typename T>
void check_batch_shapes(const TrainBatch<T>& batch, std::size_t c) {
  if (batch.noise.size() != batch.normal.size()) throw ValidationError("batch_loss: one noise matrix per image");
  for (std::size_t i = 0; i < batch.normal.size(); ++i) {
    const auto& in = batch.normal[i];
    if (in.q.cols() != c) throw ValidationError("batch_loss: channel count does not match the model");
    if (batch.noise[i].rows() != in.q.rows() || batch.noise[i].cols() != 3 * c) {
      throw ValidationError("batch_loss: noise shape does not match the enhanced representation");
    }
  }
  for (const auto& in : batch.anomalous) {
    if (in.q.cols() != c) throw ValidationError("batch_loss: channel count does not match the model");
  }
}

}  // namespace

template <typename T>
ModelParams<T> init_model(const ModelShape& shape, std::uint64_t seed) {
  if (shape.c == 0) throw ValidationError("init_model: zero channels");
  const std::size_t c = shape.c;
  const std::size_t d = 3 * c;
  ModelParams<T> p;
  p.proj = {Matrix<T>(c, c), std::vector<T>(c)};
  p.attn = {Matrix<T>(c, c), std::vector<T>(c), Matrix<T>(c, c), std::vector<T>(c)};
  p.mlp.leaky_slope = shape.leaky_slope;
  p.mlp.bn_momentum = shape.bn_momentum;
  p.mlp.bn_eps = shape.bn_eps;
  for (std::size_t i = 0; i < shape.num_blocks; ++i) {
    p.mlp.blocks.push_back({Matrix<T>(d, d), std::vector<T>(d), std::vector<T>(d, T{1}), std::vector<T>(d),
                            std::vector<T>(d), std::vector<T>(d, T{1})});
  }
  p.mlp.w_h.assign(d, T{});

  std::mt19937_64 rng(seed);
  for_each_tensor(p, [&](const TensorInfo& info, std::span<T> v) {
    if (!info.trainable || info.name.ends_with("bn_gamma") || info.name.ends_with("bn_beta")) return;
    const bool mlp = info.group == ParamGroup::mlp;
    const double fan_in = static_cast<double>(mlp ? d : c);
    fill_uniform(v, 1.0 / std::sqrt(fan_in), rng);
  });
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& like) {
  ModelParams<T> z = like;
  for_each_tensor(z, [](const TensorInfo&, std::span<T> v) { std::fill(v.begin(), v.end(), T{}); });
  return z;
}

template <typename To, typename From>
ModelParams<To> model_cast(const ModelParams<From>& from) {
  ModelParams<To> out;
  out.proj = {matrix_cast<To>(from.proj.w_p), {from.proj.b_p.begin(), from.proj.b_p.end()}};
  out.attn = {matrix_cast<To>(from.attn.w_k), {from.attn.b_k.begin(), from.attn.b_k.end()},
              matrix_cast<To>(from.attn.w_v), {from.attn.b_v.begin(), from.attn.b_v.end()}};
  out.mlp.leaky_slope = from.mlp.leaky_slope;
  out.mlp.bn_momentum = from.mlp.bn_momentum;
  out.mlp.bn_eps = from.mlp.bn_eps;
  for (const auto& b : from.mlp.blocks) {
    out.mlp.blocks.push_back({matrix_cast<To>(b.w),
                              {b.b.begin(), b.b.end()},
                              {b.bn_gamma.begin(), b.bn_gamma.end()},
                              {b.bn_beta.begin(), b.bn_beta.end()},
                              {b.bn_running_mean.begin(), b.bn_running_mean.end()},
                              {b.bn_running_var.begin(), b.bn_running_var.end()}});
  }
  out.mlp.w_h.assign(from.mlp.w_h.begin(), from.mlp.w_h.end());
  out.mlp.b_h = static_cast<To>(from.mlp.b_h);
  return out;
}

LossTerms hinge_loss(std::span<const double> psi_n, std::span<const double> psi_p,
                     std::optional<std::span<const double>> psi_a, const LossConfig& cfg) {
  if (psi_n.empty()) throw ValidationError("hinge_loss: no normal scores");
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0) throw ValidationError("hinge_loss: lambdas must be >= 0");
  if (psi_a.has_value() != (cfg.lambda2 > 0.0)) {
    throw ValidationError("hinge_loss: abnormal scores must be supplied exactly when lambda2 > 0");
  }
  auto mean_hinge = [&](std::span<const double> v, double sign) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += std::max(0.0, cfg.margin + sign * x);
    return acc / static_cast<double>(v.size());
  };
  LossTerms t;
  t.term_n = mean_hinge(psi_n, -1.0);
  t.term_p = mean_hinge(psi_p, 1.0);
  t.term_a = psi_a ? mean_hinge(*psi_a, 1.0) : 0.0;
  t.total = t.term_n + cfg.lambda1 * t.term_p + cfg.lambda2 * t.term_a;
  return t;
}

template <typename T>
Matrix<T> gaussian_noise(std::size_t rows, std::size_t cols, double std_dev, std::mt19937_64& rng) {
  if (!(std_dev >= 0.0)) throw ValidationError("gaussian noise: std must be >= 0");
  Matrix<T> m(rows, cols);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : m.data()) v = static_cast<T>(std_dev * g(rng));
  return m;
}

template <typename T>
EnhancedRepresentation<T> gaussian_augment(const EnhancedRepresentation<T>& o_n, const AugmentConfig& cfg) {
  if (o_n.data.rows() != o_n.n || o_n.data.cols() != 3 * o_n.c) {
    throw ValidationError("gaussian_augment: malformed enhanced representation");
  }
  std::mt19937_64 rng(cfg.seed);
  const auto noise = gaussian_noise<T>(o_n.n, 3 * o_n.c, cfg.noise_std, rng);
  EnhancedRepresentation<T> out = o_n;
  for (std::size_t i = 0; i < noise.size(); ++i) out.data.data()[i] += noise.data()[i];
  return out;
}

template <typename T>
LossTerms batch_loss(ModelParams<T>& params, const TrainBatch<T>& batch, const KnowledgeMode& mode,
                     const LossConfig& loss, ModelParams<T>* grads, bool update_running, int threads,
                     std::vector<std::uint8_t>* pattern) {
  const std::size_t c = params.c();
  const std::size_t d = 3 * c;
  check_batch_shapes(batch, c);
  if (batch.normal.empty()) throw ValidationError("batch_loss: no normal images in batch");
  const bool use_anomalous = loss.lambda2 > 0.0;
  const std::size_t n_norm = batch.normal.size();
  const std::size_t n_anom = use_anomalous ? batch.anomalous.size() : 0;

  std::vector<EnhanceCache<T>> caches(n_norm + n_anom);
  std::vector<EnhancedRepresentation<T>> reps(n_norm + n_anom);
  auto input = [&](std::size_t i) -> const PatchNeighbors<T>& {
    return i < n_norm ? batch.normal[i] : batch.anomalous[i - n_norm];
  };
  parallel_for(n_norm + n_anom, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      reps[i] = enhance_patches(input(i), params.attn, params.proj, mode, &caches[i]);
    }
  });

  std::size_t rows_n = 0;
  std::size_t rows_a = 0;
  for (std::size_t i = 0; i < n_norm; ++i) rows_n += reps[i].n;
  for (std::size_t i = n_norm; i < n_norm + n_anom; ++i) rows_a += reps[i].n;
  Matrix<T> stacked(2 * rows_n + rows_a, d);
  {
    std::size_t r = 0;
    for (std::size_t i = 0; i < n_norm; ++i) {
      std::copy(reps[i].data.data().begin(), reps[i].data.data().end(), stacked.row(r).begin());
      r += reps[i].n;
    }
    for (std::size_t i = 0; i < n_norm; ++i) {
      for (std::size_t k = 0; k < reps[i].data.size(); ++k) {
        stacked.data()[r * d + k] = reps[i].data.data()[k] + batch.noise[i].data()[k];
      }
      r += reps[i].n;
    }
    for (std::size_t i = n_norm; i < n_norm + n_anom; ++i) {
      std::copy(reps[i].data.data().begin(), reps[i].data.data().end(), stacked.row(r).begin());
      r += reps[i].n;
    }
  }

  MlpCache<T> mlp_cache;
  const bool want_cache = grads != nullptr || pattern != nullptr;
  const auto scores = mlp_forward(stacked, params.mlp, Phase::train, want_cache ? &mlp_cache : nullptr, update_running);
  const std::vector<double> psi(scores.begin(), scores.end());
  const std::span<const double> all(psi);
  const auto psi_n = all.subspan(0, rows_n);
  const auto psi_p = all.subspan(rows_n, rows_n);
  const auto psi_a = all.subspan(2 * rows_n, rows_a);
  const LossTerms terms = hinge_loss(psi_n, psi_p, use_anomalous ? std::optional(psi_a) : std::nullopt, loss);
  if (pattern != nullptr) {
    pattern->clear();
    for (const auto& block : mlp_cache.blocks) {
      for (T v : block.bn_out.data()) pattern->push_back(v > T{} ? 1 : 0);
    }
    for (std::size_t i = 0; i < psi.size(); ++i) {
      const double arg = i < rows_n ? loss.margin - psi[i] : loss.margin + psi[i];
      pattern->push_back(arg > 0.0 ? 1 : 0);
    }
  }
  if (grads == nullptr) return terms;

  std::vector<T> d_scores(psi.size(), T{});
  for (std::size_t i = 0; i < rows_n; ++i) {
    if (loss.margin - psi_n[i] > 0.0) d_scores[i] = static_cast<T>(-1.0 / static_cast<double>(rows_n));
    if (loss.margin + psi_p[i] > 0.0) {
      d_scores[rows_n + i] = static_cast<T>(loss.lambda1 / static_cast<double>(rows_n));
    }
  }
  for (std::size_t i = 0; i < rows_a; ++i) {
    if (loss.margin + psi_a[i] > 0.0) {
      d_scores[2 * rows_n + i] = static_cast<T>(loss.lambda2 / static_cast<double>(rows_a));
    }
  }
  const Matrix<T> d_stacked = mlp_backward(params.mlp, mlp_cache, d_scores, grads->mlp);

  std::vector<std::size_t> offset(n_norm + n_anom);
  {
    std::size_t r = 0;
    for (std::size_t i = 0; i < n_norm; ++i) {
      offset[i] = r;
      r += reps[i].n;
    }
    r = 2 * rows_n;
    for (std::size_t i = n_norm; i < n_norm + n_anom; ++i) {
      offset[i] = r;
      r += reps[i].n;
    }
  }
  std::vector<ModelParams<T>> partials(n_norm + n_anom);
  parallel_for(n_norm + n_anom, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t n = reps[i].n;
      Matrix<T> d_rep(n, d);
      for (std::size_t k = 0; k < n * d; ++k) {
        T g = d_stacked.data()[offset[i] * d + k];
        if (i < n_norm) g += d_stacked.data()[(offset[i] + rows_n) * d + k];
        d_rep.data()[k] = g;
      }
      auto& part = partials[i];
      part.proj = {Matrix<T>(c, c), std::vector<T>(c)};
      part.attn = {Matrix<T>(c, c), std::vector<T>(c), Matrix<T>(c, c), std::vector<T>(c)};
      enhance_patches_backward(input(i), params.attn, params.proj, mode, caches[i], d_rep, part.attn, part.proj);
    }
  });
  for (const auto& part : partials) {
    for (std::size_t k = 0; k < part.proj.w_p.size(); ++k) grads->proj.w_p.data()[k] += part.proj.w_p.data()[k];
    for (std::size_t k = 0; k < c; ++k) grads->proj.b_p[k] += part.proj.b_p[k];
    for (std::size_t k = 0; k < part.attn.w_k.size(); ++k) {
      grads->attn.w_k.data()[k] += part.attn.w_k.data()[k];
      grads->attn.w_v.data()[k] += part.attn.w_v.data()[k];
    }
    for (std::size_t k = 0; k < c; ++k) {
      grads->attn.b_k[k] += part.attn.b_k[k];
      grads->attn.b_v[k] += part.attn.b_v[k];
    }
  }
  return terms;
}

PatchNeighbors<float> find_neighbors(const MatrixF& q, const DualMemoryBank& dual, int threads) {
  if (q.cols() != dual.normal.c()) throw ValidationError("find_neighbors: channel count does not match the banks");
  PatchNeighbors<float> out;
  out.q = q;
  out.nn_normal = nearest_rows(dual.normal, q, threads);
  if (dual.abnormal) out.nn_abnormal = nearest_rows(*dual.abnormal, q, threads);
  return out;
}

EnhancedRepresentation<float> enhance_pipeline(const MatrixF& q, const DualMemoryBank& dual,
                                               const ModelParams<float>& params, const KnowledgeMode& mode,
                                               int threads) {
  dual.validate();
  return enhance_patches(find_neighbors(q, dual, threads), params.attn, params.proj, mode);
}

template <typename T>
std::vector<T> patch_anomaly_scores(const ModelParams<T>& params, const PatchNeighbors<T>& in,
                                    const KnowledgeMode& mode) {
  const auto rep = enhance_patches(in, params.attn, params.proj, mode);
  auto psi = mlp_eval(rep.data, params.mlp);
  for (auto& v : psi) v = -v;
  return psi;
}

template ModelParams<float> init_model(const ModelShape&, std::uint64_t);
template ModelParams<double> init_model(const ModelShape&, std::uint64_t);
template ModelParams<float> zeros_like(const ModelParams<float>&);
template ModelParams<double> zeros_like(const ModelParams<double>&);
template ModelParams<float> model_cast(const ModelParams<double>&);
template ModelParams<double> model_cast(const ModelParams<float>&);
template ModelParams<float> model_cast(const ModelParams<float>&);
template ModelParams<double> model_cast(const ModelParams<double>&);
template Matrix<float> gaussian_noise(std::size_t, std::size_t, double, std::mt19937_64&);
template Matrix<double> gaussian_noise(std::size_t, std::size_t, double, std::mt19937_64&);
template EnhancedRepresentation<float> gaussian_augment(const EnhancedRepresentation<float>&, const AugmentConfig&);
template EnhancedRepresentation<double> gaussian_augment(const EnhancedRepresentation<double>&, const AugmentConfig&);
template LossTerms batch_loss(ModelParams<float>&, const TrainBatch<float>&, const KnowledgeMode&, const LossConfig&,
                              ModelParams<float>*, bool, int, std::vector<std::uint8_t>*);
template LossTerms batch_loss(ModelParams<double>&, const TrainBatch<double>&, const KnowledgeMode&,
                              const LossConfig&, ModelParams<double>*, bool, int, std::vector<std::uint8_t>*);
template std::vector<float> patch_anomaly_scores(const ModelParams<float>&, const PatchNeighbors<float>&,
                                                 const KnowledgeMode&);
template std::vector<double> patch_anomaly_scores(const ModelParams<double>&, const PatchNeighbors<double>&,
                                                  const KnowledgeMode&);

}  // namespace dmad
