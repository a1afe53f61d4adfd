#include "dmad/mlp.hpp"

#include <cmath>
#include <string>

#include "dmad/error.hpp"
#include "dmad/knowledge.hpp"

namespace dmad {

namespace {

template <typename T>
void check_finite(const Matrix<T>& m, const char* stage) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(static_cast<double>(m.data()[i]))) {
      throw NumericError(std::string("mlp: non-finite value after ") + stage + " in row " +
                         std::to_string(i / std::max<std::size_t>(m.cols(), 1)));
    }
  }
}

template <typename T>
std::vector<T> forward_impl(const Matrix<T>& o, const MlpParams<T>& params, Phase phase, MlpCache<T>* cache,
                            MlpParams<T>* running_sink) {
  const std::size_t m = o.rows();
  const std::size_t d = params.width();
  if (m == 0) throw ValidationError("mlp_forward: empty batch");
  if (o.cols() != d) throw ValidationError("mlp_forward: input width does not match the network");
  if (phase == Phase::train && m < 2) throw ValidationError("mlp_forward: train phase needs at least 2 rows");
  if (cache != nullptr) cache->blocks.clear();

  Matrix<T> x = o;
  for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
    const auto& blk = params.blocks[bi];
    Matrix<T> z = linear(x, blk.w, blk.b);
    std::vector<double> mean(d);
    std::vector<double> inv_std(d);
    if (phase == Phase::train) {
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) s += z(r, j);
        const double mu = s / static_cast<double>(m);
        double ss = 0.0;
        for (std::size_t r = 0; r < m; ++r) ss += (z(r, j) - mu) * (z(r, j) - mu);
        const double var = ss / static_cast<double>(m);
        mean[j] = mu;
        inv_std[j] = 1.0 / std::sqrt(var + params.bn_eps);
        if (running_sink != nullptr) {
          auto& sink = running_sink->blocks[bi];
          const double unbiased = ss / static_cast<double>(m - 1);
          const double mom = params.bn_momentum;
          sink.bn_running_mean[j] = static_cast<T>((1.0 - mom) * sink.bn_running_mean[j] + mom * mu);
          sink.bn_running_var[j] = static_cast<T>((1.0 - mom) * sink.bn_running_var[j] + mom * unbiased);
        }
      }
    } else {
      for (std::size_t j = 0; j < d; ++j) {
        mean[j] = blk.bn_running_mean[j];
        inv_std[j] = 1.0 / std::sqrt(static_cast<double>(blk.bn_running_var[j]) + params.bn_eps);
      }
    }
    Matrix<T> xhat(m, d);
    Matrix<T> y(m, d);
    Matrix<T> next(m, d);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const double h = (z(r, j) - mean[j]) * inv_std[j];
        const double bn = blk.bn_gamma[j] * h + blk.bn_beta[j];
        const double act = bn > 0.0 ? bn : params.leaky_slope * bn;
        xhat(r, j) = static_cast<T>(h);
        y(r, j) = static_cast<T>(bn);
        next(r, j) = static_cast<T>(x(r, j) + act);
      }
    }
    check_finite(next, "residual block");
    if (cache != nullptr) {
      cache->blocks.push_back({std::move(x), std::move(xhat), std::move(y), std::move(inv_std)});
    }
    x = std::move(next);
  }

  std::vector<T> scores(m);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = params.b_h;
    for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(x(r, j)) * params.w_h[j];
    if (!std::isfinite(acc)) throw NumericError("mlp: non-finite score in row " + std::to_string(r));
    scores[r] = static_cast<T>(acc);
  }
  if (cache != nullptr) cache->head_input = std::move(x);
  return scores;
}

}  // namespace

template <typename T>
std::vector<T> mlp_forward(const Matrix<T>& o, MlpParams<T>& params, Phase phase, MlpCache<T>* cache,
                           bool update_running) {
  MlpParams<T>* sink = (phase == Phase::train && update_running) ? &params : nullptr;
  return forward_impl(o, params, phase, cache, sink);
}

template <typename T>
std::vector<T> mlp_eval(const Matrix<T>& o, const MlpParams<T>& params) {
  return forward_impl<T>(o, params, Phase::eval, nullptr, nullptr);
}

template <typename T>
Matrix<T> mlp_backward(const MlpParams<T>& params, const MlpCache<T>& cache, const std::vector<T>& d_scores,
                       MlpParams<T>& grads) {
  if (cache.blocks.size() != params.blocks.size() || cache.head_input.rows() != d_scores.size()) {
    throw StateError("mlp_backward: missing or stale forward cache");
  }
  const std::size_t m = d_scores.size();
  const std::size_t d = params.width();
  Matrix<T> dx(m, d);
  double db_h = 0.0;
  for (std::size_t r = 0; r < m; ++r) db_h += d_scores[r];
  grads.b_h += static_cast<T>(db_h);
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      acc += static_cast<double>(d_scores[r]) * cache.head_input(r, j);
      dx(r, j) = static_cast<T>(static_cast<double>(d_scores[r]) * params.w_h[j]);
    }
    grads.w_h[j] += static_cast<T>(acc);
  }

  for (std::size_t bi = params.blocks.size(); bi-- > 0;) {
    const auto& blk = params.blocks[bi];
    const auto& bc = cache.blocks[bi];
    auto& g = grads.blocks[bi];
    Matrix<T> d_xhat(m, d);
    for (std::size_t j = 0; j < d; ++j) {
      double dgamma = 0.0;
      double dbeta = 0.0;
      for (std::size_t r = 0; r < m; ++r) {
        const double slope = bc.bn_out(r, j) > 0 ? 1.0 : params.leaky_slope;
        const double dy = static_cast<double>(dx(r, j)) * slope;
        dgamma += dy * bc.xhat(r, j);
        dbeta += dy;
        d_xhat(r, j) = static_cast<T>(dy * blk.bn_gamma[j]);
      }
      g.bn_gamma[j] += static_cast<T>(dgamma);
      g.bn_beta[j] += static_cast<T>(dbeta);
    }
    Matrix<T> dz(m, d);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t j = 0; j < d; ++j) {
      double sum_dh = 0.0;
      double sum_dh_h = 0.0;
      for (std::size_t r = 0; r < m; ++r) {
        sum_dh += d_xhat(r, j);
        sum_dh_h += static_cast<double>(d_xhat(r, j)) * bc.xhat(r, j);
      }
      for (std::size_t r = 0; r < m; ++r) {
        dz(r, j) = static_cast<T>(bc.inv_std[j] * inv_m *
                                  (static_cast<double>(m) * d_xhat(r, j) - sum_dh - bc.xhat(r, j) * sum_dh_h));
      }
    }
    const Matrix<T> d_in = linear_backward(bc.input, blk.w, dz, g.w, g.b, true);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += d_in.data()[i];
  }
  return dx;
}

template <typename T>
MlpParams<T> mlp_zeros_like(const MlpParams<T>& like) {
  MlpParams<T> z = like;
  for (auto& blk : z.blocks) {
    blk.w.fill(T{});
    for (auto* v : {&blk.b, &blk.bn_gamma, &blk.bn_beta, &blk.bn_running_mean, &blk.bn_running_var}) {
      std::fill(v->begin(), v->end(), T{});
    }
  }
  std::fill(z.w_h.begin(), z.w_h.end(), T{});
  z.b_h = T{};
  return z;
}

template std::vector<float> mlp_forward(const Matrix<float>&, MlpParams<float>&, Phase, MlpCache<float>*, bool);
template std::vector<double> mlp_forward(const Matrix<double>&, MlpParams<double>&, Phase, MlpCache<double>*, bool);
template std::vector<float> mlp_eval(const Matrix<float>&, const MlpParams<float>&);
template std::vector<double> mlp_eval(const Matrix<double>&, const MlpParams<double>&);
template Matrix<float> mlp_backward(const MlpParams<float>&, const MlpCache<float>&, const std::vector<float>&,
                                    MlpParams<float>&);
template Matrix<double> mlp_backward(const MlpParams<double>&, const MlpCache<double>&, const std::vector<double>&,
                                     MlpParams<double>&);
template MlpParams<float> mlp_zeros_like(const MlpParams<float>&);
template MlpParams<double> mlp_zeros_like(const MlpParams<double>&);

}  // namespace dmad
