#include "dmad/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>

namespace dmad {

namespace {

MatrixD random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  MatrixD m(rows, cols);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : m.data()) v = g(rng);
  return m;
}

// Exact nearest rows in double precision, ties to the lowest index.
MatrixD nearest_rows_d(const MatrixD& bank, const MatrixD& q) {
  MatrixD out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < bank.rows(); ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < q.cols(); ++j) {
        const double diff = q(i, j) - bank(k, j);
        acc += diff * diff;
      }
      if (acc < best_d) {
        best_d = acc;
        best = k;
      }
    }
    std::copy(bank.row(best).begin(), bank.row(best).end(), out.row(i).begin());
  }
  return out;
}

PatchNeighbors<double> make_input(std::size_t n, const MatrixD& normal_bank, const MatrixD& abnormal_bank,
                                  std::mt19937_64& rng) {
  PatchNeighbors<double> in;
  in.q = random_matrix(n, normal_bank.cols(), rng);
  in.nn_normal = nearest_rows_d(normal_bank, in.q);
  in.nn_abnormal = nearest_rows_d(abnormal_bank, in.q);
  return in;
}

std::string group_of(const std::string& name) {
  if (name.starts_with("proj.")) return "projection";
  if (name.starts_with("attn.")) return "attention";
  return "mlp";
}

}  // namespace

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

GradCheckReport grad_check(const GradCheckSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  ModelShape shape;
  shape.c = spec.c;
  shape.num_blocks = spec.num_blocks;
  auto params = init_model<double>(shape, spec.seed + 1);
  // Move BN affine parameters off their identity init so their gradients are
  // exercised in a generic configuration.
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  for (auto& b : params.mlp.blocks) {
    for (auto& g : b.bn_gamma) g = 1.0 + jitter(rng);
    for (auto& be : b.bn_beta) be = jitter(rng);
  }

  const MatrixD normal_bank = random_matrix(spec.normal_bank_rows, spec.c, rng);
  const MatrixD abnormal_bank = random_matrix(spec.abnormal_bank_rows, spec.c, rng);
  TrainBatch<double> batch;
  batch.normal.push_back(make_input(spec.patches, normal_bank, abnormal_bank, rng));
  {
    Matrix<double> noise = random_matrix(spec.patches, 3 * spec.c, rng);
    for (auto& v : noise.data()) v *= spec.noise_std;
    batch.noise.push_back(std::move(noise));
  }
  LossConfig loss = spec.loss;
  if (spec.anomalous_patches > 0) {
    batch.anomalous.push_back(make_input(spec.anomalous_patches, normal_bank, abnormal_bank, rng));
  } else {
    loss.lambda2 = 0.0;
  }

  auto grads = zeros_like(params);
  std::vector<std::uint8_t> base_pattern;
  batch_loss(params, batch, spec.knowledge, loss, &grads, false, 1, &base_pattern);

  GradCheckReport report;
  for (const char* g : {"projection", "attention", "mlp"}) report.groups.push_back(GroupError{g, 0.0, 0, {}, 0});

  // Flatten parameter and gradient views in the same tensor order.
  std::vector<std::pair<TensorInfo, std::span<double>>> param_views;
  std::vector<std::span<double>> grad_views;
  for_each_tensor(params, [&](const TensorInfo& info, std::span<double> v) { param_views.emplace_back(info, v); });
  for_each_tensor(grads, [&](const TensorInfo&, std::span<double> v) { grad_views.push_back(v); });

  std::vector<std::uint8_t> pattern;
  ModelParams<double>* const no_grads = nullptr;
  for (std::size_t t = 0; t < param_views.size(); ++t) {
    const auto& [info, values] = param_views[t];
    if (!info.trainable) continue;
    auto& group = *std::find_if(report.groups.begin(), report.groups.end(),
                                [&](const GroupError& e) { return e.group == group_of(info.name); });
    const bool corrupt = !spec.corrupt_prefix.empty() && info.name.starts_with(spec.corrupt_prefix);
    for (std::size_t i = 0; i < values.size(); ++i) {
      double analytic = grad_views[t][i];
      if (corrupt) analytic *= spec.corrupt_factor;
      const double saved = values[i];
      // Central difference at h; false when the stencil crosses a kink.
      auto central = [&](double h, double& out) {
        values[i] = saved + h;
        const double up = batch_loss(params, batch, spec.knowledge, loss, no_grads, false, 1, &pattern).total;
        const bool up_ok = pattern == base_pattern;
        values[i] = saved - h;
        const double down = batch_loss(params, batch, spec.knowledge, loss, no_grads, false, 1, &pattern).total;
        const bool down_ok = pattern == base_pattern;
        values[i] = saved;
        out = (up - down) / (2.0 * h);
        return up_ok && down_ok;
      };
      std::optional<double> numeric;
      double h = spec.step;
      for (int attempt = 0; attempt < 3 && !numeric; ++attempt, h /= 10.0) {
        double coarse = 0.0;
        double fine = 0.0;
        if (!central(h, coarse)) {
          ++report.kink_retries;
          continue;
        }
        if (!spec.richardson) {
          numeric = coarse;
        } else if (central(h / 2.0, fine)) {
          numeric = (4.0 * fine - coarse) / 3.0;
        } else {
          ++report.kink_retries;
        }
      }
      if (!numeric) {
        ++report.skipped;
        continue;
      }
      const double denom = std::max({std::abs(analytic), std::abs(*numeric), spec.denominator_floor});
      const double rel = std::abs(analytic - *numeric) / denom;
      ++group.checked;
      if (rel > group.max_rel_error) {
        group.max_rel_error = rel;
        group.worst_tensor = info.name;
        group.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace dmad
