#include "dmad/image_ops.hpp"

#include <cmath>
#include <deque>

namespace dmad {

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  // Source coordinate (2i + 1) * in / (2 * out) - 0.5 from an exact integer
  // numerator, so integer-aligned samples get a fraction of exactly zero.
  std::vector<Tap> taps(out);
  const auto den = static_cast<std::int64_t>(2 * out);
  for (std::size_t i = 0; i < out; ++i) {
    std::int64_t num = static_cast<std::int64_t>((2 * i + 1) * in) - static_cast<std::int64_t>(out);
    if (num < 0) num = 0;
    std::size_t lo = static_cast<std::size_t>(num / den);
    double frac = static_cast<double>(num % den) / static_cast<double>(den);
    if (lo > in - 1) {
      lo = in - 1;
      frac = 0.0;
    }
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, frac};
  }
  return taps;
}

// Half-sample symmetric reflection: d c b a | a b c d | d c b a.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

}  // namespace

MatrixD bilinear_resize(const MatrixD& in, std::size_t out_h, std::size_t out_w) {
  if (in.rows() == 0 || in.cols() == 0 || out_h == 0 || out_w == 0) {
    throw ValidationError("bilinear_resize: zero dimension");
  }
  const auto ty = bilinear_taps(in.rows(), out_h);
  const auto tx = bilinear_taps(in.cols(), out_w);
  MatrixD out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& b = tx[x];
      // lerp form keeps constant regions exactly constant
      const double top = in(a.lo, b.lo) + b.frac * (in(a.lo, b.hi) - in(a.lo, b.lo));
      const double bot = in(a.hi, b.lo) + b.frac * (in(a.hi, b.hi) - in(a.hi, b.lo));
      out(y, x) = top + a.frac * (bot - top);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) return {1.0};
  const auto radius = static_cast<std::ptrdiff_t>(4.0 * sigma + 0.5);
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

MatrixD gaussian_blur(const MatrixD& in, double sigma) {
  if (sigma < 0.0 || !std::isfinite(sigma)) throw ValidationError("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0 || in.empty()) return in;
  const auto k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t h = in.rows();
  const std::size_t w = in.cols();

  // Accumulates weighted deviations from the center sample; equal to the plain
  // weighted sum because the kernel sums to 1, and exact on constant input.
  MatrixD tmp(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double center = in(y, x);
      double acc = 0.0;
      for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
        acc += k[static_cast<std::size_t>(d + radius)] *
               (in(y, reflect_index(static_cast<std::ptrdiff_t>(x) + d, w)) - center);
      }
      tmp(y, x) = center + acc;
    }
  }
  MatrixD out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double center = tmp(y, x);
      double acc = 0.0;
      for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
        acc += k[static_cast<std::size_t>(d + radius)] *
               (tmp(reflect_index(static_cast<std::ptrdiff_t>(y) + d, h), x) - center);
      }
      out(y, x) = center + acc;
    }
  }
  return out;
}

ComponentLabels label_components(const Matrix<std::uint8_t>& binary, int connectivity) {
  if (connectivity != 4 && connectivity != 8) {
    throw ValidationError("label_components: connectivity must be 4 or 8");
  }
  const std::size_t h = binary.rows();
  const std::size_t w = binary.cols();
  ComponentLabels result{Matrix<std::int32_t>(h, w, 0), 0};
  std::deque<std::pair<std::size_t, std::size_t>> frontier;
  for (std::size_t y0 = 0; y0 < h; ++y0) {
    for (std::size_t x0 = 0; x0 < w; ++x0) {
      if (binary(y0, x0) == 0 || result.labels(y0, x0) != 0) continue;
      const std::int32_t label = ++result.count;
      result.labels(y0, x0) = label;
      frontier.emplace_back(y0, x0);
      while (!frontier.empty()) {
        const auto [y, x] = frontier.front();
        frontier.pop_front();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            if (connectivity == 4 && dy != 0 && dx != 0) continue;
            const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
            const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) ||
                nx >= static_cast<std::ptrdiff_t>(w)) {
              continue;
            }
            const auto uy = static_cast<std::size_t>(ny);
            const auto ux = static_cast<std::size_t>(nx);
            if (binary(uy, ux) != 0 && result.labels(uy, ux) == 0) {
              result.labels(uy, ux) = label;
              frontier.emplace_back(uy, ux);
            }
          }
        }
      }
    }
  }
  return result;
}

}  // namespace dmad
