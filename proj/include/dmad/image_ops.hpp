#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dmad/matrix.hpp"

namespace dmad {

// Bilinear resampling with the pixel-center (align_corners = false) convention:
// output pixel i samples source coordinate (i + 0.5) * in / out - 0.5, clamped
// at the low edge.
MatrixD bilinear_resize(const MatrixD& in, std::size_t out_h, std::size_t out_w);

// Separable Gaussian blur, kernel truncated at radius round(4 * sigma) and
// half-sample-symmetric ("reflect") borders. sigma == 0 returns the input.
MatrixD gaussian_blur(const MatrixD& in, double sigma);

// Normalized 1-D kernel used by gaussian_blur.
std::vector<double> gaussian_kernel(double sigma);

// Labels foreground (nonzero) pixels into connected components. Returns labels
// 1..count for foreground and 0 for background; connectivity is 4 or 8.
struct ComponentLabels {
  Matrix<std::int32_t> labels;
  std::int32_t count = 0;
};
ComponentLabels label_components(const Matrix<std::uint8_t>& binary, int connectivity = 8);

}  // namespace dmad
