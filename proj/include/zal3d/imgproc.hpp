#pragma once

#include <cstddef>

#include "zal3d/data.hpp"

namespace zal3d {

using RealGrid = Grid<double>;

/// Bilinear resize with half-pixel centres (align_corners = false) and edge
/// clamping. Constant grids stay constant.
RealGrid resize_bilinear(const RealGrid& src, std::size_t height, std::size_t width);

/// Separable Gaussian blur. The kernel is truncated at radius ceil(4 sigma) and
/// renormalised over the in-bounds taps, so constants are preserved at borders.
RealGrid gaussian_blur(const RealGrid& src, double sigma);

/// Maps values to [0, 1] by (v - min) / (max - min); a constant grid maps to 0.
RealGrid minmax_normalize(const RealGrid& src);

}  // namespace zal3d
