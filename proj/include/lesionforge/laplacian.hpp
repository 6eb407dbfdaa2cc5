#pragma once

#include <string>
#include <vector>

#include "lesionforge/layers.hpp"

namespace lesionforge {

template <class T>
struct LaplacianPyramid {
  std::vector<Tensor<T>> residuals;  // finest first
  Tensor<T> base;
};

/// residual_i = x_i - up(down(x_i)), x_{i+1} = down(x_i); base = x_levels.
template <class T>
LaplacianPyramid<T> laplacian_decompose(const Tensor<T>& image, std::size_t levels) {
  if (image.rank() != 4) throw ShapeError("laplacian_decompose: expected N x C x H x W");
  const std::size_t div = std::size_t{1} << levels;
  if (image.dim(2) % div || image.dim(3) % div)
    throw ShapeError("laplacian_decompose: extents " + std::to_string(image.dim(2)) + "x" +
                     std::to_string(image.dim(3)) + " not divisible by 2^" + std::to_string(levels));
  LaplacianPyramid<T> pyr;
  Tensor<T> current = image;
  for (std::size_t i = 0; i < levels; ++i) {
    Tensor<T> down = downsample2x_avg(current);
    pyr.residuals.push_back(sub(current, upsample2x_nearest(down)));
    current = down;
  }
  pyr.base = current;
  return pyr;
}

template <class T>
Tensor<T> laplacian_reconstruct(const std::vector<Tensor<T>>& residuals, const Tensor<T>& base) {
  Tensor<T> current = base;
  for (auto it = residuals.rbegin(); it != residuals.rend(); ++it) {
    Tensor<T> up = upsample2x_nearest(current);
    if (up.shape() != it->shape())
      throw ShapeError("laplacian_reconstruct: residual " + shape_string(it->shape()) + " does not follow " +
                       shape_string(current.shape()));
    current = add(up, *it);
  }
  return current;
}

template <class T>
Tensor<T> laplacian_reconstruct(const LaplacianPyramid<T>& pyr) {
  return laplacian_reconstruct(pyr.residuals, pyr.base);
}

/// (1 - alpha) * coarse + alpha * fine, with coarse already at fine resolution.
template <class T>
Tensor<T> fade_blend(const Tensor<T>& coarse, const Tensor<T>& fine, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("fade_blend: alpha " + std::to_string(alpha) + " outside [0,1]");
  if (coarse.shape() != fine.shape())
    throw ShapeError("fade_blend: " + shape_string(coarse.shape()) + " vs " + shape_string(fine.shape()));
  if (alpha == 0.0) return coarse;
  if (alpha == 1.0) return fine;
  return add(scale(coarse, static_cast<T>(1.0 - alpha)), scale(fine, static_cast<T>(alpha)));
}

}  // namespace lesionforge
