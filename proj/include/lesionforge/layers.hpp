#pragma once

// The layer operations the DCGAN, LAPGAN and progressive architectures are
// assembled from. Images are laid out N x C x H x W, row-major.

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "lesionforge/parameter.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation. `weight_gain` multiplies the weights at run time
/// (equalized learning rate); gradients flow to the stored weights.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding, T weight_gain = T(1)) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                         weight.dim(3), stride, padding, 0, 0};
  if (weight.dim(1) != g.cin)
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  if (bias.shape() != Shape{g.cout})
    throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
    throw ShapeError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                     " exceeds padded input " + std::to_string(g.h + 2 * padding) + "x" +
                     std::to_string(g.w + 2 * padding));
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t K = g.patch(), P = g.positions();
  auto cols = std::make_shared<Buffer<T>>(g.n * K * P);
  Buffer<T> out(g.n * g.cout * P);
  detail::ConstMatrixMap<T> W(weight.data().data(), g.cout, K);
  for (std::size_t s = 0; s < g.n; ++s) {
    T* col = cols->data() + s * K * P;
    detail::im2col(input.data().data() + s * g.cin * g.h * g.w, g, col);
    detail::MatrixMap<T> Y(out.data() + s * g.cout * P, g.cout, P);
    Y.noalias() = weight_gain * (W * detail::ConstMatrixMap<T>(col, K, P));
    for (std::size_t c = 0; c < g.cout; ++c) Y.row(c).array() += bias[c];
  }

  auto pi = input.node(), pw = weight.node(), pb = bias.node();
  return Tensor<T>::from_op(
      "conv2d", {g.n, g.cout, g.ho, g.wo}, std::move(out), {pi, pw, pb},
      [pi, pw, pb, cols, g, weight_gain](detail::Node<T>& self) {
        const std::size_t K = g.patch(), P = g.positions();
        detail::ConstMatrixMap<T> W(pw->value.data(), g.cout, K);
        Buffer<T> dcol(pi->requires_grad ? K * P : 0);
        for (std::size_t s = 0; s < g.n; ++s) {
          detail::ConstMatrixMap<T> dY(self.grad.data() + s * g.cout * P, g.cout, P);
          detail::ConstMatrixMap<T> col(cols->data() + s * K * P, K, P);
          if (pw->requires_grad) {
            detail::MatrixMap<T> dW(pw->ensure_grad().data(), g.cout, K);
            dW.noalias() += weight_gain * (dY * col.transpose());
          }
          if (pb->requires_grad) {
            auto& db = pb->ensure_grad();
            for (std::size_t c = 0; c < g.cout; ++c) db[c] += dY.row(c).sum();
          }
          if (pi->requires_grad) {
            detail::MatrixMap<T> dC(dcol.data(), K, P);
            dC.noalias() = weight_gain * (W.transpose() * dY);
            detail::col2im(dcol.data(), g, pi->ensure_grad().data() + s * g.cin * g.h * g.w);
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Parameter<T>& weight, const Parameter<T>& bias, std::size_t stride,
                 std::size_t padding) {
  return conv2d(input, weight.tensor, bias.tensor, stride, padding, weight.lr_scale);
}

/// Affine map x W + b on N x D inputs.
template <class T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, T weight_gain = T(1)) {
  detail::require_rank(input.shape(), 2, "dense input");
  detail::require_rank(weight.shape(), 2, "dense weight");
  const std::size_t n = input.dim(0), d = input.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d)
    throw ShapeError("dense: input width " + std::to_string(d) + " does not match weight rows " +
                     std::to_string(weight.dim(0)));
  if (bias.shape() != Shape{k}) throw ShapeError("dense: bias shape " + shape_string(bias.shape()));

  Buffer<T> out(n * k);
  detail::MatrixMap<T> Y(out.data(), n, k);
  Y.noalias() = weight_gain * (detail::ConstMatrixMap<T>(input.data().data(), n, d) *
                               detail::ConstMatrixMap<T>(weight.data().data(), d, k));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) Y(r, c) += bias[c];

  auto pi = input.node(), pw = weight.node(), pb = bias.node();
  return Tensor<T>::from_op("dense", {n, k}, std::move(out), {pi, pw, pb},
                            [pi, pw, pb, n, d, k, weight_gain](detail::Node<T>& self) {
                              detail::ConstMatrixMap<T> dY(self.grad.data(), n, k);
                              if (pi->requires_grad) {
                                detail::MatrixMap<T> dX(pi->ensure_grad().data(), n, d);
                                dX.noalias() +=
                                    weight_gain * (dY * detail::ConstMatrixMap<T>(pw->value.data(), d, k).transpose());
                              }
                              if (pw->requires_grad) {
                                detail::MatrixMap<T> dW(pw->ensure_grad().data(), d, k);
                                dW.noalias() +=
                                    weight_gain * (detail::ConstMatrixMap<T>(pi->value.data(), n, d).transpose() * dY);
                              }
                              if (pb->requires_grad) {
                                auto& db = pb->ensure_grad();
                                for (std::size_t c = 0; c < k; ++c) db[c] += dY.col(c).sum();
                              }
                            });
}

template <class T>
Tensor<T> dense(const Tensor<T>& input, const Parameter<T>& weight, const Parameter<T>& bias) {
  return dense(input, weight.tensor, bias.tensor, weight.lr_scale);
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope = T(0.2)) {
  Buffer<T> v(input.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = input[i] >= T(0) ? input[i] : slope * input[i];
  auto pi = input.node();
  return Tensor<T>::from_op("leaky_relu", input.shape(), std::move(v), {pi}, [pi, slope](detail::Node<T>& self) {
    if (!pi->requires_grad) return;
    auto& g = pi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (pi->value[i] >= T(0) ? T(1) : slope);
  });
}

template <class T>
Tensor<T> tanh_act(const Tensor<T>& input) {
  Buffer<T> v(input.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(input[i]);
  auto pi = input.node();
  return Tensor<T>::from_op("tanh", input.shape(), std::move(v), {pi}, [pi](detail::Node<T>& self) {
    if (!pi->requires_grad) return;
    auto& g = pi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
  });
}

template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "upsample2x_nearest");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  Buffer<T> v(input.size() * 4);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x) v[(p * 2 * h + y) * 2 * w + x] = input[(p * h + y / 2) * w + x / 2];
  auto pi = input.node();
  return Tensor<T>::from_op("upsample2x_nearest", {input.dim(0), input.dim(1), 2 * h, 2 * w}, std::move(v), {pi},
                            [pi, planes, h, w](detail::Node<T>& self) {
                              if (!pi->requires_grad) return;
                              auto& g = pi->ensure_grad();
                              for (std::size_t p = 0; p < planes; ++p)
                                for (std::size_t y = 0; y < 2 * h; ++y)
                                  for (std::size_t x = 0; x < 2 * w; ++x)
                                    g[(p * h + y / 2) * w + x / 2] += self.grad[(p * 2 * h + y) * 2 * w + x];
                            });
}

template <class T>
Tensor<T> downsample2x_avg(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "downsample2x_avg");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2)
    throw ShapeError("downsample2x_avg: extents must be even, got " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t ho = h / 2, wo = w / 2;
  Buffer<T> v(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        const T* src = input.data().data() + (p * h + 2 * y) * w + 2 * x;
        v[(p * ho + y) * wo + x] = ((src[0] + src[1]) + (src[w] + src[w + 1])) * T(0.25);
      }
  auto pi = input.node();
  return Tensor<T>::from_op("downsample2x_avg", {input.dim(0), input.dim(1), ho, wo}, std::move(v), {pi},
                            [pi, planes, h, w](detail::Node<T>& self) {
                              if (!pi->requires_grad) return;
                              auto& g = pi->ensure_grad();
                              for (std::size_t p = 0; p < planes; ++p)
                                for (std::size_t y = 0; y < h; ++y)
                                  for (std::size_t x = 0; x < w; ++x)
                                    g[(p * h + y) * w + x] +=
                                        T(0.25) * self.grad[(p * (h / 2) + y / 2) * (w / 2) + x / 2];
                            });
}

/// Divides each pixel's channel vector by its root-mean-square.
template <class T>
Tensor<T> pixelnorm(const Tensor<T>& input, T epsilon = T(1e-8)) {
  detail::require_rank(input.shape(), 4, "pixelnorm");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto inv_rms = std::make_shared<Buffer<T>>(n * hw);
  Buffer<T> v(input.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      T acc = T(0);
      for (std::size_t k = 0; k < c; ++k) {
        T x = input[(s * c + k) * hw + p];
        acc += x * x;
      }
      T r = T(1) / std::sqrt(acc / static_cast<T>(c) + epsilon);
      (*inv_rms)[s * hw + p] = r;
      for (std::size_t k = 0; k < c; ++k) v[(s * c + k) * hw + p] = input[(s * c + k) * hw + p] * r;
    }
  auto pi = input.node();
  return Tensor<T>::from_op("pixelnorm", input.shape(), std::move(v), {pi},
                            [pi, inv_rms, n, c, hw](detail::Node<T>& self) {
                              if (!pi->requires_grad) return;
                              auto& g = pi->ensure_grad();
                              for (std::size_t s = 0; s < n; ++s)
                                for (std::size_t p = 0; p < hw; ++p) {
                                  const T r = (*inv_rms)[s * hw + p];
                                  T dot = T(0);
                                  for (std::size_t k = 0; k < c; ++k) {
                                    const std::size_t i = (s * c + k) * hw + p;
                                    dot += self.grad[i] * pi->value[i];
                                  }
                                  const T coef = dot * r * r * r / static_cast<T>(c);
                                  for (std::size_t k = 0; k < c; ++k) {
                                    const std::size_t i = (s * c + k) * hw + p;
                                    g[i] += self.grad[i] * r - pi->value[i] * coef;
                                  }
                                }
                            });
}

/// Appends one channel holding the average (over C, H, W) of the per-position
/// population standard deviation across the batch.
template <class T>
Tensor<T> minibatch_stddev(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "minibatch_stddev");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::size_t per = c * hw;
  auto mu = std::make_shared<Buffer<T>>(per, T(0));
  auto sd = std::make_shared<Buffer<T>>(per, T(0));
  // Mean taken relative to the first sample so identical samples give an
  // exactly zero spread.
  for (std::size_t p = 0; p < per; ++p) {
    T shift = T(0);
    for (std::size_t s = 1; s < n; ++s) shift += input[s * per + p] - input[p];
    (*mu)[p] = input[p] + shift / static_cast<T>(n);
  }
  T stat = T(0);
  for (std::size_t p = 0; p < per; ++p) {
    T var = T(0);
    for (std::size_t s = 0; s < n; ++s) {
      T d = input[s * per + p] - (*mu)[p];
      var += d * d;
    }
    (*sd)[p] = std::sqrt(var / static_cast<T>(n));
    stat += (*sd)[p];
  }
  stat /= static_cast<T>(per);

  Buffer<T> v(n * (per + hw));
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(input.data().begin() + s * per, per, v.begin() + s * (per + hw));
    std::fill_n(v.begin() + s * (per + hw) + per, hw, stat);
  }
  auto pi = input.node();
  return Tensor<T>::from_op(
      "minibatch_stddev", {n, c + 1, input.dim(2), input.dim(3)}, std::move(v), {pi},
      [pi, mu, sd, n, per, hw](detail::Node<T>& self) {
        if (!pi->requires_grad) return;
        auto& g = pi->ensure_grad();
        T dstat = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t p = 0; p < per; ++p) g[s * per + p] += self.grad[s * (per + hw) + p];
          for (std::size_t p = 0; p < hw; ++p) dstat += self.grad[s * (per + hw) + per + p];
        }
        // d sd_p / d x_{s,p} = (x - mu) / (n * sd_p); zero where the spread vanishes.
        for (std::size_t p = 0; p < per; ++p) {
          if ((*sd)[p] <= T(0)) continue;
          const T coef = dstat / (static_cast<T>(per) * static_cast<T>(n) * (*sd)[p]);
          for (std::size_t s = 0; s < n; ++s) g[s * per + p] += coef * (pi->value[s * per + p] - (*mu)[p]);
        }
      });
}

/// Replicates an N x K matrix over an H x W grid, giving N x K x H x W.
template <class T>
Tensor<T> broadcast_spatial(const Tensor<T>& input, std::size_t height, std::size_t width) {
  detail::require_rank(input.shape(), 2, "broadcast_spatial");
  const std::size_t rows = input.size(), hw = height * width;
  Buffer<T> v(rows * hw);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(v.begin() + r * hw, hw, input[r]);
  auto pi = input.node();
  return Tensor<T>::from_op("broadcast_spatial", {input.dim(0), input.dim(1), height, width}, std::move(v), {pi},
                            [pi, rows, hw](detail::Node<T>& self) {
                              if (!pi->requires_grad) return;
                              auto& g = pi->ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t p = 0; p < hw; ++p) g[r] += self.grad[r * hw + p];
                            });
}

template <class T>
Tensor<T> flatten(const Tensor<T>& input) {
  return reshape(input, {input.dim(0), input.size() / input.dim(0)});
}

}  // namespace lesionforge
