#pragma once

// Latent sampling, interpolation walks and image grids.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/data.hpp"
#include "lesionforge/random.hpp"

namespace lesionforge {

struct LatentVector {
  std::vector<double> values;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  std::size_t dim() const { return values.size(); }
};

/// Standard-normal entries, deterministic per (seed, index).
inline LatentVector sample_latent(std::uint64_t seed, std::uint64_t index, std::size_t dim) {
  Rng rng = make_rng(seed, {stream::kLatent, index});
  LatentVector z{std::vector<double>(dim), seed, index};
  fill_normal<double>(z.values, rng);
  return z;
}

inline std::vector<LatentVector> sample_latents(std::uint64_t seed, std::size_t n, std::size_t dim, std::uint64_t first = 0) {
  if (n < 1) throw ArgumentError("sample_latents needs n >= 1");
  std::vector<LatentVector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_latent(seed, first + i, dim));
  return out;
}

template <class T>
Tensor<T> latents_to_tensor(const std::vector<LatentVector>& zs) {
  if (zs.empty()) throw ArgumentError("no latent vectors");
  const std::size_t dim = zs[0].dim();
  std::vector<T> v;
  v.reserve(zs.size() * dim);
  for (const auto& z : zs) {
    if (z.dim() != dim) throw ShapeError("latent dimensions differ within a batch");
    for (double x : z.values) v.push_back(static_cast<T>(x));
  }
  return Tensor<T>({zs.size(), dim}, std::move(v));
}

enum class InterpolationMode { kLinear, kSpherical };

inline InterpolationMode parse_interpolation_mode(const std::string& s) {
  if (s == "linear") return InterpolationMode::kLinear;
  if (s == "spherical" || s == "slerp") return InterpolationMode::kSpherical;
  throw ArgumentError("unknown interpolation mode '" + s + "' (linear|spherical)");
}

inline const char* to_string(InterpolationMode m) { return m == InterpolationMode::kLinear ? "linear" : "spherical"; }

/// `steps` points from z1 to z2 at t = k / (steps - 1); endpoints are copies.
inline std::vector<LatentVector> interpolate(const LatentVector& z1, const LatentVector& z2, std::size_t steps,
                                             InterpolationMode mode = InterpolationMode::kLinear) {
  if (z1.dim() != z2.dim()) throw ShapeError("interpolate: latent dimensions differ");
  if (steps < 2) throw ArgumentError("interpolate needs steps >= 2");
  const std::size_t d = z1.dim();
  double n1 = 0, n2 = 0, dot = 0;
  for (std::size_t i = 0; i < d; ++i) {
    n1 += z1.values[i] * z1.values[i];
    n2 += z2.values[i] * z2.values[i];
    dot += z1.values[i] * z2.values[i];
  }
  n1 = std::sqrt(n1);
  n2 = std::sqrt(n2);
  double omega = 0;
  if (mode == InterpolationMode::kSpherical) {
    if (n1 == 0 || n2 == 0) throw ArgumentError("spherical interpolation of a zero vector");
    omega = std::acos(std::clamp(dot / (n1 * n2), -1.0, 1.0));
    if (std::sin(omega) < 1e-12 && omega > 1.0) throw ArgumentError("spherical interpolation between opposite vectors is undefined");
  }
  std::vector<LatentVector> out;
  out.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    if (k == 0) {
      out.push_back(z1);
      continue;
    }
    if (k == steps - 1) {
      out.push_back(z2);
      continue;
    }
    const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
    double a = 1 - t, b = t;
    if (mode == InterpolationMode::kSpherical && std::sin(omega) >= 1e-12) {
      a = std::sin((1 - t) * omega) / std::sin(omega);
      b = std::sin(t * omega) / std::sin(omega);
    }
    LatentVector z{std::vector<double>(d), z1.seed, z1.index};
    for (std::size_t i = 0; i < d; ++i) z.values[i] = a * z1.values[i] + b * z2.values[i];
    out.push_back(std::move(z));
  }
  return out;
}

struct WalkSpec {
  std::vector<std::uint64_t> anchor_seeds;
  std::size_t steps = 8;  // points per segment, anchors included
  InterpolationMode mode = InterpolationMode::kLinear;

  void validate() const {
    if (anchor_seeds.size() < 2) throw ArgumentError("a walk needs at least 2 anchors");
    if (steps < 2) throw ArgumentError("a walk needs steps >= 2");
  }

  nlohmann::json to_json() const { return {{"anchors", anchor_seeds}, {"steps", steps}, {"mode", to_string(mode)}}; }

  static WalkSpec from_json(const nlohmann::json& j) {
    WalkSpec w;
    w.anchor_seeds = j.at("anchors").get<std::vector<std::uint64_t>>();
    w.steps = j.value("steps", w.steps);
    w.mode = parse_interpolation_mode(j.value("mode", std::string("linear")));
    w.validate();
    return w;
  }
};

/// Latent path through every anchor; shared anchors appear once.
inline std::vector<LatentVector> walk_latents(const WalkSpec& spec, std::size_t dim) {
  spec.validate();
  std::vector<LatentVector> anchors;
  for (auto s : spec.anchor_seeds) anchors.push_back(sample_latent(s, 0, dim));
  std::vector<LatentVector> path;
  for (std::size_t a = 0; a + 1 < anchors.size(); ++a) {
    auto seg = interpolate(anchors[a], anchors[a + 1], spec.steps, spec.mode);
    path.insert(path.end(), seg.begin() + (a == 0 ? 0 : 1), seg.end());
  }
  return path;
}

/// Images along the walk, N x 3 x r x r. `generate` maps a latent batch to
/// images.
template <class T, class Generate>
Tensor<T> manifold_walk(Generate&& generate, std::size_t latent_dim, const WalkSpec& spec) {
  return generate(latents_to_tensor<T>(walk_latents(spec, latent_dim))).detach();
}

/// Mean |a_i - b_j| between sample i of `a` and sample j of `b`.
template <class T>
double mean_abs_difference(const Tensor<T>& a, std::size_t i, const Tensor<T>& b, std::size_t j) {
  const std::size_t per = a.size() / a.dim(0);
  if (b.size() / b.dim(0) != per) throw ShapeError("mean_abs_difference: sample sizes differ");
  double s = 0;
  for (std::size_t k = 0; k < per; ++k) s += std::abs(static_cast<double>(a[i * per + k]) - static_cast<double>(b[j * per + k]));
  return s / static_cast<double>(per);
}

/// Smallest mean |.| distance from sample i of `images` to any training image.
template <class T>
double nearest_neighbor_distance(const Tensor<T>& images, std::size_t i, const std::vector<ImageRecord>& training) {
  double best = std::numeric_limits<double>::infinity();
  const std::size_t per = images.size() / images.dim(0);
  for (const auto& rec : training) {
    if (rec.pixels.size() != per) throw ShapeError("nearest_neighbor_distance: resolution mismatch with " + rec.source);
    double s = 0;
    for (std::size_t k = 0; k < per; ++k) s += std::abs(static_cast<double>(images[i * per + k]) - rec.pixels[k]);
    best = std::min(best, s / static_cast<double>(per));
  }
  return best;
}

inline constexpr std::uint8_t kGridBorder[3] = {255, 255, 255};

/// Row-major tiling of N x 3 x r x r images; each cell is r + 2*border wide.
template <class T>
RgbImage grid_image(const Tensor<T>& images, std::size_t columns, std::size_t border = 1) {
  if (columns == 0) throw ArgumentError("grid needs at least one column");
  if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != 3)
    throw ShapeError("grid expects N x 3 x H x W images, got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  const std::size_t rows = (n + columns - 1) / columns, ch = h + 2 * border, cw = w + 2 * border;
  RgbImage out(rows * ch, columns * cw);
  for (std::size_t p = 0; p < out.pixels.size(); p += 3) std::copy_n(kGridBorder, 3, &out.pixels[p]);
  for (std::size_t s = 0; s < n; ++s) {
    const RgbImage cell = denormalize(images, s);
    const std::size_t oy = (s / columns) * ch + border, ox = (s % columns) * cw + border;
    for (std::size_t y = 0; y < h; ++y) std::copy_n(&cell.pixels[y * w * 3], w * 3, &out.at(oy + y, ox, 0));
  }
  return out;
}

template <class T>
std::vector<std::uint8_t> render_grid(const Tensor<T>& images, std::size_t columns, std::size_t border = 1) {
  return encode_png(grid_image(images, columns, border));
}

}  // namespace lesionforge
