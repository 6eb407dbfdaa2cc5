#pragma once

// Sliced Wasserstein distance between image sets over Laplacian-pyramid
// patch descriptors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/laplacian.hpp"
#include "lesionforge/random.hpp"
#include "lesionforge/schedule.hpp"

namespace lesionforge {

struct SwdConfig {
  std::size_t patch_size = 7;
  std::size_t patches_per_image = 64;
  std::size_t n_projections = 512;
  std::size_t n_repeats = 4;
  std::size_t min_resolution = 16;  // coarsest pyramid level
  std::uint64_t seed = 0;

  void validate() const {
    if (patch_size % 2 == 0) throw ArgumentError("SWD patch size must be odd");
    if (!patch_size || !patches_per_image || !n_projections || !n_repeats || !min_resolution)
      throw ArgumentError("SWD counts must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"patch_size", patch_size},         {"patches_per_image", patches_per_image},
            {"n_projections", n_projections},   {"n_repeats", n_repeats},
            {"min_resolution", min_resolution}, {"seed", seed}};
  }

  /// Keys present in `j` override `base`.
  static SwdConfig from_json(const nlohmann::json& j) { return from_json(j, SwdConfig()); }

  static SwdConfig from_json(const nlohmann::json& j, SwdConfig base) {
    base.patch_size = j.value("patch_size", base.patch_size);
    base.patches_per_image = j.value("patches_per_image", base.patches_per_image);
    base.n_projections = j.value("n_projections", base.n_projections);
    base.n_repeats = j.value("n_repeats", base.n_repeats);
    base.min_resolution = j.value("min_resolution", base.min_resolution);
    base.seed = j.value("seed", base.seed);
    return base;
  }
};

using DescriptorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DescriptorSet {
  std::size_t resolution = 0;
  DescriptorMatrix descriptors;  // one row per patch, channel-major 3 x p x p
};

/// Pyramid level resolutions, finest first, down to config.min_resolution
/// (or the image resolution itself when smaller).
inline std::vector<std::size_t> swd_levels(std::size_t resolution, const SwdConfig& config) {
  std::vector<std::size_t> out{resolution};
  while (out.back() / 2 >= config.min_resolution && out.back() % 2 == 0) out.push_back(out.back() / 2);
  return out;
}

/// Normalizes each channel block of columns to zero mean / unit std over
/// the whole set.
inline void normalize_descriptors(DescriptorMatrix& d, std::size_t channels) {
  if (d.rows() == 0) return;
  const Eigen::Index per = d.cols() / static_cast<Eigen::Index>(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    auto block = d.middleCols(static_cast<Eigen::Index>(c) * per, per);
    const double mean = block.mean();
    block.array() -= mean;
    const double sd = std::sqrt(block.array().square().mean());
    if (sd > 0) block.array() /= sd;
  }
}

template <class T>
DescriptorSet build_descriptors(const Tensor<T>& images, std::size_t level, const SwdConfig& config, Rng& rng) {
  config.validate();
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != images.dim(3))
    throw ShapeError("SWD expects N x 3 x R x R images, got " + shape_string(images.shape()));
  const auto levels = swd_levels(images.dim(2), config);
  if (level >= levels.size())
    throw ArgumentError("SWD level " + std::to_string(level) + " deeper than the " + std::to_string(levels.size()) +
                        "-level pyramid");
  const std::size_t n = images.dim(0), r = levels[level], p = config.patch_size;
  if (p > r) throw ArgumentError("SWD patch size " + std::to_string(p) + " exceeds level resolution " + std::to_string(r));

  auto pyr = laplacian_decompose(images.detach(), levels.size() - 1);
  const Tensor<T>& band = level + 1 < levels.size() ? pyr.residuals[level] : pyr.base;

  DescriptorSet set{r, DescriptorMatrix(static_cast<Eigen::Index>(n * config.patches_per_image), 3 * p * p)};
  std::uniform_int_distribution<std::size_t> pos(0, r - p);
  const auto src = band.data();
  Eigen::Index row = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < config.patches_per_image; ++k, ++row) {
      const std::size_t y0 = pos(rng), x0 = pos(rng);
      Eigen::Index col = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            set.descriptors(row, col++) = static_cast<double>(src[((s * 3 + c) * r + y0 + y) * r + x0 + x]);
    }
  normalize_descriptors(set.descriptors, 3);
  return set;
}

/// Mean |a_(i) - b_(i)| after sorting both; inputs must be equal length.
inline double w1_sorted(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.empty()) throw ArgumentError("w1_sorted needs equal non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Sliced W1 over explicit projection directions (columns, unit norm).
/// Direction results are summed in column order.
inline double sliced_w1(const DescriptorMatrix& a, const DescriptorMatrix& b, const Eigen::MatrixXd& directions) {
  if (a.rows() == 0 || b.rows() == 0) throw ArgumentError("sliced_w1: empty descriptor set");
  if (a.rows() != b.rows()) throw ArgumentError("sliced_w1: sets must have equal cardinality");
  if (a.cols() != b.cols() || a.cols() != directions.rows()) throw ShapeError("sliced_w1: descriptor length mismatch");
  const Eigen::Index n = a.rows(), chunk = 32;
  double total = 0;
  std::vector<double> pa(static_cast<std::size_t>(n)), pb(pa.size());
  for (Eigen::Index j0 = 0; j0 < directions.cols(); j0 += chunk) {
    const Eigen::Index m = std::min(chunk, directions.cols() - j0);
    const Eigen::MatrixXd proj_a = a * directions.middleCols(j0, m);
    const Eigen::MatrixXd proj_b = b * directions.middleCols(j0, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      std::copy_n(proj_a.col(j).data(), n, pa.begin());
      std::copy_n(proj_b.col(j).data(), n, pb.begin());
      std::sort(pa.begin(), pa.end());
      std::sort(pb.begin(), pb.end());
      double s = 0;
      for (std::size_t i = 0; i < pa.size(); ++i) s += std::abs(pa[i] - pb[i]);
      total += s / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(directions.cols());
}

inline Eigen::MatrixXd random_directions(std::size_t dim, std::size_t count, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd d(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));
  for (Eigen::Index j = 0; j < d.cols(); ++j) {
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, j) = normal(rng);
    d.col(j).normalize();
  }
  return d;
}

namespace detail {
inline DescriptorMatrix subsample_rows(const DescriptorMatrix& m, Eigen::Index rows, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(rows); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::sort(idx.begin(), idx.begin() + rows);
  DescriptorMatrix out(rows, m.cols());
  for (Eigen::Index r = 0; r < rows; ++r) out.row(r) = m.row(idx[static_cast<std::size_t>(r)]);
  return out;
}
}  // namespace detail

/// Sliced W1 with seeded random directions; the larger set is subsampled
/// (seeded) to the smaller one's cardinality.
inline double sliced_w1(const DescriptorSet& a, const DescriptorSet& b, std::size_t n_projections, std::uint64_t seed) {
  if (a.descriptors.rows() == 0 || b.descriptors.rows() == 0) throw ArgumentError("sliced_w1: empty descriptor set");
  Rng rng = make_rng(seed, {stream::kSwd, 1});
  const Eigen::Index n = std::min(a.descriptors.rows(), b.descriptors.rows());
  Rng sub = make_rng(seed, {stream::kSwd, 2});
  const DescriptorMatrix& da = a.descriptors.rows() > n ? detail::subsample_rows(a.descriptors, n, sub) : a.descriptors;
  const DescriptorMatrix& db = b.descriptors.rows() > n ? detail::subsample_rows(b.descriptors, n, sub) : b.descriptors;
  return sliced_w1(da, db, random_directions(static_cast<std::size_t>(a.descriptors.cols()), n_projections, rng));
}

struct SwdReport {
  std::map<std::size_t, double> levels;  // resolution -> distance, unscaled
  double average = 0;
  double scale = 1e3;
  SwdConfig config;

  nlohmann::json to_json() const {
    nlohmann::json lv = nlohmann::json::object();
    for (const auto& [res, d] : levels) lv[std::to_string(res)] = d * scale;
    return {{"levels", lv}, {"average", average * scale}, {"scale", scale}, {"config", config.to_json()}};
  }
};

/// Per-level sliced W1 averaged over n_repeats projection draws. Patch
/// positions come from the same seeded stream for both sets.
template <class T>
SwdReport swd_report(const Tensor<T>& real, const Tensor<T>& fake, const SwdConfig& config) {
  config.validate();
  if (real.rank() != 4 || fake.rank() != 4 || real.dim(0) == 0 || fake.dim(0) == 0)
    throw ArgumentError("swd_report needs two non-empty image batches");
  if (real.dim(2) != fake.dim(2) || real.dim(3) != fake.dim(3))
    throw ShapeError("swd_report: resolution mismatch " + shape_string(real.shape()) + " vs " + shape_string(fake.shape()));
  SwdReport report;
  report.config = config;
  const auto levels = swd_levels(real.dim(2), config);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    Rng pa = make_rng(config.seed, {stream::kSwd, 10, l});
    Rng pb = make_rng(config.seed, {stream::kSwd, 10, l});
    DescriptorSet a = build_descriptors(real, l, config, pa);
    DescriptorSet b = build_descriptors(fake, l, config, pb);
    double sum = 0;
    for (std::size_t rep = 0; rep < config.n_repeats; ++rep)
      sum += sliced_w1(a, b, config.n_projections, derive_seed(config.seed, {stream::kSwd, 20, l, rep}));
    report.levels[levels[l]] = sum / static_cast<double>(config.n_repeats);
  }
  double total = 0;
  for (const auto& [res, d] : report.levels) total += d;
  report.average = total / static_cast<double>(report.levels.size());
  return report;
}

}  // namespace lesionforge
