#include <gtest/gtest.h>

#include "lesionforge/gan_zoo.hpp"
#include "lesionforge/latent.hpp"

using namespace lesionforge;

namespace {
double norm(const LatentVector& z) {
  double s = 0;
  for (double v : z.values) s += v * v;
  return std::sqrt(s);
}
}  // namespace

TEST(Latent, SameSeedSameVectors) {
  auto a = sample_latents(3, 5, 128), b = sample_latents(3, 5, 128);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i].values, b[i].values);
  EXPECT_NE(a[0].values, a[1].values);
  EXPECT_EQ(sample_latent(3, 4, 128).values, a[4].values);
  EXPECT_THROW(sample_latents(3, 0, 128), ArgumentError);
}

TEST(Latent, MomentsOverTenThousandDraws) {
  auto zs = sample_latents(17, 10000, 16);
  for (std::size_t d = 0; d < 16; ++d) {
    double m = 0, v = 0;
    for (const auto& z : zs) m += z.values[d];
    m /= zs.size();
    for (const auto& z : zs) v += (z.values[d] - m) * (z.values[d] - m);
    v /= zs.size();
    EXPECT_LT(std::abs(m), 0.05) << d;
    EXPECT_LT(std::abs(v - 1), 0.05) << d;
  }
}

TEST(Interpolate, EndpointsAndMidpoint) {
  auto z1 = sample_latent(1, 0, 32), z2 = sample_latent(2, 0, 32);
  for (auto mode : {InterpolationMode::kLinear, InterpolationMode::kSpherical}) {
    auto path = interpolate(z1, z2, 5, mode);
    ASSERT_EQ(path.size(), 5u);
    EXPECT_EQ(path.front().values, z1.values);
    EXPECT_EQ(path.back().values, z2.values);
  }
  auto lin = interpolate(z1, z2, 3);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_DOUBLE_EQ(lin[1].values[i], (z1.values[i] + z2.values[i]) / 2);
}

TEST(Interpolate, LinearPathIsAffine) {
  auto z1 = sample_latent(1, 0, 32), z2 = sample_latent(2, 0, 32);
  auto path = interpolate(z1, z2, 7);
  // points at t = 1/6, 3/6, 5/6 are collinear with the endpoints
  for (std::size_t k : {1u, 3u, 5u}) {
    const double t = k / 6.0;
    double residual = 0;
    for (std::size_t i = 0; i < 32; ++i)
      residual = std::max(residual, std::abs(path[k].values[i] - (z1.values[i] + t * (z2.values[i] - z1.values[i]))));
    EXPECT_LT(residual, 1e-6);
  }
}

TEST(Interpolate, SphericalPreservesEqualNorms) {
  auto z1 = sample_latent(5, 0, 128), z2 = sample_latent(6, 0, 128);
  const double target = norm(z1);
  for (double& v : z2.values) v *= target / norm(sample_latent(6, 0, 128));
  for (const auto& z : interpolate(z1, z2, 20, InterpolationMode::kSpherical)) EXPECT_NEAR(norm(z), target, 1e-5);
}

TEST(Interpolate, Errors) {
  auto z1 = sample_latent(1, 0, 4);
  LatentVector zero{std::vector<double>(4, 0.0)};
  EXPECT_THROW(interpolate(z1, zero, 3, InterpolationMode::kSpherical), ArgumentError);
  EXPECT_NO_THROW(interpolate(z1, zero, 3, InterpolationMode::kLinear));
  EXPECT_THROW(interpolate(z1, z1, 1), ArgumentError);
  EXPECT_THROW(interpolate(z1, sample_latent(1, 0, 5), 3), ShapeError);
  EXPECT_THROW(parse_interpolation_mode("cubic"), ArgumentError);
}

TEST(Walk, TwoStepsGivesAnchors) {
  auto gan = build_dcgan<float>(16, 8, 8, 2);
  auto gen = [&](const Tensor<float>& z) { return gan.generate(z); };
  WalkSpec spec{{11, 12}, 2};
  auto frames = manifold_walk<float>(gen, 16, spec);
  ASSERT_EQ(frames.dim(0), 2u);
  auto anchors = gan.generate(latents_to_tensor<float>({sample_latent(11, 0, 16), sample_latent(12, 0, 16)}));
  EXPECT_TRUE(std::equal(frames.data().begin(), frames.data().end(), anchors.data().begin()));
}

TEST(Walk, PathLengthAndDeterminism) {
  auto gan = build_dcgan<float>(16, 8, 8, 2);
  auto gen = [&](const Tensor<float>& z) { return gan.generate(z); };
  WalkSpec spec{{1, 2, 3}, 5, InterpolationMode::kSpherical};
  auto a = manifold_walk<float>(gen, 16, spec), b = manifold_walk<float>(gen, 16, spec);
  EXPECT_EQ(a.dim(0), 9u);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_THROW(walk_latents(WalkSpec{{1}, 3}, 16), ArgumentError);
  auto parsed = WalkSpec::from_json(spec.to_json());
  EXPECT_EQ(parsed.anchor_seeds, spec.anchor_seeds);
  EXPECT_EQ(parsed.mode, InterpolationMode::kSpherical);
}

TEST(Grid, SingleCell) {
  Tensor<float> img({1, 3, 2, 2}, {-1, 1, 0, -1, 1, 1, 1, 1, -1, -1, -1, -1});
  auto g = grid_image(img, 1, 0);
  EXPECT_EQ(g, denormalize(img));
  auto png = render_grid(img, 1, 0);
  EXPECT_EQ(decode_image(png), g);
}

TEST(Grid, LayoutArithmetic) {
  auto imgs = Tensor<float>::zeros({6, 3, 8, 8});
  auto g = grid_image(imgs, 3, 2);
  EXPECT_EQ(g.width, 3u * (8 + 4));
  EXPECT_EQ(g.height, 2u * (8 + 4));
  EXPECT_EQ(g.at(0, 0, 0), 255);
  EXPECT_EQ(g.at(2, 2, 0), 128);
  EXPECT_EQ(g.at(12 + 2 + 7, 24 + 2 + 7, 1), 128);
  auto partial = grid_image(Tensor<float>::zeros({4, 3, 8, 8}), 3, 1);
  EXPECT_EQ(partial.height, 2u * 10);
  EXPECT_THROW(grid_image(imgs, 0, 1), ArgumentError);
}

TEST(Memorization, NearestNeighborPositiveForFreshSamples) {
  auto training = synth_blob_dataset(3, 50, 8);
  auto gan = build_dcgan<float>(16, 8, 8, 2);
  auto imgs = gan.generate(latents_to_tensor<float>(sample_latents(1, 3, 16)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(nearest_neighbor_distance(imgs, i, training), 0.0);
  EXPECT_EQ(nearest_neighbor_distance(training[4].pixels, 0, training), 0.0);
}
