#pragma once

// Generator / discriminator constructors for the DCGAN, LAPGAN and
// progressively grown architectures.
//
// Every model exposes the same adversarial surface used by the trainer:
//   generate(latents, real_batch)  fake samples shaped like real_batch
//   discriminate(samples)          one logit per sample, N x 1
//   generator_parameters() / discriminator_parameters()

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/laplacian.hpp"
#include "lesionforge/network.hpp"
#include "lesionforge/schedule.hpp"

namespace lesionforge {

/// Width at `resolution`: halves per doubling above `base_resolution`, never
/// above base_channels and never below min(8, base_channels).
inline std::size_t channels_at(std::size_t resolution, std::size_t base_resolution, std::size_t base_channels) {
  std::size_t c = base_channels >> log2_exact(resolution / base_resolution);
  return std::max(c, std::min<std::size_t>(8, base_channels));
}

inline void require_power_of_two(std::size_t v, const char* what) {
  if (!is_power_of_two(v)) throw ArgumentError(std::string(what) + " must be a power of two, got " + std::to_string(v));
}

// ---------------------------------------------------------------------------
// Plain generator/discriminator pair (DCGAN, small dense toys)

template <class T>
struct SequentialGan {
  Network<T> generator;
  Network<T> discriminator;
  std::size_t latent_dim = 0;

  Tensor<T> generate(const Tensor<T>& latents, const Tensor<T>& /*real_batch*/ = {}) const {
    return generator.forward(latents);
  }
  Tensor<T> discriminate(const Tensor<T>& samples) const { return discriminator.forward(samples); }
  std::vector<Parameter<T>*> generator_parameters() { return generator.parameter_ptrs(); }
  std::vector<Parameter<T>*> discriminator_parameters() { return discriminator.parameter_ptrs(); }
  std::string describe() const { return generator.describe() + "\n" + discriminator.describe(); }
};

namespace detail {

// noise -> dense -> 4x4 features -> (upsample, conv3, lrelu)* -> conv3 -> tanh
template <class T>
Network<T> dcgan_generator(const std::string& name, std::size_t latent_dim, std::size_t res, std::size_t base_channels,
                           Rng& rng) {
  const std::size_t c4 = channels_at(4, 4, base_channels);
  Network<T> g(name, {latent_dim}, InitScheme::kNormal002);
  g.dense(c4 * 16, rng, "project").reshape({c4, 4, 4}).leaky_relu();
  for (std::size_t r = 8; r <= res; r *= 2)
    g.upsample().conv(channels_at(r, 4, base_channels), 3, 1, 1, rng, "conv" + std::to_string(r)).leaky_relu();
  g.conv(3, 3, 1, 1, rng, "to_rgb").tanh();
  return g;
}

// conv3 -> lrelu -> (strided conv4, lrelu)* down to 4x4 -> dense logit
template <class T>
Network<T> dcgan_discriminator(const std::string& name, std::size_t in_channels, std::size_t res,
                               std::size_t base_channels, Rng& rng) {
  Network<T> d(name, {in_channels, res, res}, InitScheme::kNormal002);
  d.conv(channels_at(res, 4, base_channels), 3, 1, 1, rng, "from_rgb").leaky_relu();
  for (std::size_t r = res; r > 4; r /= 2)
    d.conv(channels_at(r / 2, 4, base_channels), 4, 2, 1, rng, "down" + std::to_string(r)).leaky_relu();
  d.flatten().dense(1, rng, "logit");
  return d;
}

}  // namespace detail

template <class T>
SequentialGan<T> build_dcgan(std::size_t latent_dim, std::size_t target_res, std::size_t base_channels,
                             std::uint64_t seed) {
  require_power_of_two(target_res, "DCGAN resolution");
  if (target_res < 8) throw ArgumentError("DCGAN resolution must be at least 8");
  Rng rng = make_rng(seed, {stream::kInit});
  SequentialGan<T> gan;
  gan.latent_dim = latent_dim;
  gan.generator = detail::dcgan_generator<T>("g", latent_dim, target_res, base_channels, rng);
  gan.discriminator = detail::dcgan_discriminator<T>("d", 3, target_res, base_channels, rng);
  return gan;
}

// ---------------------------------------------------------------------------
// Progressive growing

template <class T>
class ProgressiveGan {
 public:
  ProgressiveGan() = default;

  ProgressiveGan(ProgressiveSchedule schedule, std::size_t latent_dim, std::size_t base_channels, std::uint64_t seed)
      : schedule_(std::move(schedule)), latent_dim_(latent_dim), base_channels_(base_channels), seed_(seed) {
    const std::size_t base = schedule_.base_resolution();
    if (base < 4) throw ArgumentError("progressive base resolution must be at least 4");
    resolution_ = base;
    Rng rng = make_rng(seed_, {stream::kInit, base});
    const std::size_t c = width(base);

    g_stem_ = Network<T>("g.stem", {latent_dim_}, InitScheme::kEqualized);
    g_stem_.reshape({latent_dim_, 1, 1})
        .pixelnorm()
        .flatten()
        .dense(c * base * base, rng, "project")
        .reshape({c, base, base})
        .leaky_relu()
        .pixelnorm()
        .conv(c, 3, 1, 1, rng, "conv")
        .leaky_relu()
        .pixelnorm();
    g_to_rgb_.push_back(to_rgb(base, rng));

    d_from_rgb_.push_back(from_rgb(base, rng));
    d_final_ = Network<T>("d.final", {c, base, base}, InitScheme::kEqualized);
    d_final_.minibatch_stddev()
        .conv(c, 3, 1, 1, rng, "conv")
        .leaky_relu()
        .flatten()
        .dense(c, rng, "dense")
        .leaky_relu()
        .dense(1, rng, "logit");
  }

  const ProgressiveSchedule& schedule() const { return schedule_; }
  std::size_t resolution() const { return resolution_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t base_channels() const { return base_channels_; }
  std::uint64_t seed() const { return seed_; }
  double alpha() const { return alpha_; }

  void set_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("alpha " + std::to_string(alpha) + " outside [0,1]");
    alpha_ = alpha;
  }

  /// Adds a generator block + toRGB and a discriminator fromRGB + block at
  /// twice the current resolution. Existing parameters are untouched.
  void grow(std::size_t next_resolution) {
    if (next_resolution != 2 * resolution_)
      throw ArgumentError("grow: next resolution " + std::to_string(next_resolution) + " must be twice " +
                          std::to_string(resolution_));
    if (next_resolution > schedule_.target_resolution())
      throw ArgumentError("grow: " + std::to_string(next_resolution) + " exceeds schedule target " +
                          std::to_string(schedule_.target_resolution()));
    const std::size_t r = next_resolution, cin = width(r / 2), c = width(r);
    const std::string tag = std::to_string(r);
    Rng rng = make_rng(seed_, {stream::kInit, r});

    Network<T> block("g.block" + tag, {cin, r / 2, r / 2}, InitScheme::kEqualized);
    block.upsample()
        .conv(c, 3, 1, 1, rng, "conv0")
        .leaky_relu()
        .pixelnorm()
        .conv(c, 3, 1, 1, rng, "conv1")
        .leaky_relu()
        .pixelnorm();
    g_blocks_.push_back(std::move(block));
    g_to_rgb_.push_back(to_rgb(r, rng));

    d_from_rgb_.push_back(from_rgb(r, rng));
    Network<T> dblock("d.block" + tag, {c, r, r}, InitScheme::kEqualized);
    dblock.conv(c, 3, 1, 1, rng, "conv0").leaky_relu().conv(cin, 3, 1, 1, rng, "conv1").leaky_relu().downsample();
    d_blocks_.push_back(std::move(dblock));

    resolution_ = r;
    alpha_ = 0.0;
  }

  Tensor<T> generate(const Tensor<T>& latents, const Tensor<T>& /*real_batch*/ = {}) const {
    const std::size_t level = g_blocks_.size();
    Tensor<T> h = g_stem_.forward(latents);
    if (level == 0) return tanh_act(g_to_rgb_[0].forward(h));
    for (std::size_t i = 0; i + 1 < level; ++i) h = g_blocks_[i].forward(h);
    Tensor<T> rgb;
    if (alpha_ == 0.0) {
      rgb = upsample2x_nearest(g_to_rgb_[level - 1].forward(h));
    } else if (alpha_ == 1.0) {
      rgb = g_to_rgb_[level].forward(g_blocks_[level - 1].forward(h));
    } else {
      rgb = fade_blend(upsample2x_nearest(g_to_rgb_[level - 1].forward(h)),
                       g_to_rgb_[level].forward(g_blocks_[level - 1].forward(h)), alpha_);
    }
    return tanh_act(rgb);
  }

  Tensor<T> discriminate(const Tensor<T>& images) const {
    const std::size_t level = d_blocks_.size();
    Tensor<T> h;
    if (level == 0) {
      h = d_from_rgb_[0].forward(images);
    } else {
      if (alpha_ == 0.0) {
        h = d_from_rgb_[level - 1].forward(downsample2x_avg(images));
      } else if (alpha_ == 1.0) {
        h = d_blocks_[level - 1].forward(d_from_rgb_[level].forward(images));
      } else {
        h = fade_blend(d_from_rgb_[level - 1].forward(downsample2x_avg(images)),
                       d_blocks_[level - 1].forward(d_from_rgb_[level].forward(images)), alpha_);
      }
      for (std::size_t i = level - 1; i-- > 0;) h = d_blocks_[i].forward(h);
    }
    return d_final_.forward(h);
  }

  std::vector<Parameter<T>*> generator_parameters() {
    std::vector<Parameter<T>*> out;
    append(out, g_stem_);
    for (auto& n : g_blocks_) append(out, n);
    for (auto& n : g_to_rgb_) append(out, n);
    return out;
  }

  std::vector<Parameter<T>*> discriminator_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& n : d_from_rgb_) append(out, n);
    for (auto& n : d_blocks_) append(out, n);
    append(out, d_final_);
    return out;
  }

  std::string describe() const {
    std::ostringstream os;
    os << g_stem_.describe();
    for (const auto& n : g_blocks_) os << '\n' << n.describe();
    for (const auto& n : g_to_rgb_) os << '\n' << n.describe();
    for (const auto& n : d_from_rgb_) os << '\n' << n.describe();
    for (const auto& n : d_blocks_) os << '\n' << n.describe();
    os << '\n' << d_final_.describe();
    return os.str();
  }

 private:
  std::size_t width(std::size_t r) const { return channels_at(r, schedule_.base_resolution(), base_channels_); }

  Network<T> to_rgb(std::size_t r, Rng& rng) const {
    Network<T> n("g.rgb" + std::to_string(r), {width(r), r, r}, InitScheme::kEqualized);
    n.conv(3, 1, 1, 0, rng, "conv");
    return n;
  }

  Network<T> from_rgb(std::size_t r, Rng& rng) const {
    Network<T> n("d.rgb" + std::to_string(r), {3, r, r}, InitScheme::kEqualized);
    n.conv(width(r), 1, 1, 0, rng, "conv").leaky_relu();
    return n;
  }

  static void append(std::vector<Parameter<T>*>& out, Network<T>& n) {
    for (auto* p : n.parameter_ptrs()) out.push_back(p);
  }

  ProgressiveSchedule schedule_;
  std::size_t latent_dim_ = 0;
  std::size_t base_channels_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t resolution_ = 0;
  double alpha_ = 1.0;

  Network<T> g_stem_;
  std::vector<Network<T>> g_blocks_;  // [i] produces base * 2^(i+1)
  std::vector<Network<T>> g_to_rgb_;  // [i] at base * 2^i
  std::vector<Network<T>> d_from_rgb_;
  std::vector<Network<T>> d_blocks_;  // [i] consumes base * 2^(i+1)
  Network<T> d_final_;
};

template <class T>
ProgressiveGan<T> build_progressive(const ProgressiveSchedule& schedule, std::size_t latent_dim,
                                    std::size_t base_channels, std::uint64_t seed) {
  return ProgressiveGan<T>(schedule, latent_dim, base_channels, seed);
}

template <class T>
void grow(ProgressiveGan<T>& model, std::size_t next_resolution) {
  model.grow(next_resolution);
}

// ---------------------------------------------------------------------------
// Laplacian pyramid of GANs

/// Noise channels broadcast over the image for conditional pyramid levels.
inline constexpr std::size_t kPyramidNoiseChannels = 8;

template <class T>
struct PyramidLevelModel {
  std::size_t level = 0;
  std::size_t resolution = 0;
  std::size_t latent_dim = 0;
  Network<T> generator;         // level 0: latent -> image; else (image + noise map) -> residual
  Network<T> noise_projection;  // level > 0 only
  Network<T> discriminator;     // level 0: image; else (conditioning image, residual) pair

  bool conditional() const { return level > 0; }

  /// Residual for an upsampled coarser image.
  Tensor<T> residual(const Tensor<T>& upsampled, const Tensor<T>& latents) const {
    Tensor<T> noise = broadcast_spatial(noise_projection.forward(latents), resolution, resolution);
    return generator.forward(concat_channels(upsampled, noise));
  }

  /// Level 0 draws images. Higher levels read the conditioning image from the
  /// first three channels of `real_batch` and return (condition, residual).
  Tensor<T> generate(const Tensor<T>& latents, const Tensor<T>& real_batch = {}) const {
    if (!conditional()) return generator.forward(latents);
    if (!real_batch.defined() || real_batch.rank() != 4 || real_batch.dim(1) != 6)
      throw ShapeError("pyramid level " + std::to_string(level) + " needs a 6-channel conditioning batch");
    const std::size_t n = real_batch.dim(0), plane = 3 * resolution * resolution;
    Buffer<T> cond(n * plane);
    for (std::size_t s = 0; s < n; ++s)
      std::copy_n(real_batch.data().begin() + s * 2 * plane, plane, cond.begin() + s * plane);
    Tensor<T> condition({n, 3, resolution, resolution}, std::move(cond));
    return concat_channels(condition, residual(condition, latents));
  }

  Tensor<T> discriminate(const Tensor<T>& samples) const { return discriminator.forward(samples); }

  std::vector<Parameter<T>*> generator_parameters() {
    auto out = generator.parameter_ptrs();
    for (auto* p : noise_projection.parameter_ptrs()) out.push_back(p);
    return out;
  }
  std::vector<Parameter<T>*> discriminator_parameters() { return discriminator.parameter_ptrs(); }

  std::string describe() const {
    std::string s = generator.describe();
    if (conditional()) s += "\n" + noise_projection.describe();
    return s + "\n" + discriminator.describe();
  }
};

template <class T>
std::vector<PyramidLevelModel<T>> build_lapgan(std::size_t levels, std::size_t latent_dim, std::size_t base_res,
                                               std::size_t base_channels, std::uint64_t seed) {
  if (levels < 1) throw ArgumentError("LAPGAN needs at least one level");
  require_power_of_two(base_res, "LAPGAN base resolution");
  if (base_res < 8) throw ArgumentError("LAPGAN base resolution must be at least 8");
  std::vector<PyramidLevelModel<T>> models;
  for (std::size_t i = 0; i < levels; ++i) {
    Rng rng = make_rng(seed, {stream::kInit, i});
    PyramidLevelModel<T> m;
    m.level = i;
    m.resolution = base_res << i;
    m.latent_dim = latent_dim;
    const std::string tag = "l" + std::to_string(i);
    if (i == 0) {
      m.generator = detail::dcgan_generator<T>(tag + ".g", latent_dim, base_res, base_channels, rng);
      m.discriminator = detail::dcgan_discriminator<T>(tag + ".d", 3, base_res, base_channels, rng);
    } else {
      const std::size_t r = m.resolution, c = channels_at(r, 4, base_channels);
      m.noise_projection = Network<T>(tag + ".noise", {latent_dim}, InitScheme::kNormal002);
      m.noise_projection.dense(kPyramidNoiseChannels, rng, "project");
      m.generator = Network<T>(tag + ".g", {3 + kPyramidNoiseChannels, r, r}, InitScheme::kNormal002);
      m.generator.conv(c, 3, 1, 1, rng, "conv0")
          .leaky_relu()
          .conv(c, 3, 1, 1, rng, "conv1")
          .leaky_relu()
          .conv(3, 3, 1, 1, rng, "to_residual")
          .tanh();
      m.discriminator = detail::dcgan_discriminator<T>(tag + ".d", 6, r, base_channels, rng);
    }
    models.push_back(std::move(m));
  }
  return models;
}

/// I_0 = G_0(z_0); I_i = up(I_{i-1}) + G_i(up(I_{i-1}), z_i).
template <class T>
Tensor<T> lapgan_sample(const std::vector<PyramidLevelModel<T>>& models, const std::vector<Tensor<T>>& latents) {
  if (models.empty()) throw ArgumentError("lapgan_sample: no models");
  if (latents.size() != models.size())
    throw ArgumentError("lapgan_sample: " + std::to_string(latents.size()) + " latents for " +
                        std::to_string(models.size()) + " levels");
  Tensor<T> image = models[0].generator.forward(latents[0]);
  for (std::size_t i = 1; i < models.size(); ++i) {
    Tensor<T> up = upsample2x_nearest(image);
    image = add(up, models[i].residual(up, latents[i]));
  }
  return image;
}

/// Real training pairs for a conditional level: (up(down(x)), x - up(down(x))).
template <class T>
Tensor<T> pyramid_training_pair(const Tensor<T>& images) {
  Tensor<T> cond = upsample2x_nearest(downsample2x_avg(images));
  return concat_channels(cond, sub(images, cond));
}

}  // namespace lesionforge
