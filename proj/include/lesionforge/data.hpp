#pragma once

// Dataset ingestion: crop, area resize, [-1,1] normalization, directory
// scanning, the synthetic blob dataset, float caches and seeded batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/image_io.hpp"
#include "lesionforge/layers.hpp"
#include "lesionforge/random.hpp"
#include "lesionforge/schedule.hpp"

namespace lesionforge {

// ---------------------------------------------------------------------------
// Per-image preprocessing

inline RgbImage center_crop_square(const RgbImage& image) {
  const std::size_t s = std::min(image.height, image.width);
  const std::size_t oy = (image.height - s) / 2, ox = (image.width - s) / 2;
  if (s == image.height && s == image.width) return image;
  RgbImage out(s, s);
  for (std::size_t y = 0; y < s; ++y)
    std::memcpy(&out.pixels[y * s * 3], &image.pixels[((y + oy) * image.width + ox) * 3], s * 3);
  return out;
}

/// Bytes -> 1 x 3 x H x W floats, v / 127.5 - 1.
inline Tensor<float> normalize(const RgbImage& image) {
  const std::size_t h = image.height, w = image.width, plane = h * w;
  std::vector<float> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = static_cast<float>(image.pixels[i * 3 + c] / 127.5 - 1.0);
  return Tensor<float>({1, 3, h, w}, std::move(v));
}

inline std::uint8_t denormalize_value(double v) {
  v = std::clamp(v, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
}

/// Sample `index` of an N x 3 x H x W tensor back to bytes (clamped).
template <class T>
RgbImage denormalize(const Tensor<T>& images, std::size_t index = 0) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("denormalize expects N x 3 x H x W, got " + shape_string(images.shape()));
  if (index >= images.dim(0)) throw ArgumentError("denormalize: sample index out of range");
  const std::size_t h = images.dim(2), w = images.dim(3), plane = h * w;
  RgbImage out(h, w);
  const T* src = images.data().data() + index * 3 * plane;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = denormalize_value(static_cast<double>(src[c * plane + i]));
  return out;
}

namespace detail {

// Row i holds the overlap weights of source cells with target cell i.
inline std::vector<double> area_weights(std::size_t src, std::size_t dst) {
  std::vector<double> w(dst * src, 0.0);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double lo = i * scale, hi = (i + 1) * scale;
    for (std::size_t j = static_cast<std::size_t>(lo); j < src && j < hi; ++j) {
      const double overlap = std::min(hi, j + 1.0) - std::max(lo, static_cast<double>(j));
      if (overlap > 0) w[i * src + j] = overlap / scale;
    }
  }
  return w;
}

}  // namespace detail

/// Area-average resampling of square N x C x S x S images to target x target.
/// Power-of-two ratios go through repeated downsample2x_avg.
template <class T>
Tensor<T> resize_to(const Tensor<T>& images, std::size_t target) {
  if (images.rank() != 4) throw ShapeError("resize_to expects N x C x S x S, got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), s = images.dim(2);
  if (images.dim(3) != s) throw ShapeError("resize_to needs a square image, got " + shape_string(images.shape()));
  if (!is_power_of_two(target)) throw ArgumentError("resize target must be a power of two, got " + std::to_string(target));
  if (target > s)
    throw ArgumentError("resize_to: upscaling " + std::to_string(s) + " -> " + std::to_string(target) + " not supported");
  if (s % target == 0 && is_power_of_two(s / target)) {
    Tensor<T> out = images.detach();
    for (std::size_t r = s; r > target; r /= 2) out = downsample2x_avg(out);
    return out;
  }
  const auto w = detail::area_weights(s, target);
  Buffer<T> out(n * c * target * target);
  std::vector<double> rows(target * s);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = images.data().data() + p * s * s;
    std::fill(rows.begin(), rows.end(), 0.0);
    for (std::size_t i = 0; i < target; ++i)
      for (std::size_t y = 0; y < s; ++y) {
        const double wy = w[i * s + y];
        if (wy == 0) continue;
        for (std::size_t x = 0; x < s; ++x) rows[i * s + x] += wy * src[y * s + x];
      }
    for (std::size_t i = 0; i < target; ++i)
      for (std::size_t j = 0; j < target; ++j) {
        double acc = 0;
        for (std::size_t x = 0; x < s; ++x) acc += w[j * s + x] * rows[i * s + x];
        out[p * target * target + i * target + j] = static_cast<T>(acc);
      }
  }
  return Tensor<T>({n, c, target, target}, std::move(out));
}

// ---------------------------------------------------------------------------
// Records and directory scanning

struct ImageRecord {
  Tensor<float> pixels;  // 1 x 3 x r x r in [-1, 1]
  std::string source;

  std::size_t resolution() const { return pixels.dim(2); }
};

/// Crop, normalize and resize one decoded image.
inline ImageRecord preprocess(const RgbImage& image, std::size_t resolution, std::string source) {
  if (std::min(image.height, image.width) < resolution)
    throw ArgumentError(source + ": " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " is smaller than the target resolution " + std::to_string(resolution));
  return {resize_to(normalize(center_crop_square(image)), resolution), std::move(source)};
}

struct DatasetEntry {
  std::filesystem::path path;
  std::size_t width = 0;
  std::size_t height = 0;
  bool operator==(const DatasetEntry&) const = default;
};

struct SkippedFile {
  std::filesystem::path path;
  std::string reason;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<DatasetEntry> entries;
  std::size_t target_resolution = 0;
  std::vector<SkippedFile> skipped;

  std::string summary() const {
    std::string s = std::to_string(entries.size()) + " images indexed under " + root.string() + ", " +
                    std::to_string(skipped.size()) + " skipped";
    for (const auto& f : skipped) s += "\n  skipped " + f.path.string() + ": " + f.reason;
    return s;
  }
};

inline bool has_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Recursively indexes decodable PNG/JPEG files in lexicographic path order.
inline DatasetIndex scan_dataset(const std::filesystem::path& root, std::size_t target_resolution) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  if (!is_power_of_two(target_resolution))
    throw ArgumentError("target resolution must be a power of two, got " + std::to_string(target_resolution));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());

  DatasetIndex index{root, {}, target_resolution, {}};
  for (const auto& f : files) {
    try {
      RgbImage img = read_image(f);
      index.entries.push_back({f, img.width, img.height});
    } catch (const IoError& e) {
      index.skipped.push_back({f, e.what()});
    }
  }
  if (index.entries.empty()) throw ArgumentError("no decodable images under " + root.string());
  return index;
}

inline std::vector<ImageRecord> load_dataset(const DatasetIndex& index) {
  std::vector<ImageRecord> out;
  out.reserve(index.entries.size());
  for (const auto& e : index.entries) out.push_back(preprocess(read_image(e.path), index.target_resolution, e.path.string()));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic blob lesions

struct BlobSample {
  RgbImage image;
  double coverage = 0;  // fraction of pixels inside the ellipse
};

/// Deterministic per (seed, index): skin background, one soft-edged
/// rotated elliptical blob, mild noise.
inline BlobSample synth_blob_image(std::uint64_t seed, std::uint64_t index, std::size_t resolution) {
  if (resolution == 0) throw ArgumentError("blob resolution must be positive");
  Rng rng = make_rng(seed, {stream::kBlob, index});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 3.0);
  const double res = static_cast<double>(resolution);

  const double skin[3] = {205 + 35 * u(rng), 150 + 40 * u(rng), 115 + 40 * u(rng)};
  static const double hues[3][3] = {{110, 62, 38}, {38, 28, 30}, {165, 48, 46}};
  const auto& base = hues[static_cast<int>(u(rng) * 3) % 3];
  double blob[3];
  for (int c = 0; c < 3; ++c) blob[c] = std::clamp(base[c] * (0.8 + 0.4 * u(rng)), 0.0, 255.0);

  const double cx = (0.2 + 0.6 * u(rng)) * res, cy = (0.2 + 0.6 * u(rng)) * res;
  const double a = (0.10 + 0.30 * u(rng)) * res, b = (0.10 + 0.30 * u(rng)) * res;
  const double theta = u(rng) * std::numbers::pi;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double edge = 0.15;  // soft band half-width in normalized radius

  BlobSample out{RgbImage(resolution, resolution), 0.0};
  std::size_t inside = 0;
  for (std::size_t y = 0; y < resolution; ++y)
    for (std::size_t x = 0; x < resolution; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double pu = (dx * ct + dy * st) / a, pv = (-dx * st + dy * ct) / b;
      const double d = std::sqrt(pu * pu + pv * pv);
      if (d <= 1.0) ++inside;
      const double t = std::clamp((1.0 + edge - d) / (2 * edge), 0.0, 1.0);
      const double m = t * t * (3 - 2 * t);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - m) * skin[c] + m * blob[c] + noise(rng);
        out.image.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  out.coverage = static_cast<double>(inside) / (res * res);
  return out;
}

inline std::vector<ImageRecord> synth_blob_dataset(std::uint64_t seed, std::size_t count, std::size_t resolution) {
  if (count < 1) throw ArgumentError("blob dataset needs count >= 1");
  std::vector<ImageRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back({normalize(synth_blob_image(seed, i, resolution).image), "blob:" + std::to_string(i)});
  return out;
}

// ---------------------------------------------------------------------------
// Float cache: 16-byte header ("LFIC", version, resolution, channels), then
// little-endian float32 CHW.

inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_cache(const ImageRecord& record) {
  std::vector<std::uint8_t> b = {'L', 'F', 'I', 'C'};
  detail::put_u32(b, kCacheVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(record.resolution()));
  detail::put_u32(b, static_cast<std::uint32_t>(record.pixels.dim(1)));
  for (float f : record.pixels.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(b, bits);
  }
  return b;
}

inline ImageRecord decode_cache(const std::vector<std::uint8_t>& b, std::string source) {
  if (b.size() < 16 || std::memcmp(b.data(), "LFIC", 4) != 0) throw IoError(source + ": not an image cache file");
  if (detail::get_u32(&b[4]) != kCacheVersion) throw IoError(source + ": unsupported cache version");
  const std::size_t r = detail::get_u32(&b[8]), c = detail::get_u32(&b[12]);
  if (b.size() != 16 + 4 * c * r * r) throw IoError(source + ": truncated cache file");
  std::vector<float> v(c * r * r);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits = detail::get_u32(&b[16 + 4 * i]);
    std::memcpy(&v[i], &bits, 4);
  }
  return {Tensor<float>({1, c, r, r}, std::move(v)), std::move(source)};
}

// A prepared dataset directory: index.json plus cache/NNNNN.lfc per image.

inline constexpr const char* kPreparedFormat = "lesionforge-prepared/1";

/// Preprocesses every indexed image into `dir` and returns the index document.
inline nlohmann::json write_prepared(const DatasetIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "cache");
  nlohmann::json images = nlohmann::json::array(), skipped = nlohmann::json::array();
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const auto& e = index.entries[i];
    char name[32];
    std::snprintf(name, sizeof name, "cache/%05zu.lfc", i);
    const auto bytes = encode_cache(preprocess(read_image(e.path), index.target_resolution, e.path.string()));
    write_file_bytes(dir / name, bytes.data(), bytes.size());
    images.push_back({{"source", e.path.generic_string()}, {"cache", name}, {"width", e.width}, {"height", e.height}});
  }
  for (const auto& f : index.skipped) skipped.push_back({{"path", f.path.generic_string()}, {"reason", f.reason}});
  nlohmann::json doc = {{"format", kPreparedFormat},
                        {"root", index.root.generic_string()},
                        {"resolution", index.target_resolution},
                        {"images", images},
                        {"skipped", skipped}};
  const std::string text = doc.dump(2) + "\n";
  write_file_bytes(dir / "index.json", text.data(), text.size());
  return doc;
}

inline bool is_prepared_dir(const std::filesystem::path& dir) { return std::filesystem::is_regular_file(dir / "index.json"); }

inline std::vector<ImageRecord> load_prepared(const std::filesystem::path& dir) {
  const auto raw = read_file_bytes(dir / "index.json");
  const auto doc = nlohmann::json::parse(raw.begin(), raw.end());
  if (doc.value("format", std::string()) != kPreparedFormat) throw IoError(dir.string() + ": not a prepared dataset");
  const std::size_t res = doc.at("resolution").get<std::size_t>();
  std::vector<ImageRecord> out;
  for (const auto& img : doc.at("images")) {
    ImageRecord r = decode_cache(read_file_bytes(dir / img.at("cache").get<std::string>()), img.at("source").get<std::string>());
    if (r.resolution() != res) throw IoError(r.source + ": cached at " + std::to_string(r.resolution()) + ", index says " + std::to_string(res));
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeded batching

/// Permutation of [0, n) for `epoch`, reproducible from the run seed.
inline std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(seed, {stream::kBatch, epoch});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

/// Walks successive epoch permutations; `cursor` counts images consumed.
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, std::size_t dataset_size, std::uint64_t cursor = 0)
      : seed_(seed), n_(dataset_size), cursor_(cursor) {
    if (n_ == 0) throw ArgumentError("batch sampler over an empty dataset");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      const std::uint64_t epoch = cursor_ / n_;
      if (epoch != cached_epoch_ || perm_.empty()) {
        perm_ = epoch_permutation(seed_, epoch, n_);
        cached_epoch_ = epoch;
      }
      out.push_back(perm_[cursor_ % n_]);
      ++cursor_;
    }
    return out;
  }

  std::uint64_t cursor() const { return cursor_; }

 private:
  std::uint64_t seed_;
  std::size_t n_;
  std::uint64_t cursor_;
  std::uint64_t cached_epoch_ = 0;
  std::vector<std::size_t> perm_;
};

/// Stacks records into a B x 3 x r x r tensor of element type T.
template <class T>
Tensor<T> stack_batch(const std::vector<ImageRecord>& records, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  const std::size_t r = records.at(indices[0]).resolution(), per = 3 * r * r;
  Buffer<T> v(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& rec = records.at(indices[i]);
    if (rec.resolution() != r || rec.pixels.size() != per)
      throw ShapeError(rec.source + ": expected 3x" + std::to_string(r) + "x" + std::to_string(r) + ", got " +
                       shape_string(rec.pixels.shape()));
    std::transform(rec.pixels.data().begin(), rec.pixels.data().end(), v.begin() + i * per,
                   [](float f) { return static_cast<T>(f); });
  }
  return Tensor<T>({indices.size(), 3, r, r}, std::move(v));
}

}  // namespace lesionforge
