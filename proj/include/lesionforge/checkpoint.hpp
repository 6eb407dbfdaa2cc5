#pragma once

// Checkpoint directories: manifest.txt (key=value lines) plus one
// little-endian blob per tensor.
//
//   version=lesionforge-ckpt/1
//   meta.<key>=<value>
//   tensor=<name> <f32|f64> <AxBxC> <bytes> <crc32 hex>
//   end=<tensor count>

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/image_io.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

inline constexpr const char* kCheckpointVersion = "lesionforge-ckpt/1";

struct CheckpointVersionError : IoError {
  using IoError::IoError;
};
struct CheckpointTruncatedError : IoError {
  using IoError::IoError;
};
struct CheckpointChecksumError : IoError {
  using IoError::IoError;
};

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

struct CheckpointBlob {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

class Checkpoint {
 public:
  std::map<std::string, std::string> meta;

  template <class T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values) {
    if (index_.count(name)) throw ArgumentError("checkpoint: duplicate tensor " + name);
    CheckpointBlob b{name, dtype_name<T>(), shape, std::vector<std::uint8_t>(values.size() * sizeof(T))};
    if (!values.empty()) std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
    index_[name] = blobs_.size();
    blobs_.push_back(std::move(b));
  }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.shape(), t.data());
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  template <class T>
  std::vector<T> get(const std::string& name, const Shape& expected_shape) const {
    const CheckpointBlob& b = blob(name);
    if (b.dtype != dtype_name<T>()) throw IoError("checkpoint: tensor " + name + " has dtype " + b.dtype);
    if (b.shape != expected_shape)
      throw ShapeError("checkpoint: tensor " + name + " is " + shape_string(b.shape) + ", expected " + shape_string(expected_shape));
    std::vector<T> v(b.bytes.size() / sizeof(T));
    if (!v.empty()) std::memcpy(v.data(), b.bytes.data(), b.bytes.size());
    return v;
  }

  const CheckpointBlob& blob(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint: missing tensor " + name);
    return blobs_[it->second];
  }

  const std::vector<CheckpointBlob>& blobs() const { return blobs_; }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint: missing meta key " + key);
    return it->second;
  }

  std::string manifest() const {
    std::ostringstream os;
    os << "version=" << kCheckpointVersion << '\n';
    for (const auto& [k, v] : meta) {
      if (v.find('\n') != std::string::npos) throw ArgumentError("checkpoint meta value for " + k + " spans lines");
      os << "meta." << k << '=' << v << '\n';
    }
    for (const auto& b : blobs_) {
      std::string shape = shape_string(b.shape);
      shape = b.shape.empty() ? "-" : shape.substr(1, shape.size() - 2);
      os << "tensor=" << b.name << ' ' << b.dtype << ' ' << shape << ' ' << b.bytes.size()
         << ' ' << std::hex << crc32_of(b.bytes) << std::dec << '\n';
    }
    os << "end=" << blobs_.size() << '\n';
    return os.str();
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& b : blobs_) write_file_bytes(dir / (b.name + ".bin"), b.bytes.data(), b.bytes.size());
    const std::string m = manifest();
    write_file_bytes(dir / "manifest.txt", m.data(), m.size());
  }

  static Checkpoint load(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.txt";
    if (!std::filesystem::exists(path)) throw IoError("no checkpoint manifest at " + path.string());
    auto raw = read_file_bytes(path);
    std::istringstream in(std::string(raw.begin(), raw.end()));
    std::string line;
    if (!std::getline(in, line) || line.rfind("version=", 0) != 0)
      throw CheckpointTruncatedError("checkpoint manifest is empty or lacks a version line: " + path.string());
    if (line.substr(8) != kCheckpointVersion)
      throw CheckpointVersionError("checkpoint version '" + line.substr(8) + "' is not " + kCheckpointVersion);

    Checkpoint ck;
    bool ended = false;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (ended) throw IoError("checkpoint manifest has content after end line");
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("malformed checkpoint manifest line: " + line);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key.rfind("meta.", 0) == 0) {
        ck.meta[key.substr(5)] = value;
      } else if (key == "tensor") {
        std::istringstream fields(value);
        std::string name, dtype, shape_text;
        std::size_t size = 0;
        std::uint32_t crc = 0;
        if (!(fields >> name >> dtype >> shape_text >> size >> std::hex >> crc))
          throw IoError("malformed checkpoint tensor line: " + line);
        CheckpointBlob b{name, dtype, parse_shape(shape_text), {}};
        const auto blob_path = dir / (name + ".bin");
        if (!std::filesystem::exists(blob_path)) throw CheckpointTruncatedError("checkpoint blob missing: " + blob_path.string());
        b.bytes = read_file_bytes(blob_path);
        if (b.bytes.size() != size)
          throw CheckpointTruncatedError("checkpoint blob " + name + " holds " + std::to_string(b.bytes.size()) +
                                         " bytes, manifest says " + std::to_string(size));
        const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
        if (width == 0) throw IoError("checkpoint: unknown dtype " + dtype);
        if (size != shape_numel(b.shape) * width) throw IoError("checkpoint: size of " + name + " disagrees with its shape");
        if (crc32_of(b.bytes) != crc) throw CheckpointChecksumError("checkpoint checksum mismatch for tensor " + name);
        ck.index_[name] = ck.blobs_.size();
        ck.blobs_.push_back(std::move(b));
      } else if (key == "end") {
        if (std::stoull(value) != ck.blobs_.size())
          throw CheckpointTruncatedError("checkpoint manifest lists " + std::to_string(ck.blobs_.size()) +
                                         " tensors, end line says " + value);
        ended = true;
      } else {
        throw IoError("unknown checkpoint manifest key " + key);
      }
    }
    if (!ended) throw CheckpointTruncatedError("checkpoint manifest truncated (no end line): " + path.string());
    return ck;
  }

 private:
  static Shape parse_shape(const std::string& text) {
    Shape s;
    if (text == "-") return s;
    std::istringstream in(text);
    std::string part;
    while (std::getline(in, part, 'x')) s.push_back(std::stoull(part));
    return s;
  }

  std::vector<CheckpointBlob> blobs_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lesionforge
