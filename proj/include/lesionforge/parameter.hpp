#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lesionforge/random.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

/// Weight initialisation families.
///   kNormal002  - N(0, 0.02), runtime scale 1 (DCGAN lineage)
///   kEqualized  - N(0, 1), runtime scale sqrt(2 / fan_in)
enum class InitScheme { kNormal002, kEqualized };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::size_t fan_in = 1;
  /// Multiplier applied to the stored weight on every forward pass.
  T lr_scale = T(1);
};

inline double equalized_scale(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

template <class T>
Parameter<T> make_weight(std::string name, Shape shape, std::size_t fan_in, InitScheme scheme, Rng& rng) {
  Buffer<T> v(shape_numel(shape));
  if (scheme == InitScheme::kEqualized) {
    fill_normal<T>(v, rng, T(0), T(1));
    return {std::move(name), Tensor<T>(std::move(shape), std::move(v), true), fan_in,
            static_cast<T>(equalized_scale(fan_in))};
  }
  fill_normal<T>(v, rng, T(0), T(0.02));
  return {std::move(name), Tensor<T>(std::move(shape), std::move(v), true), fan_in, T(1)};
}

template <class T>
Parameter<T> make_bias(std::string name, std::size_t extent, std::size_t fan_in) {
  return {std::move(name), Tensor<T>::zeros({extent}, true), fan_in, T(1)};
}

}  // namespace lesionforge
