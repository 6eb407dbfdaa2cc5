#pragma once

// Sequential layer graphs with construction-time shape checking.

#include <cstddef>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/layers.hpp"
#include "lesionforge/parameter.hpp"
#include "lesionforge/random.hpp"

namespace lesionforge {

enum class LayerKind {
  kDense,
  kConv,
  kReshape,
  kFlatten,
  kLeakyRelu,
  kTanh,
  kUpsample,
  kDownsample,
  kPixelNorm,
  kMinibatchStddev,
};

struct LayerSpec {
  LayerKind kind;
  std::size_t out = 0;  // output features / channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double slope = 0.2;
  Shape target;  // reshape target, batch excluded
  int weight = -1;
  int bias = -1;

  std::string describe() const {
    std::ostringstream os;
    switch (kind) {
      case LayerKind::kDense: os << "dense(" << out << ")"; break;
      case LayerKind::kConv: os << "conv(" << out << ",k" << kernel << ",s" << stride << ",p" << padding << ")"; break;
      case LayerKind::kReshape: os << "reshape" << shape_string(target); break;
      case LayerKind::kFlatten: os << "flatten"; break;
      case LayerKind::kLeakyRelu: os << "leaky_relu(" << slope << ")"; break;
      case LayerKind::kTanh: os << "tanh"; break;
      case LayerKind::kUpsample: os << "upsample2x"; break;
      case LayerKind::kDownsample: os << "downsample2x"; break;
      case LayerKind::kPixelNorm: os << "pixelnorm"; break;
      case LayerKind::kMinibatchStddev: os << "mbstd"; break;
    }
    return os.str();
  }
};

/// An ordered stack of layers. Shapes exclude the batch extent.
template <class T>
class Network {
 public:
  Network() = default;
  Network(std::string name, Shape input_shape, InitScheme init)
      : name_(std::move(name)), input_shape_(input_shape), output_shape_(std::move(input_shape)), init_(init) {}

  Network& dense(std::size_t out, Rng& rng, const std::string& tag) {
    if (output_shape_.size() != 1) throw ShapeError(where() + "dense needs a flat input, have " + shape_string(output_shape_));
    const std::size_t in = output_shape_[0];
    LayerSpec spec{LayerKind::kDense};
    spec.out = out;
    spec.weight = add_parameter(make_weight<T>(qualified(tag, "weight"), {in, out}, in, init_, rng));
    spec.bias = add_parameter(make_bias<T>(qualified(tag, "bias"), out, in));
    output_shape_ = {out};
    layers_.push_back(spec);
    return *this;
  }

  Network& conv(std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng,
                const std::string& tag) {
    if (output_shape_.size() != 3) throw ShapeError(where() + "conv needs a CxHxW input, have " + shape_string(output_shape_));
    const std::size_t cin = output_shape_[0], h = output_shape_[1], w = output_shape_[2];
    if (stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding)
      throw ShapeError(where() + "conv kernel " + std::to_string(kernel) + " does not fit " + shape_string(output_shape_));
    LayerSpec spec{LayerKind::kConv};
    spec.out = out;
    spec.kernel = kernel;
    spec.stride = stride;
    spec.padding = padding;
    const std::size_t fan_in = cin * kernel * kernel;
    spec.weight = add_parameter(make_weight<T>(qualified(tag, "weight"), {out, cin, kernel, kernel}, fan_in, init_, rng));
    spec.bias = add_parameter(make_bias<T>(qualified(tag, "bias"), out, fan_in));
    output_shape_ = {out, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1};
    layers_.push_back(spec);
    return *this;
  }

  Network& reshape(Shape target) {
    if (shape_numel(target) != shape_numel(output_shape_))
      throw ShapeError(where() + "reshape " + shape_string(output_shape_) + " -> " + shape_string(target));
    LayerSpec spec{LayerKind::kReshape};
    spec.target = target;
    output_shape_ = std::move(target);
    layers_.push_back(spec);
    return *this;
  }

  Network& flatten() {
    layers_.push_back({LayerKind::kFlatten});
    output_shape_ = {shape_numel(output_shape_)};
    return *this;
  }

  Network& leaky_relu(double slope = 0.2) {
    LayerSpec spec{LayerKind::kLeakyRelu};
    spec.slope = slope;
    layers_.push_back(spec);
    return *this;
  }

  Network& tanh() {
    layers_.push_back({LayerKind::kTanh});
    return *this;
  }

  Network& upsample() {
    require_image("upsample");
    output_shape_[1] *= 2;
    output_shape_[2] *= 2;
    layers_.push_back({LayerKind::kUpsample});
    return *this;
  }

  Network& downsample() {
    require_image("downsample");
    if (output_shape_[1] % 2 || output_shape_[2] % 2)
      throw ShapeError(where() + "downsample of odd extent " + shape_string(output_shape_));
    output_shape_[1] /= 2;
    output_shape_[2] /= 2;
    layers_.push_back({LayerKind::kDownsample});
    return *this;
  }

  Network& pixelnorm() {
    require_image("pixelnorm");
    layers_.push_back({LayerKind::kPixelNorm});
    return *this;
  }

  Network& minibatch_stddev() {
    require_image("minibatch_stddev");
    output_shape_[0] += 1;
    layers_.push_back({LayerKind::kMinibatchStddev});
    return *this;
  }

  Tensor<T> forward(const Tensor<T>& input) const {
    Shape expected{input.dim(0)};
    expected.insert(expected.end(), input_shape_.begin(), input_shape_.end());
    if (input.shape() != expected)
      throw ShapeError(where() + "input " + shape_string(input.shape()) + " does not match " + shape_string(expected));
    Tensor<T> x = input;
    for (const LayerSpec& l : layers_) {
      switch (l.kind) {
        case LayerKind::kDense: x = lesionforge::dense(x, params_[l.weight], params_[l.bias]); break;
        case LayerKind::kConv:
          x = conv2d(x, params_[l.weight], params_[l.bias], l.stride, l.padding);
          break;
        case LayerKind::kReshape: {
          Shape s{x.dim(0)};
          s.insert(s.end(), l.target.begin(), l.target.end());
          x = lesionforge::reshape(x, s);
          break;
        }
        case LayerKind::kFlatten: x = lesionforge::flatten(x); break;
        case LayerKind::kLeakyRelu: x = lesionforge::leaky_relu(x, static_cast<T>(l.slope)); break;
        case LayerKind::kTanh: x = tanh_act(x); break;
        case LayerKind::kUpsample: x = upsample2x_nearest(x); break;
        case LayerKind::kDownsample: x = downsample2x_avg(x); break;
        case LayerKind::kPixelNorm: x = lesionforge::pixelnorm(x); break;
        case LayerKind::kMinibatchStddev: x = lesionforge::minibatch_stddev(x); break;
      }
    }
    return x;
  }

  const std::string& name() const { return name_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  InitScheme init() const { return init_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  std::vector<Parameter<T>*> parameter_ptrs() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  std::string describe() const {
    std::ostringstream os;
    os << name_ << shape_string(input_shape_);
    for (const auto& l : layers_) os << ' ' << l.describe();
    os << " -> " << shape_string(output_shape_);
    return os.str();
  }

  /// Deep copy with independent parameter storage.
  Network clone() const {
    Network copy = *this;
    for (auto& p : copy.params_) p.tensor = Tensor<T>(p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}, true);
    return copy;
  }

 private:
  std::string where() const { return "network '" + name_ + "': "; }

  void require_image(const char* op) const {
    if (output_shape_.size() != 3)
      throw ShapeError(where() + op + " needs a CxHxW input, have " + shape_string(output_shape_));
  }

  std::string qualified(const std::string& tag, const char* leaf) const { return name_ + "." + tag + "." + leaf; }

  int add_parameter(Parameter<T> p) {
    for (const auto& q : params_)
      if (q.name == p.name) throw ArgumentError(where() + "duplicate parameter name " + p.name);
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size() - 1);
  }

  std::string name_;
  Shape input_shape_;
  Shape output_shape_;
  InitScheme init_ = InitScheme::kNormal002;
  std::vector<LayerSpec> layers_;
  std::vector<Parameter<T>> params_;
};

template <class T>
void set_requires_grad(const std::vector<Parameter<T>*>& params, bool on) {
  for (auto* p : params) p->tensor.set_requires_grad(on);
}

template <class T>
void zero_grad(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

}  // namespace lesionforge
