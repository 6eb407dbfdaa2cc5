#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lesionforge/parameter.hpp"

namespace lesionforge {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// DCGAN / LAPGAN defaults.
  static AdamConfig dcgan() { return {2e-4, 0.5, 0.999, 1e-8}; }
  /// Progressive-growing defaults.
  static AdamConfig progressive() { return {1e-3, 0.0, 0.99, 1e-8}; }
};

template <class T>
struct Moments {
  std::vector<T> first;
  std::vector<T> second;
  std::uint64_t updates = 0;  // drives bias correction for this parameter
};

/// Adam accumulators for an explicit set of registered parameters.
template <class T>
class OptimizerState {
 public:
  OptimizerState() = default;
  explicit OptimizerState(AdamConfig config) : config_(config) {}

  void register_parameter(const Parameter<T>& p) {
    auto [it, inserted] = moments_.try_emplace(p.name);
    if (inserted) {
      it->second.first.assign(p.tensor.size(), T(0));
      it->second.second.assign(p.tensor.size(), T(0));
    }
  }

  template <class Range>
  void register_parameters(const Range& params) {
    for (const auto* p : params) register_parameter(*p);
  }

  bool is_registered(const std::string& name) const { return moments_.count(name) != 0; }

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  std::uint64_t step() const { return step_; }
  const std::map<std::string, Moments<T>>& moments() const { return moments_; }
  std::map<std::string, Moments<T>>& moments() { return moments_; }

  void set_step(std::uint64_t s) { step_ = s; }

  /// Bias-corrected adaptive-moment update of every given parameter. Each
  /// parameter enters the forward pass scaled by its lr_scale, so the
  /// effective weight moves lr * lr_scale times the normalised moment.
  void update(std::span<Parameter<T>* const> params) {
    for (const Parameter<T>* p : params) {
      if (!is_registered(p->name)) throw ArgumentError("adam_step: parameter '" + p->name + "' is not registered");
      if (!p->tensor.has_grad()) throw ArgumentError("adam_step: parameter '" + p->name + "' has no gradient");
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    for (Parameter<T>* p : params) {
      Moments<T>& m = moments_.at(p->name);
      ++m.updates;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(m.updates));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(m.updates));
      std::span<const T> g = p->tensor.grad();
      std::span<T> w = p->tensor.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m.first[i] = static_cast<T>(b1 * m.first[i] + (1.0 - b1) * g[i]);
        m.second[i] = static_cast<T>(b2 * m.second[i] + (1.0 - b2) * static_cast<double>(g[i]) * g[i]);
        const double mhat = m.first[i] / c1;
        const double vhat = m.second[i] / c2;
        w[i] = static_cast<T>(w[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon));
      }
    }
    ++step_;
  }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments<T>> moments_;
};

template <class T>
void adam_step(OptimizerState<T>& state, std::span<Parameter<T>* const> params) {
  state.update(params);
}

template <class T>
void adam_step(OptimizerState<T>& state, const std::vector<Parameter<T>*>& params) {
  state.update(std::span<Parameter<T>* const>(params.data(), params.size()));
}

}  // namespace lesionforge
