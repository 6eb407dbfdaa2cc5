#pragma once

// Adversarial objectives written with log-sigmoid identities:
//   -log sigma(x)     = softplus(-x)
//   -log(1 - sigma(x)) = softplus(x)

#include <cmath>
#include <string>

#include "lesionforge/tensor.hpp"

namespace lesionforge {

namespace detail {
template <class T>
void require_finite_logits(const Tensor<T>& logits, const char* who) {
  for (T v : logits.data())
    if (!std::isfinite(v)) throw NonFiniteError(std::string(who) + ": non-finite logit");
}
}  // namespace detail

/// Discriminator loss: -mean log sigma(real) - mean log(1 - sigma(fake)).
template <class T>
Tensor<T> d_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
  detail::require_finite_logits(real_logits, "d_loss");
  detail::require_finite_logits(fake_logits, "d_loss");
  return add(mean(softplus(scale(real_logits, T(-1)))), mean(softplus(fake_logits)));
}

/// Non-saturating generator loss: -mean log sigma(fake).
template <class T>
Tensor<T> g_loss(const Tensor<T>& fake_logits) {
  detail::require_finite_logits(fake_logits, "g_loss");
  return mean(softplus(scale(fake_logits, T(-1))));
}

/// Literal minimax generator objective: mean log(1 - sigma(fake)), minimised.
template <class T>
Tensor<T> g_loss_saturating(const Tensor<T>& fake_logits) {
  detail::require_finite_logits(fake_logits, "g_loss_saturating");
  return scale(mean(softplus(fake_logits)), T(-1));
}

template <class T>
double mean_sigmoid(const Tensor<T>& logits) {
  double s = 0.0;
  for (T v : logits.data()) s += sigmoid_value(static_cast<double>(v));
  return s / static_cast<double>(logits.size());
}

}  // namespace lesionforge
