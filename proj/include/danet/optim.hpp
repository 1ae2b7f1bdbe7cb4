// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <string>

#include "danet/errors.hpp"
#include "danet/nn.hpp"
#include "danet/tensor.hpp"

namespace danet {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a single tensor at step t (t >= 1).
template <class T>
void adam_update(Tensor<T>& param, Tensor<T>& m, Tensor<T>& v, const Tensor<T>& grad, double lr,
                 const AdamSettings& s, long t) {
  require_same_shape("adam", param.shape(), grad.shape());
  require_same_shape("adam", param.shape(), m.shape());
  require_same_shape("adam", param.shape(), v.shape());
  if (t < 1) throw ParameterError("adam: step must be >= 1");
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
    const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    param[i] = static_cast<T>(param[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + s.eps));
  }
}

/// Applies one Adam step to every parameter; `grads` is aligned with
/// `net.params`.
template <class T>
void adam_step(NetworkParams<T>& net, std::span<const Tensor<T>> grads, double lr,
               const AdamSettings& s) {
  if (grads.size() != net.params.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(net.params.size()) + " parameters");
  ++net.adam_step;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& p = net.params[i];
    adam_update(p.value, p.m, p.v, grads[i], lr, s, net.adam_step);
  }
}

/// Stepwise halving: base_lr * 0.5^floor(epoch / period), epoch counted from 0.
inline double lr_schedule(long epoch, double base_lr, long period) {
  if (period < 1) throw ParameterError("lr_schedule: period must be >= 1");
  if (epoch < 0) throw ParameterError("lr_schedule: epoch must be >= 0");
  return base_lr * std::pow(0.5, static_cast<double>(epoch / period));
}

} // namespace danet
