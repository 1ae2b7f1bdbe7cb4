// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "danet/errors.hpp"
#include "danet/nn.hpp"
#include "danet/ops.hpp"
#include "danet/rng.hpp"
#include "danet/tape.hpp"

namespace danet {

namespace detail {
template <class T>
void require_scores(const char* what, const Var<T>& s) {
  const Shape& sh = s.shape();
  if (sh.c != 1 || sh.h != 1 || sh.w != 1 || sh.n == 0)
    throw ShapeError(std::string("adversarial_loss: ") + what + " scores must be (N,1), got " + sh.str());
}
} // namespace detail

/// Dual adversarial value
///   L = mean(d_real) - alpha * mean(d_fake_r) - (1 - alpha) * mean(d_fake_g).
/// The critic ascends L; R and G descend their own fake terms.
template <class T>
Var<T> adversarial_loss(const Var<T>& d_real, const Var<T>& d_fake_r, const Var<T>& d_fake_g,
                        T alpha) {
  detail::require_scores("real", d_real);
  detail::require_scores("denoiser-fake", d_fake_r);
  detail::require_scores("generator-fake", d_fake_g);
  if (d_real.shape() != d_fake_r.shape() || d_real.shape() != d_fake_g.shape())
    throw ShapeError("adversarial_loss: score shapes differ: " + d_real.shape().str() + ", " +
                     d_fake_r.shape().str() + ", " + d_fake_g.shape().str());
  return sub(sub(mean(d_real), scale(mean(d_fake_r), alpha)), scale(mean(d_fake_g), T(1) - alpha));
}

/// Two-term critic value for the single-family ablations:
/// mean(d_real) - weight * mean(d_fake).
template <class T>
Var<T> adversarial_loss(const Var<T>& d_real, const Var<T>& d_fake, T weight) {
  detail::require_scores("real", d_real);
  detail::require_scores("fake", d_fake);
  require_same_shape("adversarial_loss", d_real.shape(), d_fake.shape());
  return sub(mean(d_real), scale(mean(d_fake), weight));
}

/// Mean absolute error.
template <class T>
Var<T> denoiser_l1(const Var<T>& x_hat, const Var<T>& x) {
  require_same_shape("denoiser_l1", x_hat.shape(), x.shape());
  return mean(abs(sub(x_hat, x)));
}

struct FilterSpec {
  std::size_t kernel_size = 11;
  double sigma = 3.0;
  bool operator==(const FilterSpec&) const = default;
};

/// mean | GF(y_hat - x) - GF(y - x) |
template <class T>
Var<T> noise_stat_loss(const Var<T>& y_hat, const Var<T>& y, const Var<T>& x, FilterSpec f) {
  require_same_shape("noise_stat_loss", y_hat.shape(), x.shape());
  require_same_shape("noise_stat_loss", y.shape(), x.shape());
  return mean(abs(sub(gaussian_filter(sub(y_hat, x), f.kernel_size, f.sigma),
                      gaussian_filter(sub(y, x), f.kernel_size, f.sigma))));
}

// ---------------------------------------------------------------------------
// WGAN-GP penalty.

/// Network critic adaptor used by gradient_penalty.
template <class T>
struct NetworkCritic {
  const Bound<T>& bound;

  /// d(sum of scores)/d(pair), computed on a scratch tape.
  Tensor<T> input_gradient(const Tensor<T>& pair) const {
    Tape<T> scratch;
    Bound<T> frozen = bind(scratch, *bound.net, false);
    Var<T> in = scratch.leaf(pair, true);
    return backward(sum(critic_score(frozen, in))).at(in);
  }

  Var<T> input_jvp(const Tensor<T>& pair, const Tensor<T>& tangent) const {
    return critic_input_jvp(bound, pair, tangent);
  }
};

template <class T>
struct PenaltyResult {
  T value = 0;                 // lambda * mean((||grad|| - 1)^2)
  Var<T> surrogate;            // scalar whose parameter gradient equals d(value)/d(params)
  std::vector<T> grad_norms;   // per batch item
};

/// Gradient penalty on random interpolates between a real and a fake pair.
/// `Critic` provides input_gradient(pair) and input_jvp(pair, tangent) (the
/// latter recorded on the tape holding the critic parameters). With g the
/// input gradient at the interpolate, d/dtheta (||g|| - 1)^2 equals
/// 2 (||g|| - 1)/||g|| * d/dtheta <g(theta), v> at v = g, and <g(theta), v> is
/// the critic's directional derivative along v; the surrogate weights those
/// directional derivatives so that its gradient is the penalty gradient.
template <class T, class Critic>
PenaltyResult<T> gradient_penalty(const Critic& critic, Tape<T>& tape, const Tensor<T>& real_pair,
                                  const Tensor<T>& fake_pair, T lambda, Rng& rng) {
  require_same_shape("gradient_penalty", real_pair.shape(), fake_pair.shape());
  const Shape s = real_pair.shape();
  Tensor<T> interp(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T eps = static_cast<T>(rng.uniform());
    for (std::size_t i = n * s.item(); i < (n + 1) * s.item(); ++i)
      interp[i] = eps * real_pair[i] + (T(1) - eps) * fake_pair[i];
  }
  Tensor<T> g = critic.input_gradient(interp);
  require_same_shape("gradient_penalty", g.shape(), s);

  PenaltyResult<T> out;
  Tensor<T> weights(Shape{s.n, 1, 1, 1});
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    double sq = 0.0;
    for (std::size_t i = n * s.item(); i < (n + 1) * s.item(); ++i)
      sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    const double norm = std::sqrt(sq);
    out.grad_norms.push_back(static_cast<T>(norm));
    total += (norm - 1.0) * (norm - 1.0);
    weights[n] = norm > 0.0 ? static_cast<T>(2.0 * static_cast<double>(lambda) * (norm - 1.0) /
                                             (norm * static_cast<double>(s.n)))
                            : T(0);
  }
  out.value = static_cast<T>(static_cast<double>(lambda) * total / static_cast<double>(s.n));
  out.surrogate = sum(mul(critic.input_jvp(interp, g), tape.constant(std::move(weights))));
  return out;
}

/// Penalty for the network critic bound on `d`'s tape.
template <class T>
PenaltyResult<T> gradient_penalty(const Bound<T>& d, const Tensor<T>& real_pair,
                                  const Tensor<T>& fake_pair, T lambda, Rng& rng) {
  NetworkCritic<T> critic{d};
  return gradient_penalty(critic, *d.vars.front().tape(), real_pair, fake_pair, lambda, rng);
}

/// Channel concatenation of a (clean, noisy) pair as plain tensors.
template <class T>
Tensor<T> make_pair(const Tensor<T>& clean, const Tensor<T>& noisy) {
  require_same_shape("make_pair", clean.shape(), noisy.shape());
  const Shape s = clean.shape();
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(clean.raw() + n * s.item(), s.item(), out.raw() + 2 * n * s.item());
    std::copy_n(noisy.raw() + n * s.item(), s.item(), out.raw() + (2 * n + 1) * s.item());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objective assembly. Every network minimizes its own loss:
//   loss_D = -L_gan + alpha * gp_R + (1 - alpha) * gp_G
//   loss_R = -alpha * mean D(x_hat, y) + tau1 * L1
//   loss_G = -(1 - alpha) * mean D(x, y_hat) + tau2 * noise_stat
// Absent components (ablation modes, or a stage that does not compute them)
// are skipped.

struct LossWeights {
  double alpha = 0.5;
  double tau1 = 1000.0;
  double tau2 = 10.0;
};

template <class T>
struct LossComponents {
  std::optional<Var<T>> gan;          // L_gan
  std::optional<PenaltyResult<T>> gp_r;
  std::optional<PenaltyResult<T>> gp_g;
  std::optional<Var<T>> adv_r;        // mean D(x_hat, y)
  std::optional<Var<T>> adv_g;        // mean D(x, y_hat)
  std::optional<Var<T>> l1;
  std::optional<Var<T>> noise_stat;
};

template <class T>
struct TotalLoss {
  std::optional<Var<T>> d, r, g;
  double d_value = 0, r_value = 0, g_value = 0; // reported values (penalty at its true value)
  double gp_value = 0;                          // weighted penalty contribution to loss_D
};

namespace detail {
template <class T>
Var<T> accumulate(std::optional<Var<T>>& acc, const Var<T>& term) {
  acc = acc ? add(*acc, term) : term;
  return *acc;
}
} // namespace detail

template <class T>
TotalLoss<T> total_loss(const LossComponents<T>& c, const LossWeights& w) {
  TotalLoss<T> out;
  const T alpha = static_cast<T>(w.alpha);
  if (c.gan) {
    detail::accumulate(out.d, scale(*c.gan, T(-1)));
    out.d_value = -static_cast<double>(c.gan->value().item());
    if (c.gp_r) {
      detail::accumulate(out.d, scale(c.gp_r->surrogate, alpha));
      out.gp_value += w.alpha * static_cast<double>(c.gp_r->value);
    }
    if (c.gp_g) {
      detail::accumulate(out.d, scale(c.gp_g->surrogate, T(1) - alpha));
      out.gp_value += (1.0 - w.alpha) * static_cast<double>(c.gp_g->value);
    }
    out.d_value += out.gp_value;
  }
  if (c.adv_r) detail::accumulate(out.r, scale(*c.adv_r, -alpha));
  if (c.l1) detail::accumulate(out.r, scale(*c.l1, static_cast<T>(w.tau1)));
  if (out.r) out.r_value = static_cast<double>(out.r->value().item());
  if (c.adv_g) detail::accumulate(out.g, scale(*c.adv_g, alpha - T(1)));
  if (c.noise_stat) detail::accumulate(out.g, scale(*c.noise_stat, static_cast<T>(w.tau2)));
  if (out.g) out.g_value = static_cast<double>(out.g->value().item());
  return out;
}

} // namespace danet
