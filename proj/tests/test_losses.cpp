// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "danet/gradcheck.hpp"
#include "danet/losses.hpp"
#include "oracles.hpp"

using namespace danet;

namespace {
Var<double> scores(Tape<double>& tape, std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return tape.leaf(Tensor<double>({n, 1, 1, 1}, std::move(v)), grad);
}

/// D(v) = sum of the pair elements; input gradient is all ones.
struct SumCritic {
  Tape<double>& tape;
  Tensor<double> input_gradient(const Tensor<double>& pair) const {
    return Tensor<double>::full(pair.shape(), 1.0);
  }
  Var<double> input_jvp(const Tensor<double>& pair, const Tensor<double>& tangent) const {
    const Shape s = pair.shape();
    Tensor<double> out({s.n, 1, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < s.item(); ++i) out[n] += tangent[n * s.item() + i];
    return tape.constant(out);
  }
};

/// D(v) = <u, v> with |u| = 1 per item.
struct UnitCritic {
  Tape<double>& tape;
  Tensor<double> u;
  Tensor<double> input_gradient(const Tensor<double>&) const { return u; }
  Var<double> input_jvp(const Tensor<double>&, const Tensor<double>&) const {
    return tape.constant(Tensor<double>({u.shape().n, 1, 1, 1}));
  }
};

UNetConfig tiny_unet(std::size_t in, std::size_t out) {
  UNetConfig c;
  c.depth = 1;
  c.base_channels = 3;
  c.in_channels = in;
  c.out_channels = out;
  return c;
}

double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}
} // namespace

TEST_CASE("adversarial value arithmetic") {
  Tape<double> tape;
  const auto l = adversarial_loss(scores(tape, {1.0}), scores(tape, {0.2}), scores(tape, {0.4}), 0.5);
  CHECK(l.value().item() == Catch::Approx(0.7).margin(1e-6));
  for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
    const auto c = scores(tape, {0.37, 0.37});
    CHECK(std::abs(adversarial_loss(c, c, c, alpha).value().item()) < 1e-15);
  }
  CHECK(adversarial_loss(scores(tape, {1.0, 3.0}), scores(tape, {0.5, 0.5}), 1.0).value().item() ==
        Catch::Approx(1.5));
  CHECK_THROWS_AS(adversarial_loss(scores(tape, {1.0}), scores(tape, {1.0, 2.0}), scores(tape, {1.0}), 0.5),
                  ShapeError);
  CHECK_THROWS_AS(adversarial_loss(tape.constant(Tensor<double>({1, 2, 1, 1})), scores(tape, {1.0}),
                                   scores(tape, {1.0}), 0.5),
                  ShapeError);
}

TEST_CASE("alpha boundary gives exact zero gradients") {
  Tape<double> tape;
  auto real = scores(tape, {0.3, -0.1}, true);
  auto fr = scores(tape, {0.8, 0.2}, true);
  auto fg = scores(tape, {-0.4, 0.6}, true);
  const auto g1 = backward(adversarial_loss(real, fr, fg, 1.0));
  const auto dfg = g1.get(fg);
  for (double v : dfg.data()) CHECK(v == 0.0);
  const auto g0 = backward(adversarial_loss(real, fr, fg, 0.0));
  const auto dfr = g0.get(fr);
  for (double v : dfr.data()) CHECK(v == 0.0);

  // The same through the networks: G's parameters see nothing at alpha = 1.
  Rng rng(11);
  auto g = make_generator<double>(tiny_unet(2, 1));
  init_weights(g, rng);
  DiscConfig dc;
  dc.image_channels = 1;
  dc.patch_size = 32;
  dc.channels = {2, 2, 2, 2, 2};
  auto d = make_discriminator<double>(dc);
  init_weights(d, rng);
  Tape<double> t2;
  const auto bg = bind(t2, g, true);
  const auto bd = bind(t2, d, false);
  auto x = t2.constant(sample_uniform<double>({2, 1, 32, 32}, 0, 1, rng));
  auto z = t2.constant(sample_normal<double>({2, 1, 32, 32}, 0, 1, rng));
  LossComponents<double> c;
  c.adv_g = mean(discriminator_forward(bd, x, generator_forward(bg, x, z)));
  const auto total = total_loss(c, LossWeights{1.0, 0.0, 0.0});
  REQUIRE(total.g);
  const auto grads = backward(*total.g);
  for (const auto& v : bg.vars) CHECK(max_abs(grads.get(v)) == 0.0);
}

TEST_CASE("gradient penalty closed-form critics") {
  Tape<double> tape;
  Rng rng(3);
  const Tensor<double> real({1, 2, 1, 2}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const Tensor<double> fake({1, 2, 1, 2}, std::vector<double>{0.5, 0.1, 0.0, 0.9});
  const auto p = gradient_penalty(SumCritic{tape}, tape, real, fake, 10.0, rng);
  CHECK(p.value == Catch::Approx(10.0).margin(1e-6));
  REQUIRE(p.grad_norms.size() == 1);
  CHECK(p.grad_norms[0] == Catch::Approx(2.0));

  Tensor<double> u({3, 1, 2, 2});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) u[n * 4 + i] = (i % 2 ? -0.5 : 0.5);
  const auto q = gradient_penalty(UnitCritic{tape, u}, tape, Tensor<double>(u.shape()), u, 10.0, rng);
  CHECK(q.value == Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_AS(gradient_penalty(SumCritic{tape}, tape, real, Tensor<double>({1, 2, 2, 2}), 10.0, rng),
                  ShapeError);
}

TEST_CASE("gradient penalty agrees with a finite-difference input gradient") {
  Rng rng(21);
  const auto d = gradcheck::detail::small_critic(rng);
  const Shape s{2, 2, 32, 32};
  const auto pair = sample_uniform<double>(s, 0, 1, rng);
  Tape<double> tape;
  const auto bd = bind(tape, d, true);
  // Identical pairs pin the interpolate regardless of the drawn epsilon.
  const auto pen = gradient_penalty(bd, pair, pair, 10.0, rng);
  CHECK(pen.value >= 0.0);

  auto score_of = [&](std::size_t item) {
    return std::function<double(const Tensor<double>&)>([&d, item](const Tensor<double>& in) {
      Tape<double> t;
      const double v = critic_score(bind(t, d, false), t.constant(in)).value()[item];
      return v;
    });
  };
  double expect = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const auto g = oracle::numeric_gradient(score_of(n), pair, 1e-5);
    double sq = 0;
    for (std::size_t i = n * s.item(); i < (n + 1) * s.item(); ++i) sq += g[i] * g[i];
    CHECK(pen.grad_norms[n] == Catch::Approx(std::sqrt(sq)).epsilon(1e-2));
    expect += (std::sqrt(sq) - 1) * (std::sqrt(sq) - 1);
  }
  CHECK(pen.value == Catch::Approx(10.0 * expect / s.n).epsilon(1e-2));
}

TEST_CASE("critic loss has the zero-sum structure") {
  Rng rng(8);
  const auto d = gradcheck::detail::small_critic(rng);
  Tape<double> tape;
  const auto bd = bind(tape, d, true);
  const Shape s{2, 1, 32, 32};
  const auto x = sample_uniform<double>(s, 0, 1, rng);
  const auto y = sample_uniform<double>(s, 0, 1, rng);
  const auto xh = sample_uniform<double>(s, 0, 1, rng);
  const auto yh = sample_uniform<double>(s, 0, 1, rng);
  LossComponents<double> c;
  c.gan = adversarial_loss(discriminator_forward(bd, tape.constant(x), tape.constant(y)),
                           discriminator_forward(bd, tape.constant(xh), tape.constant(y)),
                           discriminator_forward(bd, tape.constant(x), tape.constant(yh)), 0.5);
  c.gp_r = gradient_penalty(bd, make_pair(x, y), make_pair(xh, y), 10.0, rng);
  c.gp_g = gradient_penalty(bd, make_pair(x, y), make_pair(x, yh), 10.0, rng);
  const auto total = total_loss(c, LossWeights{});
  REQUIRE(total.d);
  CHECK(total.d_value == Catch::Approx(-c.gan->value().item() + 0.5 * c.gp_r->value + 0.5 * c.gp_g->value));
  CHECK(total.gp_value >= 0.0);
  const auto gd = backward(*total.d);
  const auto gg = backward(*c.gan);
  const auto gr = backward(c.gp_r->surrogate);
  const auto gq = backward(c.gp_g->surrogate);
  for (const auto& v : bd.vars) {
    const Tensor<double> lhs = gd.get(v);
    const Tensor<double> a = gg.get(v);
    const Tensor<double> b = gr.get(v);
    const Tensor<double> q = gq.get(v);
    for (std::size_t i = 0; i < lhs.size(); ++i)
      CHECK(lhs[i] == Catch::Approx(-a[i] + 0.5 * b[i] + 0.5 * q[i]).margin(1e-12));
  }
}

TEST_CASE("degenerate weights leave only the adversarial gradient") {
  Tape<double> tape;
  auto adv = scores(tape, {0.7}, true);
  auto l1 = scores(tape, {0.3}, true);
  LossComponents<double> c;
  c.adv_r = mean(adv);
  c.l1 = mean(l1);
  const auto total = total_loss(c, LossWeights{0.4, 0.0, 0.0});
  const auto g = backward(*total.r);
  CHECK(g.get(adv)[0] == Catch::Approx(-0.4));
  CHECK(g.get(l1)[0] == 0.0);
  CHECK(total.r_value == Catch::Approx(-0.28));
}

TEST_CASE("denoiser L1 examples") {
  Rng rng(4);
  Tape<double> tape;
  const auto x = sample_uniform<double>({2, 3, 5, 5}, 0, 1, rng);
  CHECK(denoiser_l1(tape.constant(x), tape.constant(x)).value().item() == 0.0);
  Tensor<double> off = x;
  for (auto& v : off.data()) v += 0.05;
  CHECK(denoiser_l1(tape.constant(off), tape.constant(x)).value().item() == Catch::Approx(0.05).margin(1e-6));
  const auto r = sample_normal<double>(x.shape(), 0, 1, rng);
  CHECK(denoiser_l1(tape.constant(r), tape.constant(x)).value().item() ==
        Catch::Approx(oracle::mean_abs_diff(r, x)).margin(1e-12));
  CHECK_THROWS_AS(denoiser_l1(tape.constant(x), tape.constant(Tensor<double>({2, 3, 5, 4}))), ShapeError);
}

TEST_CASE("noise statistics loss examples") {
  Rng rng(5);
  Tape<double> tape;
  const auto x = sample_uniform<double>({1, 3, 16, 16}, 0, 1, rng);
  Tensor<double> y = x, yh = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] += 0.1;
    yh[i] += 0.2;
  }
  const FilterSpec f{};
  auto X = tape.constant(x);
  CHECK(noise_stat_loss(tape.constant(y), tape.constant(y), X, f).value().item() == 0.0);
  CHECK(noise_stat_loss(tape.constant(yh), tape.constant(y), X, f).value().item() ==
        Catch::Approx(0.1).margin(1e-6));
  CHECK_THROWS_AS(noise_stat_loss(tape.constant(y), tape.constant(Tensor<double>({1, 3, 16, 8})), X, f),
                  ShapeError);
}

TEST_CASE("noise statistics loss on identically distributed noise shrinks with the filter size") {
  // Filtered i.i.d. noise has variance sigma^2 * sum(w^2); the difference of two
  // independent copies is Gaussian, so E|.| = sqrt(2/pi) * sqrt(2 sigma^2 sum(w^2)).
  Rng rng(6);
  const double sigma = 0.1;
  const Shape s{1, 1, 64, 64};
  double previous = 1e9;
  for (std::size_t size : {3u, 7u, 11u}) {
    const double filter_sigma = size / 3.0;
    double w2 = 0;
    for (double w : oracle::gaussian(size, filter_sigma)) w2 += w * w;
    const double expected = std::sqrt(2.0 / M_PI) * std::sqrt(2 * sigma * sigma * w2);
    double acc = 0;
    const int draws = 100;
    for (int d = 0; d < draws; ++d) {
      Tape<double> tape;
      auto x = tape.constant(Tensor<double>(s));
      auto y = tape.constant(sample_normal<double>(s, 0, sigma, rng));
      auto yh = tape.constant(sample_normal<double>(s, 0, sigma, rng));
      acc += noise_stat_loss(yh, y, x, FilterSpec{size, filter_sigma}).value().item();
    }
    const double m = acc / draws;
    INFO("filter " << size);
    CHECK(m > 0.0);
    CHECK(m < previous);
    CHECK(m == Catch::Approx(expected).epsilon(0.1));
    previous = m;
  }
}
