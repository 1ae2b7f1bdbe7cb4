// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "danet/nn.hpp"
#include "oracles.hpp"

using namespace danet;

namespace {
UNetConfig small_unet(std::size_t in, std::size_t out) {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.in_channels = in;
  c.out_channels = out;
  return c;
}

DiscConfig small_disc() {
  DiscConfig c;
  c.patch_size = 32;
  c.channels = {4, 4, 8, 8, 8};
  return c;
}

double sample_variance(const Tensor<float>& t) {
  double m = 0, sq = 0;
  for (float v : t.data()) m += v;
  m /= t.size();
  for (float v : t.data()) sq += (v - m) * (v - m);
  return sq / (t.size() - 1);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("danet_test_nn_" + name);
}
} // namespace

TEST_CASE("initialization follows the role conventions") {
  Rng rng(1);
  UNetConfig c = small_unet(3, 3);
  c.base_channels = 64;
  c.depth = 1;
  auto r = make_denoiser<float>(c);
  init_weights(r, rng);
  for (const auto& p : r.params) {
    if (is_bias(p.name))
      for (float v : p.value.data()) CHECK(v == 0.0f);
    for (float v : p.m.data()) CHECK(v == 0.0f);
  }
  // enc0.conv2 is a 64x64x3x3 kernel.
  const auto& k = r["enc0.conv2.weight"].value;
  REQUIRE(k.shape() == Shape{64, 64, 3, 3});
  CHECK(sample_variance(k) == Catch::Approx(2.0 / (64 * 9)).epsilon(0.15));

  auto d = make_discriminator<float>(DiscConfig{3, 32, {32, 64, 128, 256, 512}, 0.2});
  init_weights(d, rng);
  const auto& dk = d["conv3.weight"].value;
  REQUIRE(dk.size() >= 10000);
  CHECK(std::sqrt(sample_variance(dk)) == Catch::Approx(0.02).epsilon(0.15));
  for (float v : d["fc.bias"].value.data()) CHECK(v == 0.0f);
}

TEST_CASE("parameter manifests are deterministic and unique") {
  const auto a = make_generator<float>(small_unet(4, 3));
  const auto b = make_generator<float>(small_unet(4, 3));
  CHECK(a.manifest() == b.manifest());
  std::set<std::string> names;
  for (const auto& p : a.params) {
    CHECK(names.insert(p.name).second);
    CHECK(p.m.shape() == p.value.shape());
    CHECK(p.v.shape() == p.value.shape());
  }
  CHECK_THROWS_AS(make_denoiser<float>(small_unet(3, 1)), ParameterError);
  CHECK_THROWS_AS(make_generator<float>(small_unet(3, 3)), ParameterError);
  DiscConfig bad = small_disc();
  bad.patch_size = 48;
  CHECK_THROWS_AS(make_discriminator<float>(bad), ParameterError);
}

TEST_CASE("zero-body networks are exact identities") {
  Rng rng(2);
  auto r = make_denoiser<float>(small_unet(3, 3));
  auto g = make_generator<float>(small_unet(4, 3));
  zero_parameters(r);
  zero_parameters(g);
  const auto y = sample_uniform<float>({1, 3, 64, 64}, 0, 1, rng);
  const auto z = sample_normal<float>({1, 1, 64, 64}, 0, 1, rng);
  const auto x_hat = run_denoiser(r, y);
  CHECK(x_hat.shape() == y.shape());
  CHECK(x_hat == y);
  CHECK(run_generator(g, y, z) == y);
}

TEST_CASE("forward contracts") {
  Rng rng(3);
  auto r = make_denoiser<float>(small_unet(3, 3));
  init_weights(r, rng);
  try {
    run_denoiser(r, Tensor<float>({1, 3, 30, 32}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 4") != std::string::npos);
  }
  auto g = make_generator<float>(small_unet(4, 3));
  init_weights(g, rng);
  CHECK_THROWS_AS(run_generator(g, Tensor<float>({1, 3, 16, 16}), Tensor<float>({1, 1, 8, 16})), ShapeError);
  CHECK_THROWS_AS(run_denoiser(g, Tensor<float>({1, 3, 16, 16})), ContractError);

  auto d = make_discriminator<float>(small_disc());
  init_weights(d, rng);
  Tape<float> tape;
  const auto bd = bind(tape, d, false);
  for (std::size_t n : {1u, 3u}) {
    const auto s = discriminator_forward(bd, tape.constant(Tensor<float>({n, 3, 32, 32})),
                                         tape.constant(Tensor<float>({n, 3, 32, 32})));
    CHECK(s.shape() == Shape{n, 1, 1, 1});
  }
  CHECK_THROWS_AS(discriminator_forward(bd, tape.constant(Tensor<float>({1, 3, 16, 16})),
                                        tape.constant(Tensor<float>({1, 3, 16, 16}))),
                  ShapeError);
  zero_parameters(d);
  const auto bz = bind(tape, d, false);
  const auto zs = discriminator_forward(bz, tape.constant(sample_uniform<float>({2, 3, 32, 32}, 0, 1, rng)),
                                        tape.constant(sample_uniform<float>({2, 3, 32, 32}, 0, 1, rng)));
  for (float v : zs.value().data()) CHECK(v == 0.0f);
}

TEST_CASE("denoiser parameter gradient matches finite differences") {
  Rng rng(4);
  auto r = make_denoiser<double>(small_unet(2, 2));
  init_weights(r, rng);
  for (auto& p : r.params) p.value = sample_normal<double>(p.value.shape(), 0, 0.3, rng);
  const auto y = sample_uniform<double>({1, 2, 8, 8}, 0, 1, rng);
  const std::size_t idx = r.index_of("enc1.conv1.weight");
  auto loss = [&](const NetworkParams<double>& net) {
    Tape<double> tape;
    return mean(denoiser_forward(bind(tape, net, false), tape.constant(y))).value().item();
  };
  Tape<double> tape;
  const auto b = bind(tape, r, true);
  const auto g = backward(mean(denoiser_forward(b, tape.constant(y)))).at(b.vars[idx]);
  auto f = [&](const Tensor<double>& w) {
    auto probe = r;
    probe.params[idx].value = w;
    return loss(probe);
  };
  CHECK(oracle::rel_error(g, oracle::numeric_gradient(f, r.params[idx].value, 1e-6)) < 1e-3);
}

TEST_CASE("every parameter receives a gradient and z is reachable") {
  Rng rng(5);
  auto g = make_generator<double>(small_unet(3, 2));
  init_weights(g, rng);
  for (auto& p : g.params)
    if (is_bias(p.name)) p.value = sample_normal<double>(p.value.shape(), 0, 0.1, rng);
  Tape<double> tape;
  const auto b = bind(tape, g, true);
  auto x = tape.constant(sample_uniform<double>({2, 2, 8, 8}, 0, 1, rng));
  auto z = tape.leaf(sample_normal<double>({2, 1, 8, 8}, 0, 1, rng), true);
  auto probe = tape.constant(sample_normal<double>({2, 2, 8, 8}, 0, 1, rng));
  const auto grads = backward(sum(mul(generator_forward(b, x, z), probe)));
  for (std::size_t i = 0; i < b.vars.size(); ++i) {
    INFO(g.params[i].name);
    double mag = 0;
    for (double v : grads.at(b.vars[i]).data()) mag = std::max(mag, std::abs(v));
    CHECK(mag > 0);
  }
  double zmag = 0;
  for (double v : grads.at(z).data()) zmag = std::max(zmag, std::abs(v));
  CHECK(zmag > 0);

  auto d = make_discriminator<double>(small_disc());
  init_weights(d, rng);
  for (auto& p : d.params) p.value = sample_normal<double>(p.value.shape(), 0, 0.2, rng);
  Tape<double> t2;
  const auto bd = bind(t2, d, true);
  auto pair = t2.leaf(sample_uniform<double>({2, 6, 32, 32}, 0, 1, rng), true);
  const auto dg = backward(sum(critic_score(bd, pair)));
  for (std::size_t i = 0; i < bd.vars.size(); ++i) {
    INFO(d.params[i].name);
    double mag = 0;
    for (double v : dg.at(bd.vars[i]).data()) mag = std::max(mag, std::abs(v));
    CHECK(mag > 0);
  }
  CHECK(dg.at(pair).all_finite());
}

TEST_CASE("critic directional derivative matches finite differences of the score") {
  Rng rng(6);
  auto d = make_discriminator<double>(small_disc());
  init_weights(d, rng);
  for (auto& p : d.params) p.value = sample_normal<double>(p.value.shape(), 0, 0.2, rng);
  const auto pair = sample_uniform<double>({2, 6, 32, 32}, 0, 1, rng);
  const auto v = sample_normal<double>(pair.shape(), 0, 1, rng);
  Tape<double> tape;
  const auto jvp = critic_input_jvp(bind(tape, d, true), pair, v).value();
  auto score = [&](double h) {
    Tensor<double> p = pair;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += h * v[i];
    Tape<double> t;
    return critic_score(bind(t, d, false), t.constant(p)).value();
  };
  const double h = 1e-6;
  const auto up = score(h), down = score(-h);
  for (std::size_t n = 0; n < 2; ++n) CHECK(jvp[n] == Catch::Approx((up[n] - down[n]) / (2 * h)).epsilon(1e-4));
}

TEST_CASE("checkpoint save/load round trip is bitwise") {
  Rng rng(7);
  auto g = make_generator<float>(small_unet(4, 3));
  init_weights(g, rng);
  g.adam_step = 12;
  for (auto& p : g.params) {
    p.m = sample_normal<float>(p.value.shape(), 0, 1, rng);
    p.v = sample_uniform<float>(p.value.shape(), 0, 1, rng);
  }
  const auto path = temp_path("g.dnck");
  save_checkpoint(path, g);
  const auto back = load_checkpoint<float>(path);
  CHECK(back.role == Role::generator);
  CHECK(back.unet == g.unet);
  CHECK(back.adam_step == 12);
  REQUIRE(back.params.size() == g.params.size());
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    CHECK(back.params[i].name == g.params[i].name);
    CHECK(back.params[i].value == g.params[i].value);
    CHECK(back.params[i].m == g.params[i].m);
    CHECK(back.params[i].v == g.params[i].v);
  }
  const auto x = sample_uniform<float>({1, 3, 16, 16}, 0, 1, rng);
  const auto z = sample_normal<float>({1, 1, 16, 16}, 0, 1, rng);
  CHECK(run_generator(back, x, z) == run_generator(g, x, z));

  auto d = make_discriminator<float>(small_disc());
  save_checkpoint(temp_path("d.dnck"), d);
  CHECK(load_checkpoint<float>(temp_path("d.dnck")).disc == d.disc);

  {
    std::ofstream os(temp_path("bad.dnck"), std::ios::binary);
    os << "DNCK\x07";
  }
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("bad.dnck")), IoError);
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("missing.dnck")), IoError);
  std::filesystem::remove(path);
}
