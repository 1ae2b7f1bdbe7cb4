// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "danet/losses.hpp"
#include "danet/nn.hpp"
#include "danet/ops.hpp"
#include "danet/rng.hpp"
#include "danet/tape.hpp"

namespace danet::gradcheck {

using Tensor64 = Tensor<double>;
using Var64 = Var<double>;

/// Builds a scalar loss on `tape` from leaf inputs (all requiring grad).
using LossBuilder = std::function<Var64(Tape<double>& tape, const std::vector<Var64>& inputs)>;

struct Options {
  double step = 1e-4;            // central-difference step
  std::size_t max_probes = 24;   // per input tensor; all elements when smaller
  double tolerance = 1e-3;
};

struct Result {
  double worst_rel_error = 0.0;
  std::size_t probes = 0;
};

/// Compares reverse-mode gradients of `build` against central finite
/// differences in 64-bit arithmetic. The error of each input tensor is
/// max|analytic - numeric| / max(max|numeric|, max|analytic|) over the probed
/// elements; the worst tensor is reported.
inline Result compare(const LossBuilder& build, std::vector<Tensor64> inputs, Rng& rng,
                      const Options& opt = {}) {
  std::vector<Tensor64> analytic;
  {
    Tape<double> tape;
    std::vector<Var64> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    const Gradients<double> g = backward(build(tape, vars));
    for (const auto& v : vars) analytic.push_back(g.get(v));
  }
  auto evaluate = [&]() {
    Tape<double> tape;
    std::vector<Var64> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    return build(tape, vars).value().item();
  };

  Result r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].size();
    std::vector<std::size_t> idx;
    if (n <= opt.max_probes) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_probes; ++i) idx.push_back(rng.index(n));
    }
    double max_diff = 0.0, max_mag = 0.0;
    for (std::size_t i : idx) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + opt.step;
      const double up = evaluate();
      inputs[k][i] = orig - opt.step;
      const double down = evaluate();
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[k][i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_mag = std::max({max_mag, std::abs(numeric), std::abs(a)});
      ++r.probes;
    }
    const double rel = max_mag > 1e-12 ? max_diff / max_mag : max_diff;
    r.worst_rel_error = std::max(r.worst_rel_error, rel);
  }
  return r;
}

/// Random tensor with entries bounded away from zero, so kinks of |v| and
/// leaky-ReLU are not straddled by the difference step.
inline Tensor64 random_away_from_zero(Shape s, Rng& rng) {
  Tensor64 t(s);
  for (auto& v : t.data()) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

/// sum(out * w) for a fixed random cotangent w.
inline Var64 project(Tape<double>& tape, const Var64& out, Rng& rng) {
  return sum(mul(out, tape.constant(sample_normal<double>(out.shape(), 0.0, 1.0, rng))));
}

struct Item {
  std::string scope;
  std::string name;
  double worst_rel_error = 0.0;
  std::size_t probes = 0;
  bool passed = false;
};

struct Case {
  std::string scope;
  std::string name;
  std::function<Result(Rng&, const Options&)> run;
};

struct Report {
  std::vector<Item> items;
  bool passed() const {
    return std::all_of(items.begin(), items.end(), [](const Item& i) { return i.passed; });
  }
};

// ---------------------------------------------------------------------------
// Registered suites.

namespace detail {

/// Runs a single-op check over `shapes` random configurations.
inline Result over_shapes(std::size_t count, Rng& rng,
                          const std::function<Result(Rng&)>& one) {
  Result worst;
  for (std::size_t i = 0; i < count; ++i) {
    const Result r = one(rng);
    worst.worst_rel_error = std::max(worst.worst_rel_error, r.worst_rel_error);
    worst.probes += r.probes;
  }
  return worst;
}

inline Shape random_shape(Rng& rng, std::size_t max_c = 3, std::size_t min_hw = 1,
                          std::size_t max_hw = 6) {
  return Shape{1 + rng.index(2), 1 + rng.index(max_c), min_hw + rng.index(max_hw - min_hw + 1),
               min_hw + rng.index(max_hw - min_hw + 1)};
}

using Unary = std::function<Var64(const Var64&)>;

inline Case unary_case(std::string name, Unary f, std::size_t shapes = 10) {
  return {"ops", name, [f, shapes](Rng& rng, const Options& opt) {
            return over_shapes(shapes, rng, [&](Rng& r) {
              const Shape s = random_shape(r);
              const std::uint64_t proj_seed = r.bits();
              return compare(
                  [&](Tape<double>& tape, const std::vector<Var64>& in) {
                    Rng pr(proj_seed);
                    return project(tape, f(in[0]), pr);
                  },
                  {random_away_from_zero(s, r)}, r, opt);
            });
          }};
}

inline Case binary_case(std::string name, std::function<Var64(const Var64&, const Var64&)> f) {
  return {"ops", name, [f](Rng& rng, const Options& opt) {
            return over_shapes(10, rng, [&](Rng& r) {
              const Shape s = random_shape(r);
              const std::uint64_t proj_seed = r.bits();
              return compare(
                  [&](Tape<double>& tape, const std::vector<Var64>& in) {
                    Rng pr(proj_seed);
                    return project(tape, f(in[0], in[1]), pr);
                  },
                  {random_away_from_zero(s, r), random_away_from_zero(s, r)}, r, opt);
            });
          }};
}

inline NetworkParams<double> small_unet(Role role, Rng& rng) {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 3;
  c.in_channels = role == Role::generator ? 3 : 2;
  c.out_channels = 2;
  auto net = role == Role::generator ? make_generator<double>(c) : make_denoiser<double>(c);
  init_weights(net, rng);
  // Nonzero biases so that every bias gradient path is exercised.
  for (auto& p : net.params)
    if (is_bias(p.name)) p.value = sample_normal<double>(p.value.shape(), 0.0, 0.1, rng);
  return net;
}

inline NetworkParams<double> small_critic(Rng& rng) {
  DiscConfig c;
  c.image_channels = 1;
  c.patch_size = 32;
  c.channels = {3, 4, 4, 5, 5};
  auto net = make_discriminator<double>(c);
  init_weights(net, rng);
  for (auto& p : net.params) {
    // Larger weights than the 0.02 init keep activations well scaled.
    p.value = sample_normal<double>(p.value.shape(), 0.0, is_bias(p.name) ? 0.1 : 0.3, rng);
  }
  return net;
}

/// Builds a loss from a network whose parameters are the checked inputs.
inline Result network_case(const NetworkParams<double>& net, std::vector<Tensor64> extra,
                           std::function<Var64(const Bound<double>&, const std::vector<Var64>&)> fwd,
                           Rng& rng, const Options& opt) {
  std::vector<Tensor64> inputs;
  for (const auto& p : net.params) inputs.push_back(p.value);
  const std::size_t np = inputs.size();
  for (auto& e : extra) inputs.push_back(std::move(e));
  const std::uint64_t proj_seed = rng.bits();
  return compare(
      [&](Tape<double>& tape, const std::vector<Var64>& in) {
        Bound<double> b{&net, std::vector<Var64>(in.begin(), in.begin() + static_cast<long>(np))};
        std::vector<Var64> rest(in.begin() + static_cast<long>(np), in.end());
        Rng pr(proj_seed);
        return project(tape, fwd(b, rest), pr);
      },
      std::move(inputs), rng, opt);
}

} // namespace detail

inline std::vector<Case> default_cases() {
  using namespace detail;
  std::vector<Case> cases;

  cases.push_back({"ops", "conv2d", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const std::size_t k = 1 + r.index(4), stride = 1 + r.index(2), pad = r.index(3);
                       const std::size_t cin = 1 + r.index(3), cout = 1 + r.index(3);
                       const std::size_t h = k + r.index(5), w = k + r.index(5);
                       const std::uint64_t ps = r.bits();
                       return compare(
                           [&](Tape<double>& tape, const std::vector<Var64>& in) {
                             Rng pr(ps);
                             return project(tape, conv2d(in[0], in[1], in[2], stride, pad), pr);
                           },
                           {sample_normal<double>({1 + r.index(2), cin, h, w}, 0, 1, r),
                            sample_normal<double>({cout, cin, k, k}, 0, 1, r),
                            sample_normal<double>({1, cout, 1, 1}, 0, 1, r)},
                           r, opt);
                     });
                   }});
  cases.push_back({"ops", "linear", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const Shape s = random_shape(r);
                       const std::size_t out = 1 + r.index(3);
                       const std::uint64_t ps = r.bits();
                       return compare(
                           [&](Tape<double>& tape, const std::vector<Var64>& in) {
                             Rng pr(ps);
                             return project(tape, linear(in[0], in[1], in[2]), pr);
                           },
                           {sample_normal<double>(s, 0, 1, r),
                            sample_normal<double>({out, s.item(), 1, 1}, 0, 1, r),
                            sample_normal<double>({1, out, 1, 1}, 0, 1, r)},
                           r, opt);
                     });
                   }});
  cases.push_back(unary_case("upsample_nearest", [](const Var64& v) { return upsample_nearest(v, 2); }));
  cases.push_back({"ops", "avg_pool", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       Shape s = random_shape(r);
                       s.h = 2 * (1 + r.index(3));
                       s.w = 2 * (1 + r.index(3));
                       const std::uint64_t ps = r.bits();
                       return compare(
                           [&](Tape<double>& tape, const std::vector<Var64>& in) {
                             Rng pr(ps);
                             return project(tape, avg_pool(in[0], 2), pr);
                           },
                           {sample_normal<double>(s, 0, 1, r)}, r, opt);
                     });
                   }});
  cases.push_back(binary_case("add", [](const Var64& a, const Var64& b) { return add(a, b); }));
  cases.push_back(binary_case("sub", [](const Var64& a, const Var64& b) { return sub(a, b); }));
  cases.push_back(binary_case("mul", [](const Var64& a, const Var64& b) { return mul(a, b); }));
  cases.push_back(unary_case("scale", [](const Var64& v) { return scale(v, -1.7); }));
  cases.push_back(unary_case("leaky_relu", [](const Var64& v) { return leaky_relu(v, 0.2); }));
  cases.push_back(unary_case("abs", [](const Var64& v) { return abs(v); }));
  cases.push_back(unary_case("square", [](const Var64& v) { return square(v); }));
  cases.push_back(binary_case("concat_channels", [](const Var64& a, const Var64& b) {
    return concat_channels<double>({a, b, a});
  }));
  cases.push_back(unary_case("mean", [](const Var64& v) { return mean(v); }));
  cases.push_back(unary_case("sum", [](const Var64& v) { return sum(v); }));
  cases.push_back({"ops", "gaussian_filter", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const Shape s = random_shape(r, 2, 2, 9);
                       const std::size_t ks = 1 + 2 * r.index(3);
                       const double sigma = r.uniform(0.5, 2.0);
                       const std::uint64_t ps = r.bits();
                       return compare(
                           [&](Tape<double>& tape, const std::vector<Var64>& in) {
                             Rng pr(ps);
                             return project(tape, gaussian_filter(in[0], ks, sigma), pr);
                           },
                           {sample_normal<double>(s, 0, 1, r)}, r, opt);
                     });
                   }});

  Options net_opt;
  net_opt.step = 1e-6;
  cases.push_back({"networks", "denoiser R", [net_opt](Rng& rng, const Options&) {
                     auto net = small_unet(Role::denoiser, rng);
                     return network_case(net, {sample_uniform<double>({2, 2, 8, 8}, 0, 1, rng)},
                                         [](const Bound<double>& b, const std::vector<Var64>& in) {
                                           return denoiser_forward(b, in[0]);
                                         },
                                         rng, net_opt);
                   }});
  cases.push_back({"networks", "generator G", [net_opt](Rng& rng, const Options&) {
                     auto net = small_unet(Role::generator, rng);
                     return network_case(net,
                                         {sample_uniform<double>({2, 2, 8, 8}, 0, 1, rng),
                                          sample_normal<double>({2, 1, 8, 8}, 0, 1, rng)},
                                         [](const Bound<double>& b, const std::vector<Var64>& in) {
                                           return generator_forward(b, in[0], in[1]);
                                         },
                                         rng, net_opt);
                   }});
  cases.push_back({"networks", "discriminator D", [net_opt](Rng& rng, const Options&) {
                     auto net = small_critic(rng);
                     return network_case(net,
                                         {sample_uniform<double>({2, 1, 32, 32}, 0, 1, rng),
                                          sample_uniform<double>({2, 1, 32, 32}, 0, 1, rng)},
                                         [](const Bound<double>& b, const std::vector<Var64>& in) {
                                           return discriminator_forward(b, in[0], in[1]);
                                         },
                                         rng, net_opt);
                   }});

  cases.push_back({"losses", "adversarial_loss", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const Shape s{1 + r.index(4), 1, 1, 1};
                       const double alpha = r.uniform();
                       return compare(
                           [&](Tape<double>&, const std::vector<Var64>& in) {
                             return adversarial_loss(in[0], in[1], in[2], alpha);
                           },
                           {sample_normal<double>(s, 0, 1, r), sample_normal<double>(s, 0, 1, r),
                            sample_normal<double>(s, 0, 1, r)},
                           r, opt);
                     });
                   }});
  cases.push_back({"losses", "denoiser_l1", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const Shape s = random_shape(r);
                       return compare(
                           [&](Tape<double>&, const std::vector<Var64>& in) {
                             return denoiser_l1(in[0], in[1]);
                           },
                           {random_away_from_zero(s, r), Tensor64(s)}, r, opt);
                     });
                   }});
  cases.push_back({"losses", "noise_stat_loss", [](Rng& rng, const Options& opt) {
                     return over_shapes(10, rng, [&](Rng& r) {
                       const Shape s = random_shape(r, 2, 3, 8);
                       return compare(
                           [&](Tape<double>&, const std::vector<Var64>& in) {
                             return noise_stat_loss(in[0], in[1], in[2], FilterSpec{3, 1.0});
                           },
                           {sample_normal<double>(s, 0, 1, r), sample_normal<double>(s, 0, 1, r),
                            sample_normal<double>(s, 0, 1, r)},
                           r, opt);
                     });
                   }});
  cases.push_back({"losses", "gradient_penalty", [net_opt](Rng& rng, const Options&) {
                     // Parameter gradient of the penalty (via the directional-derivative
                     // surrogate) against finite differences of the penalty value.
                     auto net = small_critic(rng);
                     const Tensor64 real = sample_uniform<double>({2, 2, 32, 32}, 0, 1, rng);
                     const Tensor64 fake = sample_uniform<double>({2, 2, 32, 32}, 0, 1, rng);
                     const std::uint64_t eps_seed = rng.bits();
                     std::vector<Tensor64> inputs;
                     for (const auto& p : net.params) inputs.push_back(p.value);
                     std::vector<Tensor64> analytic;
                     {
                       Tape<double> tape;
                       Bound<double> b{&net, {}};
                       for (const auto& t : inputs) b.vars.push_back(tape.leaf(t, true));
                       Rng er(eps_seed);
                       auto gp = gradient_penalty(b, real, fake, 10.0, er);
                       const auto g = backward(gp.surrogate);
                       for (const auto& v : b.vars) analytic.push_back(g.get(v));
                     }
                     auto value = [&](const std::vector<Tensor64>& ps) {
                       NetworkParams<double> probe = net;
                       for (std::size_t i = 0; i < ps.size(); ++i) probe.params[i].value = ps[i];
                       Tape<double> tape;
                       Bound<double> b = bind(tape, probe, true);
                       Rng er(eps_seed);
                       return gradient_penalty(b, real, fake, 10.0, er).value;
                     };
                     Result r;
                     for (std::size_t k = 0; k < inputs.size(); ++k) {
                       double max_diff = 0, max_mag = 0;
                       for (std::size_t j = 0; j < std::min<std::size_t>(8, inputs[k].size()); ++j) {
                         const std::size_t i = rng.index(inputs[k].size());
                         const double orig = inputs[k][i];
                         inputs[k][i] = orig + net_opt.step;
                         const double up = value(inputs);
                         inputs[k][i] = orig - net_opt.step;
                         const double down = value(inputs);
                         inputs[k][i] = orig;
                         const double numeric = (up - down) / (2 * net_opt.step);
                         max_diff = std::max(max_diff, std::abs(numeric - analytic[k][i]));
                         max_mag = std::max({max_mag, std::abs(numeric), std::abs(analytic[k][i])});
                         ++r.probes;
                       }
                       r.worst_rel_error =
                           std::max(r.worst_rel_error, max_mag > 1e-12 ? max_diff / max_mag : max_diff);
                     }
                     return r;
                   }});
  return cases;
}

/// Runs every case whose scope matches (`all` matches everything).
inline Report run(const std::vector<Case>& cases, const std::string& scope, std::uint64_t seed,
                  const Options& opt = {}) {
  Report report;
  for (const auto& c : cases) {
    if (scope != "all" && c.scope != scope) continue;
    Rng rng = Rng::stream(seed, c.name);
    const Result r = c.run(rng, opt);
    report.items.push_back(
        {c.scope, c.name, r.worst_rel_error, r.probes, r.worst_rel_error < opt.tolerance});
  }
  return report;
}

/// Number of differentiable ops the "ops" scope covers.
inline std::size_t registered_op_count(const std::vector<Case>& cases) {
  return static_cast<std::size_t>(
      std::count_if(cases.begin(), cases.end(), [](const Case& c) { return c.scope == "ops"; }));
}

/// Negative control: a scale op whose backward is off by 10%.
inline Case corrupted_case() {
  return detail::unary_case("corrupted_scale", [](const Var64& v) {
    Tensor64 out(v.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * v.value()[i];
    return v.tape()->record("corrupted_scale", std::move(out), {v},
                            [](const Tensor64& dy, GradSink<double>& sink) {
                              if (auto* d = sink[0])
                                for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += 2.2 * dy[i];
                            });
  });
}

} // namespace danet::gradcheck
