// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "danet/errors.hpp"
#include "danet/tensor.hpp"

namespace danet {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

} // namespace detail

/// Seeded pseudo-random stream. Independent streams are derived from a base
/// seed plus a name and index so that consumers (patch sampling, latent
/// draws, interpolation weights, ...) never perturb each other.
class Rng {
public:
  using engine_type = std::mt19937_64;

  explicit Rng(std::uint64_t seed = 0) : engine_(detail::splitmix64(seed)) {}

  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t s = detail::splitmix64(seed);
    s = detail::splitmix64(s ^ detail::fnv1a(name));
    s = detail::splitmix64(s ^ (index * 0xd1342543de82ef95ULL));
    return Rng(s);
  }

  /// Child stream drawn from this generator's sequence.
  Rng fork(std::string_view name) { return stream(engine_(), name); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t bits() { return engine_(); }

  engine_type& engine() noexcept { return engine_; }

private:
  engine_type engine_;
};

template <class T = float>
Tensor<T> sample_normal(Shape shape, double mean, double stddev, Rng& rng) {
  if (!(stddev >= 0.0)) throw ParameterError("sample_normal: stddev must be >= 0");
  Tensor<T> out(shape);
  if (stddev == 0.0) {
    for (auto& v : out.data()) v = static_cast<T>(mean);
    return out;
  }
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng.engine()));
  return out;
}

template <class T = float>
Tensor<T> sample_uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor<T> out(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng.engine()));
  return out;
}

} // namespace danet
