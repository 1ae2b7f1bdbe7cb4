// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "danet/data.hpp"
#include "danet/errors.hpp"
#include "danet/losses.hpp"
#include "danet/ops.hpp"
#include "danet/rng.hpp"
#include "danet/tensor.hpp"

namespace danet {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE), capped at 100 dB.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  require_same_shape("psnr", a.shape(), b.shape());
  if (!(peak > 0)) throw ParameterError("psnr: peak must be > 0");
  if (a.size() == 0) throw ShapeError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

struct SsimSettings {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Gaussian-window SSIM averaged over valid window positions, channels and
/// batch items.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimSettings& s = {}) {
  require_same_shape("ssim", a.shape(), b.shape());
  const Shape sh = a.shape();
  if (sh.h < s.window || sh.w < s.window)
    throw ParameterError("ssim: image " + sh.str() + " smaller than window " + std::to_string(s.window));
  const auto k = kernels::gaussian_kernel(s.window, s.sigma);
  const double c1 = (s.k1 * s.range) * (s.k1 * s.range);
  const double c2 = (s.k2 * s.range) * (s.k2 * s.range);
  const std::size_t oh = sh.h - s.window + 1, ow = sh.w - s.window + 1;
  double total = 0.0;
  for (std::size_t n = 0; n < sh.n; ++n)
    for (std::size_t c = 0; c < sh.c; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
          for (std::size_t i = 0; i < s.window; ++i)
            for (std::size_t j = 0; j < s.window; ++j) {
              const double w = k[i * s.window + j];
              const double va = a.at(n, c, y + i, x + j), vb = b.at(n, c, y + i, x + j);
              ma += w * va;
              mb += w * vb;
              saa += w * va * va;
              sbb += w * vb * vb;
              sab += w * va * vb;
            }
          const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
          total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
  return total / static_cast<double>(sh.n * sh.c * oh * ow);
}

// ---------------------------------------------------------------------------
// Noise-variance maps and AKLD.

struct AkldSettings {
  FilterSpec filter{11, 3.0};
  double floor = 1e-6;
  std::size_t samples = 50;  // L

  nlohmann::json fingerprint() const {
    return {{"filter_size", filter.kernel_size}, {"filter_sigma", filter.sigma},
            {"floor", floor}, {"L", samples}};
  }
};

/// max(GF((y - x)^2), floor), computed in double.
template <class T>
Tensor<double> variance_map(const Tensor<T>& y, const Tensor<T>& x, FilterSpec f, double floor) {
  require_same_shape("variance_map", y.shape(), x.shape());
  if (!(floor > 0)) throw ParameterError("variance_map: floor must be > 0");
  Tensor<double> sq(y.shape());
  for (std::size_t i = 0; i < sq.size(); ++i) {
    const double r = static_cast<double>(y[i]) - static_cast<double>(x[i]);
    sq[i] = r * r;
  }
  Tensor<double> v = gaussian_filter(sq, f.kernel_size, f.sigma);
  for (auto& e : v.data()) e = std::max(e, floor);
  return v;
}

/// Mean over pixels of KL(N(0, vf) || N(0, vr)) = 0.5 (vf/vr - ln(vf/vr) - 1).
inline double gaussian_kl_mean(const Tensor<double>& vf, const Tensor<double>& vr) {
  require_same_shape("akld", vf.shape(), vr.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < vf.size(); ++i) {
    const double r = vf[i] / vr[i];
    total += 0.5 * (r - std::log(r) - 1.0);
  }
  return total / static_cast<double>(vf.size());
}

/// Average KL divergence between the pixel-wise Gaussian noise models of L
/// fake samples and of the real noisy image, both relative to the clean x.
inline double akld(const NoisySampler& sampler, const Tensor<float>& x_real, const Tensor<float>& y_real,
                   const AkldSettings& s, Rng& rng) {
  if (s.samples < 1) throw ParameterError("akld: L must be >= 1");
  require_same_shape("akld", x_real.shape(), y_real.shape());
  const Tensor<double> vr = variance_map(y_real, x_real, s.filter, s.floor);
  double total = 0.0;
  for (std::size_t j = 0; j < s.samples; ++j) {
    const Tensor<float> fake = sampler(x_real, rng);
    total += gaussian_kl_mean(variance_map(fake, x_real, s.filter, s.floor), vr);
  }
  return total / static_cast<double>(s.samples);
}

/// AKLD averaged over every record of `set`.
inline double akld(const NoisySampler& sampler, const ImagePairSet& set, const AkldSettings& s, Rng& rng) {
  if (set.empty()) throw ParameterError("akld: empty pair set");
  double total = 0.0;
  for (const auto& r : set.records) total += akld(sampler, r.clean, r.noisy, s, rng);
  return total / static_cast<double>(set.size());
}

/// Mean PSNR of the clamped R(noisy) against clean (per-image PSNR averaged).
inline double denoised_psnr(const NetworkParams<float>& r, const ImagePairSet& set) {
  if (set.empty()) throw ParameterError("denoised_psnr: empty pair set");
  double total = 0.0;
  for (const auto& rec : set.records) total += psnr(denoise(r, rec.noisy), rec.clean);
  return total / static_cast<double>(set.size());
}

/// Mean PSNR of the noisy members against clean.
inline double noisy_psnr(const ImagePairSet& set) {
  if (set.empty()) throw ParameterError("noisy_psnr: empty pair set");
  double total = 0.0;
  for (const auto& rec : set.records) total += psnr(rec.noisy, rec.clean);
  return total / static_cast<double>(set.size());
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::size_t samples = 0;
  nlohmann::json config;  // fingerprint of every setting the value depends on
  std::string dataset;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    if (config.is_null() || config.empty())
      throw ContractError("metric report '" + metric + "' has no configuration fingerprint");
    return {{"metric", metric}, {"value", value}, {"samples", samples},
            {"config", config}, {"dataset", dataset}, {"seed", seed}};
  }

  static std::string csv_header() { return "metric,value,samples,dataset,seed,config"; }

  std::string csv_row() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", value);
    std::string cfg = to_json()["config"].dump();
    std::string quoted = "\"";
    for (char ch : cfg) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    quoted += "\"";
    return metric + "," + buf + "," + std::to_string(samples) + "," + dataset + "," +
           std::to_string(seed) + "," + quoted;
  }
};

} // namespace danet
