// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "danet/errors.hpp"
#include "danet/image_io.hpp"
#include "danet/nn.hpp"
#include "danet/rng.hpp"
#include "danet/tensor.hpp"

namespace danet {

// ---------------------------------------------------------------------------
// Noise models.

enum class NoiseKind { gaussian, signal_dependent, stripe_mixture };

inline std::string to_string(NoiseKind k) {
  switch (k) {
  case NoiseKind::gaussian: return "gaussian";
  case NoiseKind::signal_dependent: return "signal_dependent";
  case NoiseKind::stripe_mixture: return "stripe_mixture";
  }
  return "?";
}

/// Additive noise on [0,1] intensities.
///   gaussian:         n ~ N(0, sigma^2)
///   signal_dependent: n ~ N(0, sigma1^2 * x + sigma2^2)
///   stripe_mixture:   vertical stripes of `stripe_width` columns alternating
///                     between uniform noise of std `sigma` and `sigma_b`
struct NoiseModel {
  NoiseKind kind = NoiseKind::gaussian;
  double sigma = 0.1;
  double sigma1 = 0.0;
  double sigma2 = 0.0;
  double sigma_b = 0.0;
  std::size_t stripe_width = 8;
  bool clip = false;

  static NoiseModel gaussian(double s) {
    NoiseModel m;
    m.sigma = s;
    return m;
  }
  static NoiseModel signal_dependent(double s1, double s2) {
    NoiseModel m;
    m.kind = NoiseKind::signal_dependent;
    m.sigma1 = s1;
    m.sigma2 = s2;
    return m;
  }

  void validate() const {
    if (sigma < 0 || sigma1 < 0 || sigma2 < 0 || sigma_b < 0 || !std::isfinite(sigma) ||
        !std::isfinite(sigma1) || !std::isfinite(sigma2) || !std::isfinite(sigma_b))
      throw ParameterError("noise model parameters must be finite and >= 0");
    if (kind == NoiseKind::stripe_mixture && stripe_width == 0)
      throw ParameterError("stripe_mixture needs stripe_width >= 1");
  }

  /// Noise variance at clean intensity x in column `col`.
  double variance(double x, std::size_t col) const {
    switch (kind) {
    case NoiseKind::gaussian: return sigma * sigma;
    case NoiseKind::signal_dependent: return sigma1 * sigma1 * std::max(x, 0.0) + sigma2 * sigma2;
    case NoiseKind::stripe_mixture: {
      const double s = (col / stripe_width) % 2 == 0 ? sigma : sigma_b;
      return s * s;
    }
    }
    return 0.0;
  }

  /// Same model with every variance multiplied by `factor`.
  NoiseModel variance_scaled(double factor) const {
    NoiseModel m = *this;
    const double f = std::sqrt(factor);
    m.sigma *= f;
    m.sigma1 *= f;
    m.sigma2 *= f;
    m.sigma_b *= f;
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}, {"clip", clip}};
    switch (kind) {
    case NoiseKind::gaussian: j["sigma"] = sigma; break;
    case NoiseKind::signal_dependent:
      j["sigma1"] = sigma1;
      j["sigma2"] = sigma2;
      break;
    case NoiseKind::stripe_mixture:
      j["sigma"] = sigma;
      j["sigma_b"] = sigma_b;
      j["stripe_width"] = stripe_width;
      break;
    }
    return j;
  }

  static NoiseModel from_json(const nlohmann::json& j) {
    NoiseModel m;
    const std::string kind = j.value("kind", "gaussian");
    if (kind == "gaussian") m.kind = NoiseKind::gaussian;
    else if (kind == "signal_dependent") m.kind = NoiseKind::signal_dependent;
    else if (kind == "stripe_mixture") m.kind = NoiseKind::stripe_mixture;
    else throw ParameterError("unknown noise kind '" + kind + "'");
    m.sigma = j.value("sigma", m.kind == NoiseKind::gaussian ? 0.1 : 0.0);
    m.sigma1 = j.value("sigma1", 0.0);
    m.sigma2 = j.value("sigma2", 0.0);
    m.sigma_b = j.value("sigma_b", 0.0);
    m.stripe_width = j.value("stripe_width", std::size_t{8});
    m.clip = j.value("clip", false);
    m.validate();
    return m;
  }
};

/// y = x + n under `model`; clipped to [0,1] only when model.clip is set.
template <class T>
Tensor<T> synth_noisy(const Tensor<T>& x, const NoiseModel& model, Rng& rng) {
  model.validate();
  const Shape s = x.shape();
  Tensor<T> y(s);
  const double root3 = std::sqrt(3.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const double xv = x.at(n, c, h, w);
          const double sd = std::sqrt(model.variance(xv, w));
          const double noise = model.kind == NoiseKind::stripe_mixture
                                   ? rng.uniform(-root3 * sd, root3 * sd)
                                   : (sd > 0 ? rng.normal(0.0, sd) : 0.0);
          double v = xv + noise;
          if (model.clip) v = std::clamp(v, 0.0, 1.0);
          y.at(n, c, h, w) = static_cast<T>(v);
        }
  return y;
}

// ---------------------------------------------------------------------------
// Procedural clean images: smooth gradients, flat shapes with sharp edges
// and a low-amplitude oriented texture, all in [0,1].

inline Tensor<float> procedural_image(std::size_t size, std::size_t channels, Rng& rng) {
  Tensor<float> img(Shape{1, channels, size, size});
  std::vector<double> base(channels), gx(channels), gy(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    base[c] = rng.uniform(0.2, 0.8);
    gx[c] = rng.uniform(-0.3, 0.3);
    gy[c] = rng.uniform(-0.3, 0.3);
  }
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        img.at(0, c, y, x) = static_cast<float>(base[c] + gx[c] * (x * inv - 0.5) + gy[c] * (y * inv - 0.5));

  const std::size_t shapes = 3 + rng.index(4);
  for (std::size_t k = 0; k < shapes; ++k) {
    const bool disc = rng.uniform() < 0.5;
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    const double rx = rng.uniform(0.08, 0.3) * size, ry = rng.uniform(0.08, 0.3) * size;
    std::vector<double> color(channels);
    for (auto& v : color) v = rng.uniform(0.05, 0.95);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < channels; ++c) img.at(0, c, y, x) = static_cast<float>(color[c]);
      }
  }

  const double freq = rng.uniform(0.1, 0.5), angle = rng.uniform(0, std::numbers::pi);
  const double amp = rng.uniform(0.0, 0.08);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double t = amp * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)));
      for (std::size_t c = 0; c < channels; ++c) {
        float& v = img.at(0, c, y, x);
        v = static_cast<float>(std::clamp(v + t, 0.0, 1.0));
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// Pair sets.

struct PairRecord {
  std::string id;
  Tensor<float> clean;  // (1,C,H,W)
  Tensor<float> noisy;
  bool synthetic = false;
};

struct ImagePairSet {
  std::vector<PairRecord> records;
  bool clipped = false;  // whether noisy members were clipped to [0,1]

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::size_t channels() const { return records.empty() ? 0 : records.front().clean.shape().c; }
  std::size_t synthetic_count() const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                  [](const PairRecord& r) { return r.synthetic; }));
  }

  void add(PairRecord r) {
    if (r.clean.shape() != r.noisy.shape())
      throw shape_mismatch("pair record '" + r.id + "'", r.clean.shape(), r.noisy.shape());
    if (r.clean.shape().n != 1)
      throw ShapeError("pair record '" + r.id + "' must hold a single image, got " + r.clean.shape().str());
    if (!records.empty() && r.clean.shape().c != channels())
      throw ShapeError("pair record '" + r.id + "' has " + std::to_string(r.clean.shape().c) +
                       " channels, set has " + std::to_string(channels()));
    records.push_back(std::move(r));
  }

  std::vector<Tensor<float>> clean_images() const {
    std::vector<Tensor<float>> out;
    for (const auto& r : records) out.push_back(r.clean);
    return out;
  }
};

/// Synthesizes a set from clean images with one noise draw per image.
inline ImagePairSet make_synthetic_set(const std::vector<Tensor<float>>& clean, const NoiseModel& model,
                                       Rng& rng, const std::string& prefix = "img") {
  ImagePairSet set;
  set.clipped = model.clip;
  for (std::size_t i = 0; i < clean.size(); ++i)
    set.add({prefix + std::to_string(i), clean[i], synth_noisy(clean[i], model, rng), false});
  return set;
}

inline std::vector<Tensor<float>> procedural_images(std::size_t count, std::size_t size,
                                                    std::size_t channels, Rng& rng) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(procedural_image(size, channels, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Patch sampling.

struct PatchBatch {
  Tensor<float> clean;  // (count,C,size,size)
  Tensor<float> noisy;
};

namespace detail {
/// Applies one of the 8 dihedral transforms to a square patch.
inline void dihedral_copy(const Tensor<float>& src, std::size_t sc, std::size_t top, std::size_t left,
                          std::size_t size, Tensor<float>& dst, std::size_t n, unsigned transform) {
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t u = x, v = y;
      if (transform & 1u) u = size - 1 - u;        // horizontal flip
      if (transform & 2u) v = size - 1 - v;        // vertical flip
      if (transform & 4u) std::swap(u, v);         // transpose
      dst.at(n, sc, y, x) = src.at(0, sc, top + v, left + u);
    }
}
} // namespace detail

/// Draws aligned random crops. When the set mixes real and synthetic records,
/// each stratum is drawn in proportion to its record count; `carry` keeps the
/// rounding remainder across calls so the proportion holds over an epoch.
class PatchSampler {
public:
  PatchSampler(const ImagePairSet& set, Rng rng, bool augment = false)
      : set_(&set), rng_(std::move(rng)), augment_(augment) {
    if (set.empty()) throw ParameterError("patch sampler: empty pair set");
    for (std::size_t i = 0; i < set.size(); ++i)
      (set.records[i].synthetic ? synthetic_ : real_).push_back(i);
  }

  /// Sampler whose stream is a pure function of (seed, epoch).
  static PatchSampler for_epoch(const ImagePairSet& set, std::uint64_t seed, std::uint64_t epoch,
                                bool augment = false) {
    return PatchSampler(set, Rng::stream(seed, "patches", epoch), augment);
  }

  PatchBatch next(std::size_t count, std::size_t size) {
    if (count == 0 || size == 0) throw ParameterError("patch sampler: count and size must be >= 1");
    const std::size_t channels = set_->channels();
    PatchBatch b{Tensor<float>(Shape{count, channels, size, size}),
                 Tensor<float>(Shape{count, channels, size, size})};

    // Stratum per slot.
    std::vector<bool> synthetic(count, false);
    if (!synthetic_.empty() && !real_.empty()) {
      const double p = static_cast<double>(synthetic_.size()) / static_cast<double>(set_->size());
      carry_ += p * static_cast<double>(count);
      const auto k = static_cast<std::size_t>(std::floor(carry_ + 1e-9));
      carry_ -= static_cast<double>(k);
      for (std::size_t i = 0; i < std::min(k, count); ++i) synthetic[i] = true;
      std::shuffle(synthetic.begin(), synthetic.end(), rng_.engine());
    } else if (real_.empty()) {
      std::fill(synthetic.begin(), synthetic.end(), true);
    }

    for (std::size_t n = 0; n < count; ++n) {
      const auto& pool = synthetic[n] ? synthetic_ : real_;
      const PairRecord& r = set_->records[pool[rng_.index(pool.size())]];
      const Shape s = r.clean.shape();
      if (s.h < size || s.w < size)
        throw ShapeError("record '" + r.id + "' (" + s.str() + ") is smaller than patch size " +
                         std::to_string(size));
      const std::size_t top = rng_.index(s.h - size + 1);
      const std::size_t left = rng_.index(s.w - size + 1);
      const unsigned t = augment_ ? static_cast<unsigned>(rng_.index(8)) : 0u;
      for (std::size_t c = 0; c < channels; ++c) {
        detail::dihedral_copy(r.clean, c, top, left, size, b.clean, n, t);
        detail::dihedral_copy(r.noisy, c, top, left, size, b.noisy, n, t);
      }
      if (synthetic[n]) ++drawn_synthetic_;
      else ++drawn_real_;
    }
    return b;
  }

  std::size_t drawn_real() const { return drawn_real_; }
  std::size_t drawn_synthetic() const { return drawn_synthetic_; }

private:
  const ImagePairSet* set_;
  Rng rng_;
  bool augment_;
  std::vector<std::size_t> real_, synthetic_;
  double carry_ = 0.0;
  std::size_t drawn_real_ = 0, drawn_synthetic_ = 0;
};

inline PatchBatch sample_patches(const ImagePairSet& set, std::size_t count, std::size_t size, Rng& rng,
                                 bool augment = false) {
  PatchSampler s(set, rng.fork("patches"), augment);
  return s.next(count, size);
}

// ---------------------------------------------------------------------------
// Generator-built sets.

/// Maps a clean (1,C,H,W) image to a noisy sample.
using NoisySampler = std::function<Tensor<float>(const Tensor<float>& clean, Rng& rng)>;

inline NoisySampler oracle_sampler(NoiseModel model) {
  model.validate();
  return [model](const Tensor<float>& x, Rng& rng) { return synth_noisy(x, model, rng); };
}

/// G(x, z) with z ~ N(0, I).
inline NoisySampler generator_sampler(NetworkParams<float> g) {
  if (g.role != Role::generator)
    throw ContractError("expected a generator network, got " + to_string(g.role));
  return [g = std::move(g)](const Tensor<float>& x, Rng& rng) {
    const Shape s = x.shape();
    const Tensor<float> z = sample_normal<float>(Shape{s.n, latent_channels(g), s.h, s.w}, 0.0, 1.0, rng);
    return run_generator(g, x, z);
  };
}

/// {(x_i, G(x_i, z_i))}, one draw per clean image.
inline ImagePairSet make_pgap_dataset(const std::vector<Tensor<float>>& clean, const NoisySampler& g,
                                      Rng& rng) {
  ImagePairSet out;
  for (std::size_t i = 0; i < clean.size(); ++i)
    out.add({"gen" + std::to_string(i), clean[i], g(clean[i], rng), true});
  return out;
}

/// Real set plus ceil(ratio * |real|) synthetic pairs drawn cyclically over
/// the clean pool.
inline ImagePairSet augment_with_generator(const ImagePairSet& real, const std::vector<Tensor<float>>& pool,
                                           const NoisySampler& g, double ratio, Rng& rng) {
  if (!(ratio >= 0) || !std::isfinite(ratio)) throw ParameterError("augmentation ratio must be >= 0");
  ImagePairSet out = real;
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(real.size()) - 1e-9));
  if (count == 0) return out;
  if (pool.empty()) throw ParameterError("augmentation needs a non-empty clean pool");
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor<float>& x = pool[i % pool.size()];
    out.add({"syn" + std::to_string(i), x, g(x, rng), true});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON):
// {
//   "train": [ entry... ], "validation": [...], "test": [...], "clean_pool": [...],
//   "noise": { NoiseModel }          // default model for entries without one
// }
// entry: {"clean": "a.png", "noisy": "a_n.png"}
//      | {"clean": "a.png", "noise": {...}}
//      | {"procedural": {"count": 8, "size": 64, "channels": 3}, "noise": {...}}
// clean_pool entries: {"clean": path} or {"procedural": {...}}.
// Relative paths resolve against the manifest's directory.

struct Dataset {
  ImagePairSet train, validation, test;
  std::vector<Tensor<float>> clean_pool;
  std::optional<NoiseModel> noise;  // default synthetic model, if any
};

namespace detail {
inline std::vector<Tensor<float>> procedural_from_json(const nlohmann::json& p, Rng& rng) {
  return procedural_images(p.value("count", std::size_t{1}), p.value("size", std::size_t{64}),
                           p.value("channels", std::size_t{3}), rng);
}

inline ImagePairSet load_split(const nlohmann::json& entries, const std::filesystem::path& dir,
                               const std::optional<NoiseModel>& fallback, std::uint64_t seed,
                               const std::string& split) {
  ImagePairSet set;
  if (!entries.is_array()) throw ParameterError("manifest split '" + split + "' must be an array");
  Rng rng = Rng::stream(seed, "manifest:" + split);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    std::optional<NoiseModel> model = fallback;
    if (e.contains("noise")) model = NoiseModel::from_json(e["noise"]);
    std::vector<Tensor<float>> clean;
    std::string id = split + std::to_string(i);
    if (e.contains("procedural")) {
      clean = procedural_from_json(e["procedural"], rng);
    } else if (e.contains("clean")) {
      const auto path = dir / e["clean"].get<std::string>();
      clean.push_back(load_image(path));
      id = e["clean"].get<std::string>();
    } else {
      throw ParameterError("manifest entry " + split + "[" + std::to_string(i) +
                           "] needs 'clean' or 'procedural'");
    }
    for (std::size_t k = 0; k < clean.size(); ++k) {
      const std::string rid = clean.size() > 1 ? id + "." + std::to_string(k) : id;
      if (e.contains("noisy")) {
        set.add({rid, clean[k], load_image(dir / e["noisy"].get<std::string>()), false});
      } else if (model) {
        set.clipped = set.clipped || model->clip;
        set.add({rid, clean[k], synth_noisy(clean[k], *model, rng), false});
      } else {
        throw ParameterError("manifest entry " + split + "[" + std::to_string(i) +
                             "] has neither 'noisy' nor a noise model");
      }
    }
  }
  return set;
}
} // namespace detail

inline Dataset load_manifest(const std::filesystem::path& path, std::uint64_t seed) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
  const auto dir = path.parent_path();
  Dataset d;
  if (j.contains("noise")) d.noise = NoiseModel::from_json(j["noise"]);
  for (const char* split : {"train", "validation", "test"})
    if (j.contains(split)) {
      ImagePairSet s = detail::load_split(j[split], dir, d.noise, seed, split);
      if (std::string(split) == "train") d.train = std::move(s);
      else if (std::string(split) == "validation") d.validation = std::move(s);
      else d.test = std::move(s);
    }
  if (j.contains("clean_pool")) {
    Rng rng = Rng::stream(seed, "manifest:clean_pool");
    for (const auto& e : j["clean_pool"]) {
      if (e.contains("procedural")) {
        for (auto& t : detail::procedural_from_json(e["procedural"], rng)) d.clean_pool.push_back(std::move(t));
      } else {
        d.clean_pool.push_back(load_image(dir / e.at("clean").get<std::string>()));
      }
    }
  }
  return d;
}

} // namespace danet
