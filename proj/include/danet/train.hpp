// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "danet/data.hpp"
#include "danet/errors.hpp"
#include "danet/losses.hpp"
#include "danet/metrics.hpp"
#include "danet/nn.hpp"
#include "danet/optim.hpp"
#include "danet/rng.hpp"

namespace danet {

enum class Mode { danet, base_d, base_g, plus_retrain };

inline std::string to_string(Mode m) {
  switch (m) {
  case Mode::danet: return "DANet";
  case Mode::base_d: return "BaseD";
  case Mode::base_g: return "BaseG";
  case Mode::plus_retrain: return "PlusRetrain";
  }
  return "?";
}

inline Mode mode_from_string(std::string_view s) {
  if (s == "DANet") return Mode::danet;
  if (s == "BaseD") return Mode::base_d;
  if (s == "BaseG") return Mode::base_g;
  if (s == "PlusRetrain") return Mode::plus_retrain;
  throw ParameterError("unknown mode '" + std::string(s) + "' (DANet, BaseD, BaseG, PlusRetrain)");
}

struct TrainConfig {
  double alpha = 0.5;
  double tau1 = 1000.0;
  double tau2 = 10.0;
  std::size_t n_critic = 3;
  double gp_lambda = 10.0;
  double lr_r = 1e-4, lr_g = 1e-4, lr_d = 2e-4;
  AdamSettings adam_r{0.9, 0.999, 1e-8};
  AdamSettings adam_g{0.5, 0.9, 1e-8};
  AdamSettings adam_d{0.5, 0.9, 1e-8};
  std::size_t epochs = 10;
  std::size_t batch = 16;
  std::size_t patch = 32;
  std::size_t patches_per_epoch = 200;  // R/G patches; K = ceil(patches / batch) outer iterations
  std::size_t lr_period = 10;
  Mode mode = Mode::danet;
  bool augment = true;                  // 8-fold flips/rotations of training crops

  UNetConfig unet_r{3, 32, 3, 3, 0.2};  // in = out = image channels
  UNetConfig unet_g{3, 32, 4, 3, 0.2};  // in = image + latent channels
  std::size_t latent_channels = 1;
  DiscConfig disc{3, 32, {32, 64, 128, 256, 512}, 0.2};
  FilterSpec noise_filter{11, 3.0};     // filter of the generator's noise-statistics term

  // Per-epoch validation.
  std::size_t eval_akld_samples = 4;
  std::size_t pgap_epochs = 10;  // L1 epochs per denoiser in PGap
  AkldSettings akld{};

  // DANet+ retraining (L1 only) on real pairs plus generator pairs.
  double plus_ratio = 1.0;
  std::size_t plus_epochs = 10;

  std::size_t image_channels() const { return unet_r.in_channels; }

  /// Channel counts and patch size made consistent with `image_channels`.
  void set_image_channels(std::size_t c) {
    unet_r.in_channels = unet_r.out_channels = c;
    unet_g.out_channels = c;
    unet_g.in_channels = c + latent_channels;
    disc.image_channels = c;
    disc.patch_size = patch;
  }

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw ParameterError("train.alpha must lie in [0,1]");
    if (!(tau1 >= 0) || !(tau2 >= 0)) throw ParameterError("train.tau1 and train.tau2 must be >= 0");
    if (!(gp_lambda >= 0)) throw ParameterError("train.gp_lambda must be >= 0");
    if (n_critic < 1) throw ParameterError("train.n_critic must be >= 1");
    if (!(lr_r > 0 && lr_g > 0 && lr_d > 0)) throw ParameterError("learning rates must be > 0");
    if (batch < 1 || patches_per_epoch < 1) throw ParameterError("train.batch and patches_per_epoch must be >= 1");
    if (lr_period < 1) throw ParameterError("train.lr_period must be >= 1");
    if (latent_channels < 1) throw ParameterError("train.latent_channels must be >= 1");
    if (unet_g.in_channels != unet_g.out_channels + latent_channels)
      throw ParameterError("generator input channels must equal image plus latent channels");
    if (disc.patch_size != patch) throw ParameterError("discriminator patch size must equal train.patch");
    if (!(plus_ratio >= 0)) throw ParameterError("train.plus_ratio must be >= 0");
  }

  std::size_t outer_iterations() const { return (patches_per_epoch + batch - 1) / batch; }

  /// Effective weight on the denoiser fake family.
  double effective_alpha() const {
    if (mode == Mode::base_d) return 1.0;
    if (mode == Mode::base_g) return 0.0;
    return alpha;
  }
  bool trains_r() const { return mode != Mode::base_g; }
  bool trains_g() const { return mode != Mode::base_d; }
};

/// Counters and current state of a run.
struct TrainState {
  long epoch = 0;
  long outer_iterations = 0;
  long d_updates = 0, r_updates = 0, g_updates = 0;
  double lr_r = 0, lr_g = 0, lr_d = 0;
};

struct EpochLog {
  long epoch = 0;  // 1-based
  double lr_r = 0, lr_g = 0, lr_d = 0;
  double loss_d = 0;
  std::optional<double> loss_r, loss_g;
  double gp = 0;
  std::optional<double> psnr_val, akld_val;
};

struct TrainResult {
  NetworkParams<float> r, g, d;
  std::optional<NetworkParams<float>> r_plus;
  TrainState state;
  std::vector<EpochLog> log;
};

inline const char* kTrainCsvHeader = "epoch,lr_R,lr_G,lr_D,loss_D,loss_R,loss_G,gp,psnr_val,akld_val";

inline std::string csv_row(const EpochLog& e) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  return std::to_string(e.epoch) + "," + num(e.lr_r) + "," + num(e.lr_g) + "," + num(e.lr_d) + "," +
         num(e.loss_d) + "," + opt(e.loss_r) + "," + opt(e.loss_g) + "," + num(e.gp) + "," +
         opt(e.psnr_val) + "," + opt(e.akld_val);
}

/// Output locations; empty paths disable the corresponding artifact.
struct TrainOutputs {
  std::filesystem::path csv;
  std::filesystem::path checkpoint_dir;
  /// Called after each epoch with the epoch's log row and current networks.
  std::function<void(const EpochLog&, const TrainResult&)> on_epoch;
};

namespace detail {
inline void require_finite(const char* term, long step, double v) {
  if (!std::isfinite(v)) throw TrainingAborted(term, step, v);
}

inline Tensor<float> latent(const Shape& image, std::size_t channels, Rng& rng) {
  return sample_normal<float>(Shape{image.n, channels, image.h, image.w}, 0.0, 1.0, rng);
}

inline std::vector<Tensor<float>> gradients_of(const Gradients<float>& g, const Bound<float>& b) {
  std::vector<Tensor<float>> out;
  out.reserve(b.vars.size());
  for (const auto& v : b.vars) out.push_back(g.has(v) ? g.get(v) : Tensor<float>(v.shape()));
  return out;
}

inline void save_networks(const TrainResult& res, const TrainConfig& cfg,
                          const std::filesystem::path& dir, long epoch) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  char tag[32];
  std::snprintf(tag, sizeof tag, "epoch%03ld", epoch);
  if (cfg.trains_r()) save_checkpoint(dir / (std::string("R_") + tag + ".dnck"), res.r);
  if (cfg.trains_g()) save_checkpoint(dir / (std::string("G_") + tag + ".dnck"), res.g);
  save_checkpoint(dir / (std::string("D_") + tag + ".dnck"), res.d);
}
} // namespace detail

/// Fresh networks initialized from the run seed.
inline TrainResult init_networks(const TrainConfig& cfg, std::uint64_t seed) {
  TrainResult res;
  res.r = make_denoiser<float>(cfg.unet_r);
  res.g = make_generator<float>(cfg.unet_g);
  res.d = make_discriminator<float>(cfg.disc);
  Rng ri = Rng::stream(seed, "init-R"), gi = Rng::stream(seed, "init-G"), di = Rng::stream(seed, "init-D");
  init_weights(res.r, ri);
  init_weights(res.g, gi);
  init_weights(res.d, di);
  return res;
}

/// One critic update. Returns (loss_D, weighted penalty).
inline std::pair<double, double> critic_step(TrainResult& res, const TrainConfig& cfg, const PatchBatch& b,
                                             double lr, Rng& latent_rng, Rng& gp_rng, long step) {
  const double alpha = cfg.effective_alpha();
  Tape<float> tape;
  const Bound<float> d = bind(tape, res.d, true);
  const Tensor<float> real_pair = make_pair(b.clean, b.noisy);
  LossComponents<float> c;
  const Var<float> d_real = critic_score(d, tape.constant(real_pair));

  std::optional<Tensor<float>> fake_r, fake_g;
  std::optional<Var<float>> s_r, s_g;
  if (cfg.trains_r()) {
    fake_r = make_pair(run_denoiser(res.r, b.noisy), b.noisy);
    s_r = critic_score(d, tape.constant(*fake_r));
  }
  if (cfg.trains_g()) {
    const Tensor<float> z = detail::latent(b.clean.shape(), cfg.latent_channels, latent_rng);
    fake_g = make_pair(b.clean, run_generator(res.g, b.clean, z));
    s_g = critic_score(d, tape.constant(*fake_g));
  }
  if (s_r && s_g) c.gan = adversarial_loss(d_real, *s_r, *s_g, static_cast<float>(alpha));
  else c.gan = adversarial_loss(d_real, s_r ? *s_r : *s_g, 1.0f);

  const auto lambda = static_cast<float>(cfg.gp_lambda);
  if (fake_r) c.gp_r = gradient_penalty(d, real_pair, *fake_r, lambda, gp_rng);
  if (fake_g) c.gp_g = gradient_penalty(d, real_pair, *fake_g, lambda, gp_rng);

  LossWeights w{alpha, cfg.tau1, cfg.tau2};
  if (!fake_r || !fake_g) w.alpha = fake_r ? 1.0 : 0.0;
  const TotalLoss<float> tl = total_loss(c, w);
  detail::require_finite("L_gan", step, c.gan->value().item());
  if (c.gp_r) detail::require_finite("gp_R", step, c.gp_r->value);
  if (c.gp_g) detail::require_finite("gp_G", step, c.gp_g->value);
  const auto grads = detail::gradients_of(backward(*tl.d), d);
  adam_step(res.d, std::span<const Tensor<float>>(grads), lr, cfg.adam_d);
  return {tl.d_value, tl.gp_value};
}

/// One simultaneous R and G update with the critic fixed. Returns the
/// reported (loss_R, loss_G); an absent network yields nullopt.
inline std::pair<std::optional<double>, std::optional<double>>
denoiser_generator_step(TrainResult& res, const TrainConfig& cfg, const PatchBatch& b, double lr_r,
                        double lr_g, Rng& latent_rng, long step) {
  const double alpha = cfg.effective_alpha();
  Tape<float> tape;
  const Bound<float> d = bind(tape, res.d, false);
  const Var<float> x = tape.constant(b.clean);
  const Var<float> y = tape.constant(b.noisy);
  LossComponents<float> c;
  std::optional<Bound<float>> r, g;
  if (cfg.trains_r()) {
    r = bind(tape, res.r, true);
    const Var<float> x_hat = denoiser_forward(*r, y);
    c.adv_r = mean(critic_score(d, concat_channels<float>({x_hat, y})));
    c.l1 = denoiser_l1(x_hat, x);
    detail::require_finite("adv_R", step, c.adv_r->value().item());
    detail::require_finite("L1", step, c.l1->value().item());
  }
  if (cfg.trains_g()) {
    g = bind(tape, res.g, true);
    const Var<float> z = tape.constant(detail::latent(b.clean.shape(), cfg.latent_channels, latent_rng));
    const Var<float> y_hat = generator_forward(*g, x, z);
    c.adv_g = mean(critic_score(d, concat_channels<float>({x, y_hat})));
    c.noise_stat = noise_stat_loss(y_hat, y, x, cfg.noise_filter);
    detail::require_finite("adv_G", step, c.adv_g->value().item());
    detail::require_finite("noise_stat", step, c.noise_stat->value().item());
  }
  const TotalLoss<float> tl = total_loss(c, LossWeights{alpha, cfg.tau1, cfg.tau2});
  // R's loss does not depend on G's parameters and vice versa, so one sweep
  // over the sum yields both gradients.
  const Var<float> joint = tl.r && tl.g ? add(*tl.r, *tl.g) : (tl.r ? *tl.r : *tl.g);
  const Gradients<float> grads = backward(joint);
  std::pair<std::optional<double>, std::optional<double>> out;
  if (r) {
    const auto gr = detail::gradients_of(grads, *r);
    adam_step(res.r, std::span<const Tensor<float>>(gr), lr_r, cfg.adam_r);
    out.first = tl.r_value;
  }
  if (g) {
    const auto gg = detail::gradients_of(grads, *g);
    adam_step(res.g, std::span<const Tensor<float>>(gg), lr_g, cfg.adam_g);
    out.second = tl.g_value;
  }
  return out;
}

/// Validation metrics for one epoch.
inline void evaluate_epoch(EpochLog& e, const TrainResult& res, const TrainConfig& cfg,
                           const ImagePairSet& validation, std::uint64_t seed) {
  if (validation.empty()) return;
  if (cfg.trains_r()) e.psnr_val = denoised_psnr(res.r, validation);
  if (cfg.trains_g()) {
    AkldSettings s = cfg.akld;
    s.samples = cfg.eval_akld_samples;
    Rng rng = Rng::stream(seed, "eval-akld", static_cast<std::uint64_t>(e.epoch));
    e.akld_val = akld(generator_sampler(res.g), validation, s, rng);
  }
}

inline NetworkParams<float> train_denoiser_l1(const ImagePairSet& set, const TrainConfig& cfg,
                                              std::uint64_t seed, std::size_t epochs);

inline NetworkParams<float> retrain_plus(const NoisySampler& g, const std::vector<Tensor<float>>& pool,
                                         const ImagePairSet& data, const TrainConfig& cfg, std::uint64_t seed);

/// Alternating dual adversarial training: per outer iteration, n_critic
/// critic updates on fresh batches, then one R and one G update sharing a
/// fresh batch. In PlusRetrain mode the trained generator then feeds an L1
/// retraining of a fresh denoiser (result in `r_plus`).
inline TrainResult train(const TrainConfig& cfg, const ImagePairSet& data, const ImagePairSet& validation,
                         std::uint64_t seed, const TrainOutputs& out = {},
                         const std::vector<Tensor<float>>& clean_pool = {}) {
  cfg.validate();
  if (data.empty()) throw ParameterError("train: empty training set");
  if (data.channels() != cfg.image_channels())
    throw ShapeError("train: data has " + std::to_string(data.channels()) + " channels, config expects " +
                     std::to_string(cfg.image_channels()));
  if (cfg.mode == Mode::plus_retrain && clean_pool.empty())
    throw ParameterError("PlusRetrain mode needs a non-empty clean pool");

  TrainResult res = init_networks(cfg, seed);
  std::ofstream csv;
  if (!out.csv.empty()) {
    if (out.csv.has_parent_path()) std::filesystem::create_directories(out.csv.parent_path());
    csv.open(out.csv, std::ios::binary);
    if (!csv) throw IoError("cannot write " + out.csv.string());
    csv << kTrainCsvHeader << '\n';
  }

  const long K = static_cast<long>(cfg.outer_iterations());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    TrainState& st = res.state;
    st.epoch = static_cast<long>(epoch);
    st.lr_r = lr_schedule(st.epoch, cfg.lr_r, static_cast<long>(cfg.lr_period));
    st.lr_g = lr_schedule(st.epoch, cfg.lr_g, static_cast<long>(cfg.lr_period));
    st.lr_d = lr_schedule(st.epoch, cfg.lr_d, static_cast<long>(cfg.lr_period));
    PatchSampler sampler = PatchSampler::for_epoch(data, seed, epoch, cfg.augment);
    Rng latent_rng = Rng::stream(seed, "latent", epoch);
    Rng gp_rng = Rng::stream(seed, "gp", epoch);

    double sum_d = 0, sum_gp = 0, sum_r = 0, sum_g = 0;
    for (long k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < cfg.n_critic; ++j) {
        const PatchBatch b = sampler.next(cfg.batch, cfg.patch);
        const auto [ld, gp] = critic_step(res, cfg, b, st.lr_d, latent_rng, gp_rng, st.d_updates);
        ++st.d_updates;
        sum_d += ld;
        sum_gp += gp;
      }
      const PatchBatch b = sampler.next(cfg.batch, cfg.patch);
      const auto [lr, lg] =
          denoiser_generator_step(res, cfg, b, st.lr_r, st.lr_g, latent_rng, st.outer_iterations);
      if (lr) {
        sum_r += *lr;
        ++st.r_updates;
      }
      if (lg) {
        sum_g += *lg;
        ++st.g_updates;
      }
      ++st.outer_iterations;
    }

    EpochLog e;
    e.epoch = static_cast<long>(epoch) + 1;
    e.lr_r = st.lr_r;
    e.lr_g = st.lr_g;
    e.lr_d = st.lr_d;
    const double critic_steps = static_cast<double>(K) * static_cast<double>(cfg.n_critic);
    e.loss_d = sum_d / critic_steps;
    e.gp = sum_gp / critic_steps;
    if (cfg.trains_r()) e.loss_r = sum_r / static_cast<double>(K);
    if (cfg.trains_g()) e.loss_g = sum_g / static_cast<double>(K);
    evaluate_epoch(e, res, cfg, validation, seed);
    res.log.push_back(e);
    if (csv.is_open()) csv << csv_row(e) << '\n' << std::flush;
    detail::save_networks(res, cfg, out.checkpoint_dir, e.epoch);
    if (out.on_epoch) out.on_epoch(e, res);
  }

  if (cfg.mode == Mode::plus_retrain) {
    res.r_plus = retrain_plus(generator_sampler(res.g), clean_pool, data, cfg, seed);
    if (!out.checkpoint_dir.empty()) save_checkpoint(out.checkpoint_dir / "R_plus.dnck", *res.r_plus);
  }
  return res;
}

/// Plain L1 training of a fresh denoiser (used by PGap and DANet+).
inline NetworkParams<float> train_denoiser_l1(const ImagePairSet& set, const TrainConfig& cfg,
                                              std::uint64_t seed, std::size_t epochs) {
  if (set.empty()) throw ParameterError("train_denoiser_l1: empty training set");
  NetworkParams<float> r = make_denoiser<float>(cfg.unet_r);
  Rng init = Rng::stream(seed, "init-R");
  init_weights(r, init);
  const std::size_t K = cfg.outer_iterations();
  long step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_schedule(static_cast<long>(epoch), cfg.lr_r, static_cast<long>(cfg.lr_period));
    PatchSampler sampler = PatchSampler::for_epoch(set, seed, epoch, cfg.augment);
    for (std::size_t k = 0; k < K; ++k, ++step) {
      const PatchBatch b = sampler.next(cfg.batch, cfg.patch);
      Tape<float> tape;
      const Bound<float> rb = bind(tape, r, true);
      const Var<float> loss = denoiser_l1(denoiser_forward(rb, tape.constant(b.noisy)), tape.constant(b.clean));
      detail::require_finite("L1", step, loss.value().item());
      const auto grads = detail::gradients_of(backward(loss), rb);
      adam_step(r, std::span<const Tensor<float>>(grads), lr, cfg.adam_r);
    }
  }
  return r;
}

/// DANet+: fresh denoiser trained under L1 on the real pairs plus
/// ceil(plus_ratio * |data|) generator pairs built over the clean pool.
inline NetworkParams<float> retrain_plus(const NoisySampler& g, const std::vector<Tensor<float>>& pool,
                                         const ImagePairSet& data, const TrainConfig& cfg, std::uint64_t seed) {
  if (pool.empty()) throw ParameterError("retrain_plus: empty clean pool");
  Rng rng = Rng::stream(seed, "plus-augment");
  const ImagePairSet augmented = augment_with_generator(data, pool, g, cfg.plus_ratio, rng);
  return train_denoiser_l1(augmented, cfg, seed, cfg.plus_epochs);
}

// ---------------------------------------------------------------------------
// PGap.

/// PSNR(R_a on test) - PSNR(R_b on test), both denoisers trained under the
/// same recipe and seed. Swapping a and b negates the value exactly.
inline double pgap_from_sets(const ImagePairSet& a, const ImagePairSet& b, const ImagePairSet& test,
                             const TrainConfig& cfg, std::uint64_t seed, std::size_t epochs) {
  if (a.empty() || b.empty() || test.empty()) throw ParameterError("pgap: empty pair set");
  const NetworkParams<float> ra = train_denoiser_l1(a, cfg, seed, epochs);
  const NetworkParams<float> rb = train_denoiser_l1(b, cfg, seed, epochs);
  return denoised_psnr(ra, test) - denoised_psnr(rb, test);
}

/// Builds {(x_i, G(x_i, z_i))} over the training clean images and compares
/// denoisers trained on the real and on the synthetic set.
inline double pgap(const ImagePairSet& train_set, const ImagePairSet& test, const NoisySampler& g,
                   const TrainConfig& cfg, std::uint64_t seed, std::size_t epochs) {
  Rng rng = Rng::stream(seed, "pgap-synthesis");
  const ImagePairSet synthetic = make_pgap_dataset(train_set.clean_images(), g, rng);
  return pgap_from_sets(train_set, synthetic, test, cfg, seed, epochs);
}

} // namespace danet
