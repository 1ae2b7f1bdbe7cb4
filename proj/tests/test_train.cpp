// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "danet/train.hpp"

using namespace danet;
namespace fs = std::filesystem;

namespace {
TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch = 4;
  c.patch = 32;
  c.patches_per_epoch = 12;
  c.unet_r = UNetConfig{1, 4, 1, 1, 0.2};
  c.unet_g = UNetConfig{1, 4, 2, 1, 0.2};
  c.disc = DiscConfig{1, 32, {4, 4, 4, 4, 4}, 0.2};
  c.set_image_channels(1);
  c.eval_akld_samples = 1;
  c.plus_epochs = 1;
  return c;
}

ImagePairSet tiny_set(std::uint64_t seed, std::size_t count = 3) {
  Rng rng(seed);
  return make_synthetic_set(procedural_images(count, 40, 1, rng), NoiseModel::gaussian(0.1), rng);
}

bool same_params(const NetworkParams<float>& a, const NetworkParams<float>& b) {
  if (a.params.size() != b.params.size()) return false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (!(a.params[i].value == b.params[i].value) || !(a.params[i].m == b.params[i].m) ||
        !(a.params[i].v == b.params[i].v))
      return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}
} // namespace

TEST_CASE("configuration validation") {
  TrainConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  CHECK(TrainConfig{}.outer_iterations() == 13);
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = tiny_config();
  c.n_critic = 0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = tiny_config();
  c.tau1 = -1;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = tiny_config();
  c.disc.patch_size = 64;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK(mode_from_string("BaseD") == Mode::base_d);
  CHECK(to_string(Mode::plus_retrain) == "PlusRetrain");
  CHECK_THROWS_AS(mode_from_string("GAN"), ParameterError);
}

TEST_CASE("update counters follow the alternation invariant") {
  const TrainConfig c = tiny_config();
  const auto data = tiny_set(1);
  TrainOutputs out;
  std::vector<long> checked;
  out.on_epoch = [&](const EpochLog& e, const TrainResult& r) {
    CHECK(r.state.d_updates == static_cast<long>(c.n_critic) * r.state.r_updates);
    CHECK(r.state.r_updates == r.state.g_updates);
    checked.push_back(e.epoch);
  };
  const auto res = train(c, data, tiny_set(2, 1), 3, out);
  const long K = static_cast<long>(c.outer_iterations());
  CHECK(K == 3);
  CHECK(res.state.d_updates == 3 * 2 * K);
  CHECK(res.state.r_updates == 2 * K);
  CHECK(res.state.g_updates == 2 * K);
  CHECK(res.d.adam_step == res.state.d_updates);
  CHECK(res.r.adam_step == res.state.r_updates);
  CHECK(checked == std::vector<long>{1, 2});
  REQUIRE(res.log.size() == 2);
  for (const auto& e : res.log) {
    CHECK(std::isfinite(e.loss_d));
    CHECK(e.gp >= 0.0);
    REQUIRE(e.loss_r);
    REQUIRE(e.loss_g);
    CHECK(std::isfinite(*e.loss_r));
    CHECK(std::isfinite(*e.loss_g));
    REQUIRE(e.psnr_val);
    REQUIRE(e.akld_val);
    CHECK(*e.akld_val >= 0.0);
  }
}

TEST_CASE("learning rates halve on the configured period") {
  TrainConfig c = tiny_config();
  c.lr_period = 1;
  c.epochs = 3;
  c.patches_per_epoch = 4;
  const auto res = train(c, tiny_set(1), ImagePairSet{}, 3);
  REQUIRE(res.log.size() == 3);
  CHECK(res.log[0].lr_r == c.lr_r);
  CHECK(res.log[1].lr_d == c.lr_d / 2);
  CHECK(res.log[2].lr_g == c.lr_g / 4);
  CHECK_FALSE(res.log[0].psnr_val);
}

TEST_CASE("same seed gives bitwise identical runs and checkpoints") {
  const TrainConfig c = tiny_config();
  const auto data = tiny_set(4);
  const fs::path root = fs::temp_directory_path() / "danet_test_train";
  fs::remove_all(root);
  TrainOutputs a{root / "a" / "log.csv", root / "a" / "ckpt", {}};
  TrainOutputs b{root / "b" / "log.csv", root / "b" / "ckpt", {}};
  const auto ra = train(c, data, tiny_set(5, 1), 11, a);
  const auto rb = train(c, data, tiny_set(5, 1), 11, b);
  CHECK(same_params(ra.r, rb.r));
  CHECK(same_params(ra.g, rb.g));
  CHECK(same_params(ra.d, rb.d));
  for (const char* f : {"R_epoch002.dnck", "G_epoch002.dnck", "D_epoch001.dnck"}) {
    INFO(f);
    REQUIRE(fs::exists(root / "a" / "ckpt" / f));
    CHECK(slurp(root / "a" / "ckpt" / f) == slurp(root / "b" / "ckpt" / f));
  }
  const std::string csv = slurp(root / "a" / "log.csv");
  CHECK(csv == slurp(root / "b" / "log.csv"));
  CHECK(csv.rfind(std::string(kTrainCsvHeader) + "\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  const auto rc = train(c, data, ImagePairSet{}, 12);
  CHECK_FALSE(same_params(ra.r, rc.r));
}

TEST_CASE("ablation modes drop the absent network") {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  const auto data = tiny_set(6);
  const auto init = init_networks(c, 9);

  c.mode = Mode::base_d;
  CHECK(c.effective_alpha() == 1.0);
  const auto bd = train(c, data, tiny_set(7, 1), 9);
  CHECK_FALSE(bd.log[0].loss_g);
  CHECK_FALSE(bd.log[0].akld_val);
  CHECK(bd.log[0].loss_r);
  CHECK(bd.state.g_updates == 0);
  CHECK(same_params(bd.g, init.g));
  CHECK_FALSE(same_params(bd.r, init.r));
  CHECK(csv_row(bd.log[0]).find(",,") != std::string::npos);

  c.mode = Mode::base_g;
  CHECK(c.effective_alpha() == 0.0);
  const auto bg = train(c, data, tiny_set(7, 1), 9);
  CHECK_FALSE(bg.log[0].loss_r);
  CHECK_FALSE(bg.log[0].psnr_val);
  CHECK(bg.log[0].akld_val);
  CHECK(bg.state.r_updates == 0);
  CHECK(bg.state.d_updates == 3 * bg.state.g_updates);
  CHECK(same_params(bg.r, init.r));
}

TEST_CASE("non-finite losses abort with the offending term") {
  const TrainConfig c = tiny_config();
  auto data = tiny_set(8);
  // A NaN band wide enough that every 32x32 crop of a 40x40 image hits it.
  for (auto& r : data.records)
    for (std::size_t y = 0; y < 40; ++y)
      for (std::size_t x = 8; x < 32; ++x) r.noisy.at(0, 0, y, x) = std::numeric_limits<float>::quiet_NaN();
  try {
    train(c, data, ImagePairSet{}, 1);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.term() == "L_gan");
    CHECK(e.step() == 0);
    CHECK(std::string(e.what()).find("L_gan") != std::string::npos);
  }
  CHECK_THROWS_AS(train(c, ImagePairSet{}, ImagePairSet{}, 1), ParameterError);
  Rng rng(1);
  const auto rgb = make_synthetic_set(procedural_images(1, 40, 3, rng), NoiseModel::gaussian(0.1), rng);
  CHECK_THROWS_AS(train(c, rgb, ImagePairSet{}, 1), ShapeError);
}

TEST_CASE("DANet+ retraining") {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.mode = Mode::plus_retrain;
  const auto data = tiny_set(9);
  Rng rng(3);
  const auto pool = procedural_images(2, 40, 1, rng);
  CHECK_THROWS_AS(train(c, data, ImagePairSet{}, 2), ParameterError);
  const auto res = train(c, data, ImagePairSet{}, 2, {}, pool);
  REQUIRE(res.r_plus);
  CHECK(res.r_plus->role == Role::denoiser);
  CHECK(res.r_plus->adam_step == static_cast<long>(c.outer_iterations() * c.plus_epochs));

  // Ratio 0 is plain L1 retraining on the real pairs.
  c.plus_ratio = 0.0;
  const auto plain = retrain_plus(generator_sampler(res.g), pool, data, c, 4);
  CHECK(same_params(plain, train_denoiser_l1(data, c, 4, c.plus_epochs)));
  CHECK_THROWS_AS(retrain_plus(generator_sampler(res.g), {}, data, c, 4), ParameterError);
}

TEST_CASE("pgap is antisymmetric under swapping the sets") {
  TrainConfig c = tiny_config();
  const auto a = tiny_set(10);
  Rng rng(11);
  const auto b = make_synthetic_set(a.clean_images(), NoiseModel::gaussian(0.2), rng);
  const auto test = tiny_set(12, 2);
  const double ab = pgap_from_sets(a, b, test, c, 5, 1);
  const double ba = pgap_from_sets(b, a, test, c, 5, 1);
  CHECK(ab == -ba);
  CHECK(pgap_from_sets(a, a, test, c, 5, 1) == 0.0);
  CHECK_THROWS_AS(pgap_from_sets(a, ImagePairSet{}, test, c, 5, 1), ParameterError);
}
