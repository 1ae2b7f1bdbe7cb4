// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "danet/errors.hpp"
#include "danet/metrics.hpp"
#include "danet/train.hpp"

namespace danet {

/// Raised for malformed configuration; lists every offending key.
class ConfigError : public ParameterError {
public:
  explicit ConfigError(std::vector<std::string> problems)
      : ParameterError(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid configuration:";
    for (const auto& e : p) s += "\n  " + e;
    return s;
  }
  std::vector<std::string> problems_;
};

/// Everything a command needs: training recipe, dataset manifest, metric
/// settings, seed and output directory.
struct RunConfig {
  TrainConfig train;
  std::filesystem::path manifest;
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  int threads = 1;
};

namespace detail {

/// Defaults of every recognized flat key.
inline nlohmann::json config_defaults() {
  const RunConfig d;
  const TrainConfig& t = d.train;
  nlohmann::json j;
  j["seed"] = d.seed;
  j["out"] = d.out.string();
  j["threads"] = d.threads;
  j["data.manifest"] = "";
  j["train.mode"] = to_string(t.mode);
  j["train.alpha"] = t.alpha;
  j["train.tau1"] = t.tau1;
  j["train.tau2"] = t.tau2;
  j["train.n_critic"] = t.n_critic;
  j["train.gp_lambda"] = t.gp_lambda;
  j["train.lr_R"] = t.lr_r;
  j["train.lr_G"] = t.lr_g;
  j["train.lr_D"] = t.lr_d;
  j["train.betas_R"] = {t.adam_r.beta1, t.adam_r.beta2};
  j["train.betas_G"] = {t.adam_g.beta1, t.adam_g.beta2};
  j["train.betas_D"] = {t.adam_d.beta1, t.adam_d.beta2};
  j["train.adam_eps"] = t.adam_r.eps;
  j["train.epochs"] = t.epochs;
  j["train.batch"] = t.batch;
  j["train.patch"] = t.patch;
  j["train.patches_per_epoch"] = t.patches_per_epoch;
  j["train.lr_period"] = t.lr_period;
  j["train.augment"] = t.augment;
  j["train.latent_channels"] = t.latent_channels;
  j["train.noise_filter_size"] = t.noise_filter.kernel_size;
  j["train.noise_filter_sigma"] = t.noise_filter.sigma;
  j["train.plus_ratio"] = t.plus_ratio;
  j["train.plus_epochs"] = t.plus_epochs;
  j["model.image_channels"] = t.image_channels();
  j["model.R.depth"] = t.unet_r.depth;
  j["model.R.base_channels"] = t.unet_r.base_channels;
  j["model.G.depth"] = t.unet_g.depth;
  j["model.G.base_channels"] = t.unet_g.base_channels;
  j["model.D.channels"] = t.disc.channels;
  j["model.slope"] = t.unet_r.slope;
  j["metrics.filter_size"] = t.akld.filter.kernel_size;
  j["metrics.filter_sigma"] = t.akld.filter.sigma;
  j["metrics.floor"] = t.akld.floor;
  j["metrics.akld_L"] = t.akld.samples;
  j["metrics.eval_akld_L"] = t.eval_akld_samples;
  j["metrics.pgap_epochs"] = t.pgap_epochs;
  return j;
}

inline void flatten(const nlohmann::json& j, const std::string& prefix, nlohmann::json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten(*it, key, out);
    else out[key] = *it;
  }
}

inline bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long>() >= 0);
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_array()) return v.is_array() && v.size() == def.size();
  return def.type() == v.type();
}

template <class T>
T get(const nlohmann::json& j, const char* key) {
  return j.at(key).get<T>();
}

} // namespace detail

/// Resolves a flat configuration from (in increasing precedence) defaults,
/// the config file (flat dotted or nested keys) and `--key value` overrides.
/// Unknown keys and type mismatches are reported together.
class ConfigResolver {
public:
  ConfigResolver() : values_(detail::config_defaults()) {}

  void merge_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError({"cannot open config file " + path.string()});
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError({"config file " + path.string() + ": " + e.what()});
    }
    if (!j.is_object()) throw ConfigError({"config file " + path.string() + " must hold an object"});
    nlohmann::json flat = nlohmann::json::object();
    detail::flatten(j, "", flat);
    for (auto it = flat.begin(); it != flat.end(); ++it) set(it.key(), *it, path.string());
  }

  /// Value text is parsed as JSON when possible, else taken as a string.
  /// String-valued keys always take the text verbatim.
  void set_text(const std::string& key, const std::string& text, const std::string& origin = "command line") {
    nlohmann::json v;
    if (values_.contains(key) && values_[key].is_string()) v = text;
    else v = nlohmann::json::parse(text, nullptr, false);
    if (v.is_discarded()) v = text;
    set(key, v, origin);
  }

  void set(const std::string& key, const nlohmann::json& value, const std::string& origin) {
    if (!values_.contains(key)) {
      problems_.push_back("unknown key '" + key + "' (" + origin + ")");
      return;
    }
    if (!detail::same_kind(values_[key], value)) {
      problems_.push_back("key '" + key + "' expects " + std::string(values_[key].type_name()) + " like " +
                          values_[key].dump() + ", got " + value.dump() + " (" + origin + ")");
      return;
    }
    values_[key] = value;
  }

  /// Flat map of every key, including defaults. Serialized keys are sorted.
  const nlohmann::json& resolved() const { return values_; }

  RunConfig build() const {
    std::vector<std::string> problems = problems_;
    RunConfig rc;
    try {
      const auto& j = values_;
      using detail::get;
      rc.seed = get<std::uint64_t>(j, "seed");
      rc.out = get<std::string>(j, "out");
      rc.threads = get<int>(j, "threads");
      rc.manifest = get<std::string>(j, "data.manifest");
      TrainConfig& t = rc.train;
      t.mode = mode_from_string(get<std::string>(j, "train.mode"));
      t.alpha = get<double>(j, "train.alpha");
      t.tau1 = get<double>(j, "train.tau1");
      t.tau2 = get<double>(j, "train.tau2");
      t.n_critic = get<std::size_t>(j, "train.n_critic");
      t.gp_lambda = get<double>(j, "train.gp_lambda");
      t.lr_r = get<double>(j, "train.lr_R");
      t.lr_g = get<double>(j, "train.lr_G");
      t.lr_d = get<double>(j, "train.lr_D");
      const double eps = get<double>(j, "train.adam_eps");
      auto betas = [&](const char* key) {
        const auto b = get<std::vector<double>>(j, key);
        return AdamSettings{b.at(0), b.at(1), eps};
      };
      t.adam_r = betas("train.betas_R");
      t.adam_g = betas("train.betas_G");
      t.adam_d = betas("train.betas_D");
      t.epochs = get<std::size_t>(j, "train.epochs");
      t.batch = get<std::size_t>(j, "train.batch");
      t.patch = get<std::size_t>(j, "train.patch");
      t.patches_per_epoch = get<std::size_t>(j, "train.patches_per_epoch");
      t.lr_period = get<std::size_t>(j, "train.lr_period");
      t.augment = get<bool>(j, "train.augment");
      t.latent_channels = get<std::size_t>(j, "train.latent_channels");
      t.noise_filter = {get<std::size_t>(j, "train.noise_filter_size"), get<double>(j, "train.noise_filter_sigma")};
      t.plus_ratio = get<double>(j, "train.plus_ratio");
      t.plus_epochs = get<std::size_t>(j, "train.plus_epochs");
      const double slope = get<double>(j, "model.slope");
      t.unet_r.depth = get<std::size_t>(j, "model.R.depth");
      t.unet_r.base_channels = get<std::size_t>(j, "model.R.base_channels");
      t.unet_r.slope = slope;
      t.unet_g.depth = get<std::size_t>(j, "model.G.depth");
      t.unet_g.base_channels = get<std::size_t>(j, "model.G.base_channels");
      t.unet_g.slope = slope;
      t.disc.channels = get<std::array<std::size_t, 5>>(j, "model.D.channels");
      t.disc.slope = slope;
      t.set_image_channels(get<std::size_t>(j, "model.image_channels"));
      t.akld.filter = {get<std::size_t>(j, "metrics.filter_size"), get<double>(j, "metrics.filter_sigma")};
      t.akld.floor = get<double>(j, "metrics.floor");
      t.akld.samples = get<std::size_t>(j, "metrics.akld_L");
      t.eval_akld_samples = get<std::size_t>(j, "metrics.eval_akld_L");
      t.pgap_epochs = get<std::size_t>(j, "metrics.pgap_epochs");
      if (rc.threads < 1) problems.push_back("key 'threads' must be >= 1");
      if (t.akld.filter.kernel_size % 2 == 0) problems.push_back("key 'metrics.filter_size' must be odd");
      if (t.noise_filter.kernel_size % 2 == 0) problems.push_back("key 'train.noise_filter_size' must be odd");
      if (t.patch % 32 != 0) problems.push_back("key 'train.patch' must be a multiple of 32");
      if (problems.empty()) t.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      problems.push_back(e.what());
    }
    if (!problems.empty()) throw ConfigError(problems);
    return rc;
  }

private:
  nlohmann::json values_;
  std::vector<std::string> problems_;
};

} // namespace danet
