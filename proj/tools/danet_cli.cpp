// SPDX-License-Identifier: Apache-2.0
// danet: train, denoise, generate, eval and gradcheck from one binary.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "danet/danet.hpp"

namespace fs = std::filesystem;
using namespace danet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitAbort = 1;
constexpr int kExitUsage = 2;

struct Override {
  std::string key, value;
};

/// Pulls `--a.b value` / `--a.b=value` pairs (dotted keys) out of argv.
std::vector<std::string> split_overrides(int argc, char** argv, std::vector<Override>& out) {
  std::vector<std::string> rest;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) {
      rest.push_back(a);
      continue;
    }
    std::string key = a.substr(2), value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
      if (key.find('.') == std::string::npos) {
        rest.push_back(a);
        continue;
      }
    } else {
      if (key.find('.') == std::string::npos) {
        rest.push_back(a);
        continue;
      }
      if (i + 1 >= argc) throw ConfigError({"override --" + key + " needs a value"});
      value = argv[++i];
    }
    out.push_back({key, value});
  }
  return rest;
}

std::string timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Timestamps live only here so every other artifact is reproducible.
class RunLog {
public:
  void open(const fs::path& dir) {
    fs::create_directories(dir);
    os_.open(dir / "run.log", std::ios::app);
  }
  void line(const std::string& msg) {
    if (os_) os_ << timestamp() << ' ' << msg << '\n' << std::flush;
  }

private:
  std::ofstream os_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

void write_snapshot(const fs::path& out, const ConfigResolver& cfg) {
  fs::create_directories(out);
  write_text(out / "config.resolved.json", cfg.resolved().dump(2) + "\n");
}

bool is_image(const fs::path& p) { return p.extension() == ".png" || p.extension() == ".dtn"; }

/// Files as given; directories expand to their images in name order.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& s : inputs) {
    const fs::path p(s);
    if (fs::is_directory(p)) {
      std::vector<fs::path> dir;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && is_image(e.path())) dir.push_back(e.path());
      std::sort(dir.begin(), dir.end());
      files.insert(files.end(), dir.begin(), dir.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError("no such input: " + p.string());
    }
  }
  if (files.empty()) throw ParameterError("no input images");
  return files;
}

Dataset load_dataset(const RunConfig& rc) {
  if (rc.manifest.empty()) throw ConfigError({"key 'data.manifest' is not set"});
  if (!fs::exists(rc.manifest)) throw IoError("manifest not found: " + rc.manifest.string());
  return load_manifest(rc.manifest, rc.seed);
}

NetworkParams<float> load_role(const fs::path& path, Role role) {
  auto net = load_checkpoint<float>(path);
  if (net.role != role)
    throw ContractError(path.string() + " holds a " + to_string(net.role) + " checkpoint, expected " +
                        to_string(role));
  return net;
}

// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& rc, RunLog& log) {
  const Dataset data = load_dataset(rc);
  TrainOutputs out{rc.out / "train_log.csv", rc.out / "checkpoints", {}};
  out.on_epoch = [&](const EpochLog& e, const TrainResult&) {
    log.line("epoch " + std::to_string(e.epoch) + " done");
    std::cout << kTrainCsvHeader << '\n' << csv_row(e) << '\n';
  };
  const TrainResult res = train(rc.train, data.train, data.validation, rc.seed, out, data.clean_pool);
  if (rc.train.trains_r()) save_checkpoint(rc.out / "R.dnck", res.r);
  if (rc.train.trains_g()) save_checkpoint(rc.out / "G.dnck", res.g);
  save_checkpoint(rc.out / "D.dnck", res.d);
  if (res.r_plus) save_checkpoint(rc.out / "R_plus.dnck", *res.r_plus);
  return kExitOk;
}

int cmd_denoise(const RunConfig& rc, const fs::path& checkpoint, const std::vector<std::string>& inputs) {
  const auto r = load_role(checkpoint, Role::denoiser);
  for (const auto& f : expand_inputs(inputs)) {
    const fs::path dst = rc.out / (f.stem().string() + ".png");
    save_png(denoise(r, load_image(f)), dst);
    std::cout << dst.string() << '\n';
  }
  return kExitOk;
}

int cmd_generate(const RunConfig& rc, const fs::path& checkpoint, const std::vector<std::string>& inputs,
                 std::size_t samples) {
  if (samples < 1) throw ParameterError("--samples must be >= 1");
  const NoisySampler g = generator_sampler(load_role(checkpoint, Role::generator));
  for (const auto& f : expand_inputs(inputs)) {
    const Tensor<float> x = load_image(f);
    for (std::size_t j = 0; j < samples; ++j) {
      Rng rng = Rng::stream(rc.seed, "generate:" + f.filename().string(), j);
      char name[64];
      std::snprintf(name, sizeof name, "_sample%03zu_seed%llu.png", j, static_cast<unsigned long long>(rc.seed));
      const fs::path dst = rc.out / (f.stem().string() + name);
      save_png(g(x, rng), dst);
      std::cout << dst.string() << '\n';
    }
  }
  return kExitOk;
}

struct EvalOptions {
  std::string metric;
  std::string split = "test";
  std::string sampler;  // real | oracle | generator
  std::string noise;    // JSON noise model for the oracle sampler
  fs::path checkpoint;
  fs::path reference, input;
};

NoisySampler make_sampler(const EvalOptions& o, const Dataset& data, nlohmann::json& fp) {
  const std::string kind = o.sampler.empty() ? (o.checkpoint.empty() ? "oracle" : "generator") : o.sampler;
  fp["sampler"] = kind;
  if (kind == "generator") {
    if (o.checkpoint.empty()) throw ParameterError("--sampler generator needs --checkpoint");
    fp["checkpoint"] = o.checkpoint.filename().string();
    return generator_sampler(load_role(o.checkpoint, Role::generator));
  }
  if (kind == "oracle") {
    NoiseModel m;
    if (!o.noise.empty()) m = NoiseModel::from_json(nlohmann::json::parse(o.noise));
    else if (data.noise) m = *data.noise;
    else throw ParameterError("oracle sampler needs --noise or a manifest noise model");
    fp["noise"] = m.to_json();
    return oracle_sampler(m);
  }
  throw ParameterError("unknown sampler '" + kind + "' (real, oracle, generator)");
}

/// Replays the real noisy image of each clean input.
NoisySampler real_sampler(const ImagePairSet& set) {
  return [&set](const Tensor<float>& x, Rng&) {
    for (const auto& r : set.records)
      if (r.clean == x) return r.noisy;
    throw ContractError("real sampler: clean image not in the set");
  };
}

const ImagePairSet& pick_split(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "validation") return d.validation;
  if (split == "test") return d.test;
  throw ParameterError("unknown split '" + split + "' (train, validation, test)");
}

int cmd_eval(const RunConfig& rc, const ConfigResolver& cfg, const EvalOptions& o) {
  std::vector<MetricReport> rows;
  MetricReport summary;
  summary.metric = o.metric;
  summary.seed = rc.seed;
  auto add_row = [&](const std::string& id, double v, std::size_t n) {
    MetricReport r = summary;
    r.dataset = id;
    r.value = v;
    r.samples = n;
    rows.push_back(r);
  };

  if (o.metric == "psnr" || o.metric == "ssim") {
    const SsimSettings ss;
    summary.config = o.metric == "psnr"
                         ? nlohmann::json{{"peak", 1.0}}
                         : nlohmann::json{{"window", ss.window}, {"sigma", ss.sigma}, {"k1", ss.k1},
                                          {"k2", ss.k2}, {"range", ss.range}};
    auto score = [&](const Tensor<float>& a, const Tensor<float>& b) {
      return o.metric == "psnr" ? psnr(a, b) : ssim(a, b, ss);
    };
    if (!o.reference.empty() || !o.input.empty()) {
      if (o.reference.empty() || o.input.empty()) throw ParameterError("--reference and --input go together");
      summary.config["mode"] = "folders";
      for (const auto& f : expand_inputs({o.reference.string()})) {
        const fs::path other = o.input / f.filename();
        if (!fs::exists(other)) throw IoError("no counterpart for " + f.string() + " in " + o.input.string());
        add_row(f.filename().string(), score(load_image(other), load_image(f)), 1);
      }
      summary.dataset = "folders";
    } else {
      const Dataset data = load_dataset(rc);
      const ImagePairSet& set = pick_split(data, o.split);
      if (set.empty()) throw ParameterError("split '" + o.split + "' is empty");
      std::optional<NetworkParams<float>> r;
      if (!o.checkpoint.empty()) {
        r = load_role(o.checkpoint, Role::denoiser);
        summary.config["checkpoint"] = o.checkpoint.filename().string();
      }
      summary.config["mode"] = r ? "denoised" : "noisy";
      for (const auto& rec : set.records)
        add_row(rec.id, score(r ? denoise(*r, rec.noisy) : rec.noisy, rec.clean), 1);
      summary.dataset = o.split;
    }
  } else if (o.metric == "akld") {
    const Dataset data = load_dataset(rc);
    const ImagePairSet& set = pick_split(data, o.split);
    if (set.empty()) throw ParameterError("split '" + o.split + "' is empty");
    summary.config = rc.train.akld.fingerprint();
    NoisySampler sampler;
    if (o.sampler == "real") {
      summary.config["sampler"] = "real";
      sampler = real_sampler(set);
    } else {
      sampler = make_sampler(o, data, summary.config);
    }
    Rng rng = Rng::stream(rc.seed, "eval:akld");
    for (const auto& rec : set.records)
      add_row(rec.id, akld(sampler, rec.clean, rec.noisy, rc.train.akld, rng), rc.train.akld.samples);
    summary.dataset = o.split;
  } else if (o.metric == "pgap") {
    const Dataset data = load_dataset(rc);
    if (data.train.empty() || data.test.empty()) throw ParameterError("pgap needs train and test splits");
    nlohmann::json fp = cfg.resolved();
    NoisySampler sampler =
        o.sampler == "real" ? real_sampler(data.train) : make_sampler(o, data, fp);
    if (o.sampler == "real") fp["sampler"] = "real";
    summary.config = fp;
    add_row(o.split, pgap(data.train, data.test, sampler, rc.train, rc.seed, rc.train.pgap_epochs), data.test.size());
    summary.dataset = "test";
  } else {
    throw ParameterError("unknown metric '" + o.metric + "' (psnr, ssim, akld, pgap)");
  }

  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    total += r.value;
    n += r.samples;
  }
  summary.value = total / static_cast<double>(rows.size());
  summary.samples = n;
  summary.dataset += ":mean";

  nlohmann::json j = summary.to_json();
  j["rows"] = nlohmann::json::array();
  std::string csv = MetricReport::csv_header() + "\n";
  for (const auto& r : rows) {
    j["rows"].push_back(r.to_json());
    csv += r.csv_row() + "\n";
  }
  csv += summary.csv_row() + "\n";
  write_text(rc.out / (o.metric + ".json"), j.dump(2) + "\n");
  write_text(rc.out / (o.metric + ".csv"), csv);
  std::printf("%s %.6f\n", o.metric.c_str(), summary.value);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& scope, bool inject_fault) {
  if (scope != "ops" && scope != "networks" && scope != "losses" && scope != "all")
    throw ParameterError("unknown scope '" + scope + "' (ops, networks, losses, all)");
  auto cases = gradcheck::default_cases();
  if (inject_fault) cases.push_back(gradcheck::corrupted_case());
  const auto report = gradcheck::run(cases, scope, seed);
  std::size_t ops = 0;
  for (const auto& it : report.items) {
    std::printf("%-8s %-24s worst_rel_error=%.3e probes=%zu %s\n", it.scope.c_str(), it.name.c_str(),
                it.worst_rel_error, it.probes, it.passed ? "ok" : "FAILED");
    if (it.scope == "ops") ++ops;
  }
  if (scope == "ops" || scope == "all") std::printf("ops covered: %zu\n", ops);
  if (!report.passed()) {
    for (const auto& it : report.items)
      if (!it.passed) std::fprintf(stderr, "gradcheck failed: %s\n", it.name.c_str());
    return kExitAbort;
  }
  return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"DANet noise modelling and denoising lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer("Any configuration key can be overridden as --key value, e.g. --train.tau1 1000.");

  std::optional<std::string> config_path, seed, out, threads;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed, "run seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--threads", threads, "worker threads");

  auto* train_cmd = app.add_subcommand("train", "train DANet (or an ablation) on a dataset manifest");
  std::string manifest;
  train_cmd->add_option("--manifest", manifest, "dataset manifest (overrides data.manifest)");

  auto* denoise_cmd = app.add_subcommand("denoise", "denoise images with a denoiser checkpoint");
  std::string checkpoint;
  std::vector<std::string> inputs;
  denoise_cmd->add_option("--checkpoint", checkpoint, "denoiser checkpoint")->required();
  denoise_cmd->add_option("inputs", inputs, "images or folders")->required();

  auto* generate_cmd = app.add_subcommand("generate", "sample noisy images from a generator checkpoint");
  std::size_t samples = 1;
  generate_cmd->add_option("--checkpoint", checkpoint, "generator checkpoint")->required();
  generate_cmd->add_option("--samples", samples, "samples per clean image");
  generate_cmd->add_option("inputs", inputs, "clean images or folders")->required();

  auto* eval_cmd = app.add_subcommand("eval", "compute psnr, ssim, akld or pgap");
  EvalOptions eo;
  std::string eval_ckpt, reference, input;
  eval_cmd->add_option("--metric", eo.metric, "psnr | ssim | akld | pgap")->required();
  eval_cmd->add_option("--split", eo.split, "manifest split (default test)");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "denoiser (psnr/ssim) or generator (akld/pgap)");
  eval_cmd->add_option("--sampler", eo.sampler, "real | oracle | generator");
  eval_cmd->add_option("--noise", eo.noise, "noise model JSON for the oracle sampler");
  eval_cmd->add_option("--manifest", manifest, "dataset manifest (overrides data.manifest)");
  eval_cmd->add_option("--reference", reference, "folder of reference images");
  eval_cmd->add_option("--input", input, "folder of images compared against --reference");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string scope = "all";
  bool inject_fault = false;
  grad_cmd->add_option("--scope", scope, "ops | networks | losses | all");
  grad_cmd->add_flag("--inject-fault", inject_fault, "add a deliberately wrong backward");

  std::vector<Override> overrides;
  RunLog log;
  std::string command = "danet";
  try {
    std::vector<std::string> rest = split_overrides(argc, argv, overrides);
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
    command = app.get_subcommands().front()->get_name();

    ConfigResolver cfg;
    if (config_path) cfg.merge_file(*config_path);
    if (!manifest.empty()) cfg.set_text("data.manifest", manifest);
    for (const auto& o : overrides) cfg.set_text(o.key, o.value);
    if (seed) cfg.set_text("seed", *seed);
    if (out) cfg.set_text("out", *out);
    if (threads) cfg.set_text("threads", *threads);
    const RunConfig rc = cfg.build();
    set_num_threads(rc.threads);

    if (command == "gradcheck") return cmd_gradcheck(rc.seed, scope, inject_fault);

    write_snapshot(rc.out, cfg);
    log.open(rc.out);
    log.line(command + " start seed=" + std::to_string(rc.seed));
    int code = kExitOk;
    if (command == "train") {
      code = cmd_train(rc, log);
    } else if (command == "denoise") {
      code = cmd_denoise(rc, checkpoint, inputs);
    } else if (command == "generate") {
      code = cmd_generate(rc, checkpoint, inputs, samples);
    } else {
      eo.checkpoint = eval_ckpt;
      eo.reference = reference;
      eo.input = input;
      code = cmd_eval(rc, cfg, eo);
    }
    log.line(command + " done");
    return code;
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << "run 'danet --help' for usage\n";
    return kExitUsage;
  } catch (const TrainingAborted& e) {
    log.line(command + " aborted: " + e.what());
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitAbort;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    log.line(command + " failed: " + e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    log.line(command + " failed: " + e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    log.line(command + " failed: " + e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    log.line(command + " failed: " + e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    log.line(command + " failed: " + e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitAbort;
  }
}
