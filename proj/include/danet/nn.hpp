// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "danet/errors.hpp"
#include "danet/ops.hpp"
#include "danet/rng.hpp"
#include "danet/tape.hpp"
#include "danet/tensor.hpp"

namespace danet {

enum class Role { denoiser, generator, discriminator };

inline std::string to_string(Role r) {
  switch (r) {
  case Role::denoiser: return "denoiser";
  case Role::generator: return "generator";
  case Role::discriminator: return "discriminator";
  }
  return "unknown";
}

inline Role role_from_string(std::string_view s) {
  if (s == "denoiser" || s == "R") return Role::denoiser;
  if (s == "generator" || s == "G") return Role::generator;
  if (s == "discriminator" || s == "D") return Role::discriminator;
  throw ParameterError("unknown network role '" + std::string(s) + "'");
}

/// UNet backbone shared by the denoiser and the generator. Each scale holds
/// two 3x3 conv + leaky-ReLU layers; channels double per scale; skips are
/// joined by channel concatenation; the decoder upsamples by nearest
/// neighbour. Downsampling is 2x2 average pooling.
struct UNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 32;
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;
  double slope = 0.2;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t divisor() const { return std::size_t(1) << depth; }
  bool operator==(const UNetConfig&) const = default;
};

/// Critic on (clean, noisy) pairs: five 4x4 stride-2 convolutions followed by
/// a single fully connected layer. No output squashing.
struct DiscConfig {
  std::size_t image_channels = 3;
  std::size_t patch_size = 128;
  std::array<std::size_t, 5> channels{32, 64, 128, 256, 512};
  double slope = 0.2;

  std::size_t fc_inputs() const {
    const std::size_t s = patch_size >> 5;
    return channels.back() * s * s;
  }
  bool operator==(const DiscConfig&) const = default;
};

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> m; // Adam first moment
  Tensor<T> v; // Adam second moment
};

/// Named parameter collection of one network plus its optimizer state.
template <class T>
struct NetworkParams {
  Role role = Role::denoiser;
  UNetConfig unet{};
  DiscConfig disc{};
  long adam_step = 0;
  std::vector<Param<T>> params;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw ContractError("no parameter named '" + std::string(name) + "'");
  }
  Param<T>& operator[](std::string_view name) { return params[index_of(name)]; }
  const Param<T>& operator[](std::string_view name) const { return params[index_of(name)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  template <class U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out{role, unet, disc, adam_step, {}};
    for (const auto& p : params)
      out.params.push_back({p.name, p.value.template cast<U>(), p.m.template cast<U>(),
                            p.v.template cast<U>()});
    return out;
  }

  /// Name/shape listing used for manifests and compatibility checks.
  std::vector<std::pair<std::string, Shape>> manifest() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& p : params) out.emplace_back(p.name, p.value.shape());
    return out;
  }
};

namespace detail {
template <class T>
void add_param(NetworkParams<T>& net, std::string name, Shape s) {
  net.params.push_back({std::move(name), Tensor<T>(s), Tensor<T>(s), Tensor<T>(s)});
}

template <class T>
void add_conv(NetworkParams<T>& net, const std::string& prefix, std::size_t cin, std::size_t cout,
              std::size_t k) {
  add_param(net, prefix + ".weight", Shape{cout, cin, k, k});
  add_param(net, prefix + ".bias", Shape{1, cout, 1, 1});
}

template <class T>
void add_unet(NetworkParams<T>& net, const UNetConfig& c) {
  if (c.depth < 1) throw ParameterError("UNet depth must be >= 1");
  if (c.base_channels < 1 || c.in_channels < 1 || c.out_channels < 1)
    throw ParameterError("UNet channel counts must be positive");
  std::size_t cin = c.in_channels;
  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    add_conv(net, p + ".conv1", cin, c.channels_at(l), 3);
    add_conv(net, p + ".conv2", c.channels_at(l), c.channels_at(l), 3);
    cin = c.channels_at(l);
  }
  add_conv(net, "bottom.conv1", cin, c.channels_at(c.depth), 3);
  add_conv(net, "bottom.conv2", c.channels_at(c.depth), c.channels_at(c.depth), 3);
  for (std::size_t l = c.depth; l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    add_conv(net, p + ".conv1", c.channels_at(l + 1) + c.channels_at(l), c.channels_at(l), 3);
    add_conv(net, p + ".conv2", c.channels_at(l), c.channels_at(l), 3);
  }
  add_conv(net, "head", c.channels_at(0), c.out_channels, 3);
}
} // namespace detail

template <class T = float>
NetworkParams<T> make_denoiser(UNetConfig c) {
  NetworkParams<T> net;
  net.role = Role::denoiser;
  if (c.in_channels != c.out_channels)
    throw ParameterError("denoiser needs equal input and output channels");
  net.unet = c;
  detail::add_unet(net, c);
  return net;
}

/// Generator UNet: `in_channels` counts image plus latent channels.
template <class T = float>
NetworkParams<T> make_generator(UNetConfig c) {
  NetworkParams<T> net;
  net.role = Role::generator;
  if (c.in_channels <= c.out_channels)
    throw ParameterError("generator needs at least one latent channel (in_channels > out_channels)");
  net.unet = c;
  detail::add_unet(net, c);
  return net;
}

template <class T = float>
NetworkParams<T> make_discriminator(DiscConfig c) {
  if (c.patch_size < 32 || c.patch_size % 32 != 0)
    throw ParameterError("discriminator patch size must be a positive multiple of 32, got " +
                         std::to_string(c.patch_size));
  NetworkParams<T> net;
  net.role = Role::discriminator;
  net.disc = c;
  std::size_t cin = 2 * c.image_channels;
  for (std::size_t l = 0; l < 5; ++l) {
    detail::add_conv(net, "conv" + std::to_string(l + 1), cin, c.channels[l], 4);
    cin = c.channels[l];
  }
  detail::add_param(net, "fc.weight", Shape{1, c.fc_inputs(), 1, 1});
  detail::add_param(net, "fc.bias", Shape{1, 1, 1, 1});
  return net;
}

inline bool is_bias(std::string_view name) { return name.ends_with(".bias"); }

/// R and G kernels ~ N(0, 2/fan_in); D weights ~ N(0, 0.02^2); biases zero.
/// Optimizer moments are reset.
template <class T>
void init_weights(NetworkParams<T>& net, Rng& rng) {
  for (auto& p : net.params) {
    const Shape s = p.value.shape();
    if (is_bias(p.name)) {
      p.value = Tensor<T>(s);
    } else if (net.role == Role::discriminator) {
      p.value = sample_normal<T>(s, 0.0, 0.02, rng);
    } else {
      const double fan_in = static_cast<double>(s.c * s.h * s.w);
      p.value = sample_normal<T>(s, 0.0, std::sqrt(2.0 / fan_in), rng);
    }
    p.m = Tensor<T>(s);
    p.v = Tensor<T>(s);
  }
  net.adam_step = 0;
}

template <class T>
void zero_parameters(NetworkParams<T>& net) {
  for (auto& p : net.params) p.value = Tensor<T>(p.value.shape());
}

// ---------------------------------------------------------------------------
// Forward passes over a tape.

/// Parameters of one network placed on a tape.
template <class T>
struct Bound {
  const NetworkParams<T>* net = nullptr;
  std::vector<Var<T>> vars;

  const Var<T>& operator()(std::string_view name) const { return vars[net->index_of(name)]; }
};

template <class T>
Bound<T> bind(Tape<T>& tape, const NetworkParams<T>& net, bool requires_grad = true) {
  Bound<T> b{&net, {}};
  b.vars.reserve(net.params.size());
  for (const auto& p : net.params) b.vars.push_back(tape.leaf(p.value, requires_grad));
  return b;
}

namespace detail {
template <class T>
Var<T> conv_act(const Bound<T>& b, const std::string& prefix, const Var<T>& x, T slope) {
  return leaky_relu(conv2d(x, b(prefix + ".weight"), b(prefix + ".bias"), 1, 1), slope);
}

template <class T>
Var<T> unet_block(const Bound<T>& b, const std::string& prefix, const Var<T>& x, T slope) {
  return conv_act(b, prefix + ".conv2", conv_act(b, prefix + ".conv1", x, slope), slope);
}
} // namespace detail

/// UNet body f(input); predicts the residual.
template <class T>
Var<T> unet_body(const Bound<T>& b, const Var<T>& input) {
  const UNetConfig& c = b.net->unet;
  const Shape& s = input.shape();
  if (s.c != c.in_channels)
    throw ShapeError("UNet expects " + std::to_string(c.in_channels) + " input channels, got " + s.str());
  if (s.h % c.divisor() != 0 || s.w % c.divisor() != 0 || s.h == 0 || s.w == 0)
    throw ShapeError("UNet of depth " + std::to_string(c.depth) +
                     " requires spatial extents divisible by " + std::to_string(c.divisor()) +
                     ", got " + s.str());
  const T slope = static_cast<T>(c.slope);
  std::vector<Var<T>> skips;
  Var<T> h = input;
  for (std::size_t l = 0; l < c.depth; ++l) {
    h = detail::unet_block(b, "enc" + std::to_string(l), h, slope);
    skips.push_back(h);
    h = avg_pool(h, 2);
  }
  h = detail::unet_block(b, "bottom", h, slope);
  for (std::size_t l = c.depth; l-- > 0;) {
    h = concat_channels<T>({upsample_nearest(h, 2), skips[l]});
    h = detail::unet_block(b, "dec" + std::to_string(l), h, slope);
  }
  return conv2d(h, b("head.weight"), b("head.bias"), 1, 1);
}

/// x_hat = y - f(y). Unclamped.
template <class T>
Var<T> denoiser_forward(const Bound<T>& b, const Var<T>& y) {
  return sub(y, unet_body(b, y));
}

/// y_hat = x + g(concat(x, z)).
template <class T>
Var<T> generator_forward(const Bound<T>& b, const Var<T>& x, const Var<T>& z) {
  const Shape& xs = x.shape();
  const Shape& zs = z.shape();
  if (xs.n != zs.n || xs.h != zs.h || xs.w != zs.w)
    throw ShapeError("generator: latent " + zs.str() + " does not align with image " + xs.str());
  return add(x, unet_body(b, concat_channels<T>({x, z})));
}

namespace detail {
template <class T>
void check_critic_input(const DiscConfig& c, const Shape& s) {
  if (s.c != 2 * c.image_channels)
    throw ShapeError("discriminator expects " + std::to_string(2 * c.image_channels) +
                     " pair channels, got " + s.str());
  if (s.h < 32 || s.w < 32)
    throw ShapeError("discriminator needs spatial extents >= 32 (five stride-2 stages), got " + s.str());
  if (s.h != c.patch_size || s.w != c.patch_size)
    throw ShapeError("discriminator configured for " + std::to_string(c.patch_size) + "x" +
                     std::to_string(c.patch_size) + " patches, got " + s.str());
}
} // namespace detail

/// Critic score on a channel-concatenated (clean, noisy) pair; shape (N,1,1,1).
template <class T>
Var<T> critic_score(const Bound<T>& b, const Var<T>& pair) {
  const DiscConfig& c = b.net->disc;
  detail::check_critic_input<T>(c, pair.shape());
  const T slope = static_cast<T>(c.slope);
  Var<T> h = pair;
  for (std::size_t l = 1; l <= 5; ++l) {
    const std::string p = "conv" + std::to_string(l);
    h = leaky_relu(conv2d(h, b(p + ".weight"), b(p + ".bias"), 2, 1), slope);
  }
  return linear(h, b("fc.weight"), b("fc.bias"));
}

template <class T>
Var<T> discriminator_forward(const Bound<T>& b, const Var<T>& x, const Var<T>& y) {
  require_same_shape("discriminator", x.shape(), y.shape());
  return critic_score(b, concat_channels<T>({x, y}));
}

/// Directional derivative of the critic w.r.t. its input, J(pair) * tangent,
/// recorded on the tape as a function of the critic parameters. Leaky-ReLU
/// slopes are frozen at the primal point (their derivative is zero almost
/// everywhere), so differentiating this w.r.t. the parameters is exact.
template <class T>
Var<T> critic_input_jvp(const Bound<T>& b, const Tensor<T>& pair, const Tensor<T>& tangent) {
  const DiscConfig& c = b.net->disc;
  detail::check_critic_input<T>(c, pair.shape());
  require_same_shape("critic_input_jvp", pair.shape(), tangent.shape());
  const T slope = static_cast<T>(c.slope);
  Tape<T>& tape = *b.vars.front().tape();
  Tensor<T> h = pair;
  Var<T> t = tape.constant(tangent);
  for (std::size_t l = 1; l <= 5; ++l) {
    const std::string p = "conv" + std::to_string(l);
    const Var<T>& w = b(p + ".weight");
    Tensor<T> pre = kernels::conv2d_forward(h, w.value(), &b(p + ".bias").value(), 2, 1);
    Tensor<T> mask(pre.shape());
    for (std::size_t i = 0; i < pre.size(); ++i) {
      mask[i] = pre[i] >= T(0) ? T(1) : slope;
      pre[i] *= mask[i];
    }
    h = std::move(pre);
    t = mul(conv2d(t, w, 2, 1), tape.constant(std::move(mask)));
  }
  return linear(t, b("fc.weight"));
}

// ---------------------------------------------------------------------------
// Checkpoints: "DNCK", version byte, u64 manifest length, JSON manifest, then
// per parameter three DTN1 blocks (value, first moment, second moment).

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const UNetConfig& c) {
  return {{"depth", c.depth}, {"base_channels", c.base_channels}, {"in_channels", c.in_channels},
          {"out_channels", c.out_channels}, {"slope", c.slope}};
}
inline nlohmann::json to_json(const DiscConfig& c) {
  return {{"image_channels", c.image_channels}, {"patch_size", c.patch_size},
          {"channels", c.channels}, {"slope", c.slope}};
}

template <class T>
nlohmann::json checkpoint_manifest(const NetworkParams<T>& net) {
  nlohmann::json m;
  m["format"] = "danet-checkpoint";
  m["role"] = to_string(net.role);
  m["config"] = net.role == Role::discriminator ? to_json(net.disc) : to_json(net.unet);
  m["adam_step"] = net.adam_step;
  m["params"] = nlohmann::json::array();
  for (const auto& p : net.params) {
    const Shape& s = p.value.shape();
    m["params"].push_back({{"name", p.name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  return m;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const NetworkParams<T>& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  const std::string manifest = checkpoint_manifest(net).dump(1);
  os.write("DNCK", 4);
  os.put(static_cast<char>(kCheckpointVersion));
  detail::put_u64_le(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& p : net.params) {
    write_dtn1(os, p.value);
    write_dtn1(os, p.m);
    write_dtn1(os, p.v);
  }
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

template <class T = float>
NetworkParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || std::string_view(magic.data(), 4) != "DNCK")
    throw IoError(path.string() + ": not a checkpoint file");
  const int version = is.get();
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t len = detail::get_u64_le(is);
  if (len > (1u << 26)) throw IoError(path.string() + ": manifest too large");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path.string() + ": truncated manifest");

  NetworkParams<T> net;
  try {
    const auto m = nlohmann::json::parse(text);
    const Role role = role_from_string(m.at("role").get<std::string>());
    const auto& c = m.at("config");
    if (role == Role::discriminator) {
      DiscConfig d;
      d.image_channels = c.at("image_channels");
      d.patch_size = c.at("patch_size");
      d.channels = c.at("channels").get<std::array<std::size_t, 5>>();
      d.slope = c.at("slope");
      net = make_discriminator<T>(d);
    } else {
      UNetConfig u;
      u.depth = c.at("depth");
      u.base_channels = c.at("base_channels");
      u.in_channels = c.at("in_channels");
      u.out_channels = c.at("out_channels");
      u.slope = c.at("slope");
      net = role == Role::denoiser ? make_denoiser<T>(u) : make_generator<T>(u);
    }
    net.adam_step = m.at("adam_step");
    const auto& listed = m.at("params");
    if (listed.size() != net.params.size())
      throw IoError("parameter count " + std::to_string(listed.size()) + " does not match config");
    for (std::size_t i = 0; i < listed.size(); ++i)
      if (listed[i].at("name").get<std::string>() != net.params[i].name)
        throw IoError("parameter '" + listed[i].at("name").get<std::string>() +
                      "' does not match expected '" + net.params[i].name + "'");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad manifest: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  for (auto& p : net.params) {
    for (Tensor<T>* t : {&p.value, &p.m, &p.v}) {
      Tensor<T> loaded = read_dtn1<T>(is);
      if (loaded.shape() != t->shape())
        throw IoError(path.string() + ": parameter '" + p.name + "' has shape " +
                      loaded.shape().str() + ", expected " + t->shape().str());
      *t = std::move(loaded);
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Inference helpers (no gradient recording).

template <class T>
std::size_t latent_channels(const NetworkParams<T>& g) {
  return g.unet.in_channels - g.unet.out_channels;
}

template <class T>
Tensor<T> run_denoiser(const NetworkParams<T>& r, const Tensor<T>& y) {
  if (r.role != Role::denoiser)
    throw ContractError("expected a denoiser network, got " + to_string(r.role));
  Tape<T> tape;
  return denoiser_forward(bind(tape, r, false), tape.constant(y)).value();
}

/// Inference output: R(y) clamped to [0,1].
template <class T>
Tensor<T> denoise(const NetworkParams<T>& r, const Tensor<T>& y) {
  Tensor<T> out = run_denoiser(r, y);
  for (auto& v : out.data()) v = std::clamp(v, T(0), T(1));
  return out;
}

template <class T>
Tensor<T> run_generator(const NetworkParams<T>& g, const Tensor<T>& x, const Tensor<T>& z) {
  if (g.role != Role::generator)
    throw ContractError("expected a generator network, got " + to_string(g.role));
  Tape<T> tape;
  return generator_forward(bind(tape, g, false), tape.constant(x), tape.constant(z)).value();
}

} // namespace danet
