#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "latent_inpaint/ops.hpp"
#include "latent_inpaint/tensor.hpp"

namespace latent_inpaint {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Architecture hyperparameters shared by generator and critic. The
/// generator projects the latent code to base_channels x base_size x
/// base_size and doubles the resolution per stage while halving channels;
/// the critic mirrors it.
struct NetworkConfig {
  std::size_t latent_dim = 128;
  std::size_t image_size = 64;
  std::size_t image_channels = 3;
  std::size_t base_size = 4;
  std::size_t base_channels = 512;
  double norm_eps = 1e-5;

  std::size_t stages() const {
    std::size_t s = 0;
    for (std::size_t size = base_size; size < image_size; size *= 2) ++s;
    return s;
  }

  /// Channel count at the input of generator stage i (i = stages() is the
  /// channel count at full resolution).
  std::size_t stage_channels(std::size_t i) const { return base_channels >> i; }

  void validate() const {
    if (latent_dim == 0 || image_channels == 0 || base_size == 0 || base_channels == 0) {
      throw std::invalid_argument("network dimensions must be positive");
    }
    if (base_size << stages() != image_size) {
      throw std::invalid_argument("image_size must be base_size times a power of two");
    }
    if (stages() == 0) throw std::invalid_argument("network needs at least one resampling stage");
    if ((base_channels >> stages()) == 0 || (base_channels >> stages()) << stages() != base_channels) {
      throw std::invalid_argument("base_channels must be divisible by 2^stages");
    }
    if (!(norm_eps > 0.0)) throw std::invalid_argument("norm_eps must be positive");
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// Weights ~ U(-b, b) with b chosen so Var = variance_scale / fan_in.
/// Biases and layer-norm offsets start at 0, layer-norm gains at 1.
struct InitScheme {
  double variance_scale = 2.0;

  double bound(std::size_t fan_in) const {
    return std::sqrt(3.0 * variance_scale / static_cast<double>(fan_in));
  }
};

namespace nn {

inline Tensor uniform_parameter(Shape shape, std::size_t fan_in, const InitScheme& scheme,
                                std::mt19937_64& rng) {
  const double b = scheme.bound(fan_in);
  std::uniform_real_distribution<double> dist(-b, b);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

struct Conv2d {
  Tensor weight;  // [F, C, k, k]
  Tensor bias;    // [F]
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv2d create(std::size_t in, std::size_t out, std::size_t kernel, const InitScheme& scheme,
                       std::mt19937_64& rng) {
    Conv2d c;
    c.weight = uniform_parameter({out, in, kernel, kernel}, in * kernel * kernel, scheme, rng);
    c.bias = Tensor::zeros({out}, true);
    c.pad = kernel / 2;
    return c;
  }

  Tensor operator()(const Tensor& x) const {
    auto y = ops::conv2d(x, weight, stride, pad);
    return ops::add(y, ops::reshape(bias, {1, bias.numel(), 1, 1}));
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;  // [C]
  Tensor bias;  // [C]
  double eps = 1e-5;

  static LayerNorm create(std::size_t channels, double eps) {
    return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), eps};
  }

  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias, eps); }

  void collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(std::size_t in, std::size_t out, const InitScheme& scheme, std::mt19937_64& rng) {
    return {uniform_parameter({in, out}, in, scheme, rng), Tensor::zeros({out}, true)};
  }

  Tensor operator()(const Tensor& x) const {
    return ops::add(ops::matmul(x, weight), ops::reshape(bias, {1, bias.numel()}));
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

}  // namespace nn

enum class Resample { keep, up, down };

/// Pre-activation residual block:
///   F(x)  = conv3x3(relu(norm(conv3x3(resample_up(relu(norm(x)))))))  then resample_down
///   skip  = resample(x), followed by a 1x1 conv when channel counts differ
///   out   = F(x) + skip
class ResidualBlock {
 public:
  ResidualBlock() = default;

  static ResidualBlock create(std::size_t in, std::size_t out, Resample mode, double eps,
                              const InitScheme& scheme, std::mt19937_64& rng) {
    ResidualBlock b;
    b.mode_ = mode;
    b.norm1_ = nn::LayerNorm::create(in, eps);
    b.conv1_ = nn::Conv2d::create(in, out, 3, scheme, rng);
    b.norm2_ = nn::LayerNorm::create(out, eps);
    b.conv2_ = nn::Conv2d::create(out, out, 3, scheme, rng);
    if (in != out) b.skip_ = nn::Conv2d::create(in, out, 1, scheme, rng);
    return b;
  }

  Tensor operator()(const Tensor& x) const {
    auto h = ops::relu(norm1_(x));
    if (mode_ == Resample::up) h = ops::upsample2x(h);
    h = conv1_(h);
    h = conv2_(ops::relu(norm2_(h)));
    if (mode_ == Resample::down) h = ops::avg_pool2x(h);

    auto s = x;
    if (mode_ == Resample::up) s = ops::upsample2x(s);
    if (skip_) s = (*skip_)(s);
    if (mode_ == Resample::down) s = ops::avg_pool2x(s);
    if (s.shape() != h.shape()) {
      throw ShapeError("residual block: branch " + shape_str(h.shape()) + " vs skip " +
                       shape_str(s.shape()));
    }
    return ops::add(h, s);
  }

  Resample mode() const { return mode_; }
  bool has_projection() const { return skip_.has_value(); }

  /// Sets the last convolution of the residual branch to zero, making the
  /// block equal to its skip path.
  void zero_branch() {
    std::ranges::fill(conv2_.weight.mutable_data(), 0.0);
    std::ranges::fill(conv2_.bias.mutable_data(), 0.0);
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    norm1_.collect(prefix + ".norm1", out);
    conv1_.collect(prefix + ".conv1", out);
    norm2_.collect(prefix + ".norm2", out);
    conv2_.collect(prefix + ".conv2", out);
    if (skip_) skip_->collect(prefix + ".skip", out);
  }

 private:
  Resample mode_ = Resample::keep;
  nn::LayerNorm norm1_, norm2_;
  nn::Conv2d conv1_, conv2_;
  std::optional<nn::Conv2d> skip_;
};

/// Copies values from `source` into the tensors of `target`; names, order
/// and shapes must agree.
inline void assign_parameters(const NamedTensors& target, const NamedTensors& source) {
  if (target.size() != source.size()) throw std::invalid_argument("parameter count mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].first != source[i].first || target[i].second.shape() != source[i].second.shape()) {
      throw std::invalid_argument("parameter mismatch at '" + target[i].first + "'");
    }
    auto dst = Tensor(target[i].second).mutable_data();
    auto src = source[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

inline std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

/// z [N, latent] -> image [N, C, S, S] in (-1, 1).
class Generator {
 public:
  Generator() = default;

  static Generator create(const NetworkConfig& cfg, std::mt19937_64& rng, const InitScheme& scheme = {}) {
    cfg.validate();
    Generator g;
    g.cfg_ = cfg;
    g.project_ = nn::Linear::create(cfg.latent_dim, cfg.base_channels * cfg.base_size * cfg.base_size,
                                    scheme, rng);
    for (std::size_t i = 0; i < cfg.stages(); ++i) {
      g.blocks_.push_back(ResidualBlock::create(cfg.stage_channels(i), cfg.stage_channels(i + 1),
                                                Resample::up, cfg.norm_eps, scheme, rng));
    }
    const auto top = cfg.stage_channels(cfg.stages());
    g.out_norm_ = nn::LayerNorm::create(top, cfg.norm_eps);
    g.out_conv_ = nn::Conv2d::create(top, cfg.image_channels, 3, scheme, rng);
    return g;
  }

  Tensor operator()(const Tensor& z) const {
    Tensor latent = z.rank() == 1 ? ops::reshape(z, {1, z.numel()}) : z;
    if (latent.rank() != 2 || latent.dim(1) != cfg_.latent_dim) {
      throw ShapeError("generator expects latent dimension " + std::to_string(cfg_.latent_dim) +
                       ", got " + shape_str(z.shape()));
    }
    const auto n = latent.dim(0);
    auto h = ops::reshape(project_(latent), {n, cfg_.base_channels, cfg_.base_size, cfg_.base_size});
    for (const auto& block : blocks_) h = block(h);
    return ops::tanh(out_conv_(ops::relu(out_norm_(h))));
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }

  NamedTensors named_parameters() const {
    NamedTensors out;
    project_.collect("generator.project", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect("generator.block" + std::to_string(i), out);
    }
    out_norm_.collect("generator.out_norm", out);
    out_conv_.collect("generator.out_conv", out);
    return out;
  }

  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }

 private:
  NetworkConfig cfg_;
  nn::Linear project_;
  std::vector<ResidualBlock> blocks_;
  nn::LayerNorm out_norm_;
  nn::Conv2d out_conv_;
};

/// image [N, C, S, S] -> score [N]. Only per-sample normalization is used,
/// so each score depends on its own sample alone.
class Critic {
 public:
  Critic() = default;

  static Critic create(const NetworkConfig& cfg, std::mt19937_64& rng, const InitScheme& scheme = {}) {
    cfg.validate();
    Critic c;
    c.cfg_ = cfg;
    const auto stages = cfg.stages();
    c.in_conv_ = nn::Conv2d::create(cfg.image_channels, cfg.stage_channels(stages), 3, scheme, rng);
    for (std::size_t i = stages; i > 0; --i) {
      c.blocks_.push_back(ResidualBlock::create(cfg.stage_channels(i), cfg.stage_channels(i - 1),
                                                Resample::down, cfg.norm_eps, scheme, rng));
    }
    c.head_ = nn::Linear::create(cfg.base_channels * cfg.base_size * cfg.base_size, 1, scheme, rng);
    return c;
  }

  Tensor operator()(const Tensor& image) const {
    const Shape expected{cfg_.image_channels, cfg_.image_size, cfg_.image_size};
    if (image.rank() != 4 || Shape(image.shape().begin() + 1, image.shape().end()) != expected) {
      throw ShapeError("critic expects [N," + std::to_string(cfg_.image_channels) + "," +
                       std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                       "], got " + shape_str(image.shape()));
    }
    const auto n = image.dim(0);
    auto h = in_conv_(image);
    for (const auto& block : blocks_) h = block(h);
    h = ops::reshape(h, {n, h.numel() / n});
    return ops::reshape(head_(h), {n});
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }

  /// Zeroes the scalar head so every score is exactly zero.
  void zero_head() {
    std::ranges::fill(head_.weight.mutable_data(), 0.0);
    std::ranges::fill(head_.bias.mutable_data(), 0.0);
  }

  NamedTensors named_parameters() const {
    NamedTensors out;
    in_conv_.collect("critic.in_conv", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect("critic.block" + std::to_string(i), out);
    }
    head_.collect("critic.head", out);
    return out;
  }

  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }

 private:
  NetworkConfig cfg_;
  nn::Conv2d in_conv_;
  std::vector<ResidualBlock> blocks_;
  nn::Linear head_;
};

struct NetworkPair {
  Generator generator;
  Critic critic;
};

/// Reproducible initialization: the generator and critic draw from
/// independent streams derived from `seed`.
inline NetworkPair init_params(const NetworkConfig& cfg, std::uint64_t seed, const InitScheme& scheme = {}) {
  std::seed_seq gseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x67u};
  std::seed_seq dseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x64u};
  std::mt19937_64 grng(gseq), drng(dseq);
  return {Generator::create(cfg, grng, scheme), Critic::create(cfg, drng, scheme)};
}

}  // namespace latent_inpaint
