#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/autograd.hpp"
#include "latent_inpaint/image.hpp"
#include "latent_inpaint/ops.hpp"
#include "latent_inpaint/parallel.hpp"
#include "latent_inpaint/poisson.hpp"
#include "latent_inpaint/random.hpp"
#include "latent_inpaint/wgan.hpp"

namespace latent_inpaint {

struct InpaintConfig {
  double alpha = 0.1;  // contextual weight
  double beta = 0.9;   // gradient weight
  double eta = 0.5;    // prior weight
  std::size_t window = 7;
  std::size_t iterations = 1000;
  double adam_lr = 0.03;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double z_min = -1.0;
  double z_max = 1.0;
  std::size_t restarts = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || eta < 0.0) throw std::invalid_argument("loss weights must be >= 0");
    if (window == 0 || window % 2 == 0) throw std::invalid_argument("weight window must be odd");
    if (iterations == 0 || restarts == 0) throw std::invalid_argument("iterations and restarts must be >= 1");
    if (!(adam_lr > 0.0) || !(z_min < z_max)) throw std::invalid_argument("invalid optimizer settings");
  }

  bool operator==(const InpaintConfig&) const = default;
};

struct WeightMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * width + j]; }
  bool all_zero() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
  }
};

/// W(i) = (hole pixels in the window around i) / (window pixels inside the
/// image) for known i, and 0 on holes. Windows are truncated at the border.
inline WeightMap compute_weight_map(const Mask& mask, std::size_t window) {
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("weight window must be odd and >= 1");
  const auto h = mask.height, w = mask.width;
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  // Summed-area tables of hole indicators and of in-image pixels.
  std::vector<std::size_t> holes((h + 1) * (w + 1), 0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      holes[(i + 1) * (w + 1) + j + 1] = (mask.at(i, j) ? 0 : 1) + holes[i * (w + 1) + j + 1] +
                                         holes[(i + 1) * (w + 1) + j] - holes[i * (w + 1) + j];
  WeightMap out{h, w, std::vector<double>(h * w, 0.0)};
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      if (!mask.at(i, j)) continue;
      const auto i0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - r));
      const auto j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(j) - r));
      const auto i1 = std::min(h, i + static_cast<std::size_t>(r) + 1);
      const auto j1 = std::min(w, j + static_cast<std::size_t>(r) + 1);
      const auto count = holes[i1 * (w + 1) + j1] - holes[i0 * (w + 1) + j1] - holes[i1 * (w + 1) + j0] +
                         holes[i0 * (w + 1) + j0];
      const auto area = (i1 - i0) * (j1 - j0);
      out.values[i * w + j] = static_cast<double>(count) / static_cast<double>(area);
    }
  }
  return out;
}

/// Constant data of one inpainting problem, shared by every loss evaluation.
class InpaintProblem {
 public:
  /// Builds the problem for y [C,H,W] and mask M. When the mask has no hole
  /// the weight map vanishes identically; the contextual terms then weight
  /// every known pixel by 1 instead (uniform_weights() reports this).
  InpaintProblem(const Image& y, const Mask& mask, std::size_t window)
      : y_(y), mask_(mask), weights_(compute_weight_map(mask, window)) {
    if (mask.height != y.height || mask.width != y.width) throw ShapeError("mask and image sizes differ");
    std::vector<double> per_pixel = weights_.values;
    if (weights_.all_zero()) {
      uniform_ = true;
      for (std::size_t k = 0; k < per_pixel.size(); ++k) per_pixel[k] = mask.known[k] ? 1.0 : 0.0;
    }
    std::vector<double> wm(y.values.size());
    for (std::size_t c = 0; c < y.channels; ++c)
      for (std::size_t k = 0; k < y.pixels(); ++k)
        wm[c * y.pixels() + k] = per_pixel[k] * static_cast<double>(mask.known[k]);
    pixel_weights_ = Tensor({1, y.channels, y.height, y.width}, std::move(wm));
    target_ = image_to_tensor(y);
    dx_ = ops::difference_stencil(y.height, y.width, ops::Axis::x, mask.known);
    dy_ = ops::difference_stencil(y.height, y.width, ops::Axis::y, mask.known);
  }

  const Image& damaged() const { return y_; }
  const Mask& mask() const { return mask_; }
  const WeightMap& weight_map() const { return weights_; }
  bool uniform_weights() const { return uniform_; }
  const Tensor& target() const { return target_; }
  const Tensor& pixel_weights() const { return pixel_weights_; }
  const ops::StencilPtr& dx() const { return dx_; }
  const ops::StencilPtr& dy() const { return dy_; }

 private:
  Image y_;
  Mask mask_;
  WeightMap weights_;
  bool uniform_ = false;
  Tensor target_;
  Tensor pixel_weights_;  // W * M broadcast over channels
  ops::StencilPtr dx_, dy_;
};

using ImageDecoder = std::function<Tensor(const Tensor&)>;
using ImageCritic = std::function<Tensor(const Tensor&)>;

/// sum_i W(i) M(i) |G(z)(i) - y(i)| over pixels and channels.
inline Tensor contextual_loss(const Tensor& generated, const InpaintProblem& p) {
  ops::detail::require_same_shape("contextual_loss", generated, p.target());
  return ops::sum(ops::mul(p.pixel_weights(), ops::abs(ops::sub(generated, p.target()))));
}

/// sum_i W(i) M(i) (|d_x(G(z) - y)|(i) + |d_y(G(z) - y)|(i)); differences
/// only use known pixels (central, else forward, else backward).
inline Tensor gradient_loss(const Tensor& generated, const InpaintProblem& p) {
  ops::detail::require_same_shape("gradient_loss", generated, p.target());
  auto diff = ops::sub(generated, p.target());
  auto gx = ops::abs(ops::apply_stencil(diff, p.dx()));
  auto gy = ops::abs(ops::apply_stencil(diff, p.dy()));
  return ops::sum(ops::mul(p.pixel_weights(), ops::add(gx, gy)));
}

/// -D(G(z)), summed over the batch.
inline Tensor prior_loss(const Tensor& generated, const ImageCritic& critic) {
  return ops::neg(ops::sum(critic(generated)));
}

struct LossTerms {
  Tensor total;
  double contextual = 0.0;
  double gradient = 0.0;
  double prior = 0.0;
};

/// alpha L_c + beta L_g + eta L_p at latent z. The prior term (and the
/// critic) is skipped entirely when eta == 0.
inline LossTerms total_loss(const Tensor& z, const InpaintProblem& p, const InpaintConfig& cfg,
                            const ImageDecoder& generator, const ImageCritic& critic) {
  auto generated = generator(z);
  auto lc = contextual_loss(generated, p);
  auto lg = gradient_loss(generated, p);
  LossTerms out;
  out.contextual = lc.item();
  out.gradient = lg.item();
  out.total = ops::add(ops::scale(lc, cfg.alpha), ops::scale(lg, cfg.beta));
  if (cfg.eta != 0.0) {
    if (!critic) throw std::invalid_argument("prior weight is nonzero but no critic was given");
    auto lp = prior_loss(generated, critic);
    out.prior = lp.item();
    out.total = ops::add(out.total, ops::scale(lp, cfg.eta));
  }
  return out;
}

struct TraceEntry {
  std::size_t restart = 0;
  std::size_t iteration = 0;
  double loss = 0.0;
  double best_loss = 0.0;
};

struct EncodingResult {
  Tensor z;  // [1, latent]
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_restart = 0;
  std::vector<TraceEntry> trace;
  std::vector<std::size_t> failed_restarts;
};

namespace detail {

struct RestartOutcome {
  bool ok = false;
  std::vector<double> best_z;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<TraceEntry> trace;
};

inline RestartOutcome run_restart(const InpaintProblem& problem, const ImageDecoder& generator,
                                  const ImageCritic& critic, std::size_t latent_dim, const InpaintConfig& cfg,
                                  std::uint64_t seed, std::size_t restart) {
  RestartOutcome out;
  auto rng = derive_rng({seed, restart, 0x7a});
  Tensor z({1, latent_dim}, normal_samples(rng, latent_dim), true);
  std::vector<Tensor> params{z};
  AdamState opt = AdamState::for_parameters(params);
  const AdamHyper hp{cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  try {
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      auto terms = total_loss(z, problem, cfg, generator, critic);
      const double loss = terms.total.item();
      if (loss < out.best_loss) {
        out.best_loss = loss;
        out.best_z.assign(z.data().begin(), z.data().end());
      }
      out.trace.push_back({restart, it, loss, out.best_loss});
      auto g = autograd::grad(terms.total, params);
      adam_step(params, g, opt, hp);
      for (auto& v : z.mutable_data()) v = std::clamp(v, cfg.z_min, cfg.z_max);
    }
    out.ok = true;
  } catch (const NumericalError&) {
    out.ok = false;
  }
  return out;
}

}  // namespace detail

/// Adam on the latent code with z clamped after every step; keeps the code
/// with the lowest loss seen over all iterations and restarts. Restarts are
/// independent and may run concurrently; the result does not depend on the
/// thread count.
inline EncodingResult find_closest_encoding(const InpaintProblem& problem, const ImageDecoder& generator,
                                            const ImageCritic& critic, std::size_t latent_dim,
                                            const InpaintConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<detail::RestartOutcome> outcomes(cfg.restarts);
  parallel_for(cfg.restarts, [&](std::size_t r) {
    outcomes[r] = detail::run_restart(problem, generator, critic, latent_dim, cfg, seed, r);
  });
  EncodingResult result;
  for (std::size_t r = 0; r < outcomes.size(); ++r) {
    auto& o = outcomes[r];
    result.trace.insert(result.trace.end(), o.trace.begin(), o.trace.end());
    if (!o.ok) {
      result.failed_restarts.push_back(r);
      continue;
    }
    if (o.best_loss < result.best_loss) {
      result.best_loss = o.best_loss;
      result.best_restart = r;
      result.z = Tensor({1, latent_dim}, o.best_z);
    }
  }
  if (!result.z.defined()) throw NumericalError("every inpainting restart hit a non-finite loss");
  return result;
}

enum class Blend { overlay, poisson };

inline Blend parse_blend(const std::string& name) {
  if (name == "overlay") return Blend::overlay;
  if (name == "poisson") return Blend::poisson;
  throw std::invalid_argument("unknown blend mode '" + name + "'");
}

/// Known pixels always come from y. Holes take the generated values
/// (overlay) or the Poisson solution guided by them.
inline Image composite(const Image& y, const Mask& m, const Image& generated, Blend blend,
                       double poisson_tolerance = 1e-6) {
  if (!y.same_shape(generated) || m.height != y.height || m.width != y.width) {
    throw ShapeError("composite: shapes differ");
  }
  if (blend == Blend::poisson) {
    return poisson_blend({generated, y, m, poisson_tolerance, 0}).image;
  }
  Image out = y;
  for (std::size_t c = 0; c < y.channels; ++c)
    for (std::size_t k = 0; k < y.pixels(); ++k)
      if (!m.known[k]) out.values[c * y.pixels() + k] = generated.values[c * y.pixels() + k];
  return out;
}

}  // namespace latent_inpaint
