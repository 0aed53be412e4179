#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/autograd.hpp"
#include "latent_inpaint/dataset.hpp"
#include "latent_inpaint/networks.hpp"
#include "latent_inpaint/ops.hpp"
#include "latent_inpaint/random.hpp"

namespace latent_inpaint {

struct TrainConfig {
  std::uint64_t iterations = 50000;
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.9;
  double adam_eps = 1e-8;
  std::size_t latent_dim = 128;
  double gp_lambda = 10.0;
  std::size_t critic_steps_per_gen = 5;
  std::uint64_t seed = 0;
  bool hflip_augment = true;
  std::uint64_t checkpoint_every = 1000;

  void validate() const {
    if (iterations == 0 || batch_size == 0 || latent_dim == 0 || critic_steps_per_gen == 0 ||
        checkpoint_every == 0) {
      throw std::invalid_argument("train config: counts must be positive");
    }
    if (!(learning_rate > 0.0) || !(adam_eps > 0.0) || gp_lambda < 0.0) {
      throw std::invalid_argument("train config: learning_rate, adam_eps must be > 0, gp_lambda >= 0");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw std::invalid_argument("train config: adam betas must lie in [0, 1)");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  static AdamState for_parameters(const std::vector<Tensor>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update applied in place to leaf parameters.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
                      const AdamHyper& hp) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads length mismatch");
  if (state.m.empty()) state = AdamState::for_parameters(params);
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match params");
  ++state.t;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_data();
    auto g = grads[k].data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct CriticLoss {
  Tensor loss;
  // mean D(fake) - mean D(real)
  double wasserstein_term = 0.0;
  // gp_lambda * mean((|grad D(x_hat)| - 1)^2)
  double gp_term = 0.0;

  double wasserstein_estimate() const { return -wasserstein_term; }
};

/// x_hat = eps * real + (1 - eps) * fake with one eps per sample.
inline Tensor interpolate_samples(const Tensor& real, const Tensor& fake, std::span<const double> eps) {
  ops::detail::require_same_shape("interpolate_samples", real, fake);
  const auto n = real.dim(0), per = real.numel() / n;
  if (eps.size() != n) throw ShapeError("interpolate_samples: need one epsilon per sample");
  std::vector<double> values(real.numel());
  auto r = real.data(), f = fake.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = s * per; k < (s + 1) * per; ++k) values[k] = eps[s] * r[k] + (1.0 - eps[s]) * f[k];
  return Tensor(real.shape(), std::move(values));
}

/// WGAN critic objective with gradient penalty. `fake` is treated as data
/// (no path back to the generator).
template <class CriticFn>
CriticLoss critic_loss(const Tensor& real, const Tensor& fake, CriticFn&& critic, double gp_lambda,
                       std::span<const double> eps) {
  ops::detail::require_same_shape("critic_loss", real, fake);
  const Tensor real_data = real.detach();
  const Tensor fake_data = fake.detach();
  auto wasserstein = ops::sub(ops::mean(critic(fake_data)), ops::mean(critic(real_data)));

  auto x_hat = interpolate_samples(real_data, fake_data, eps).set_requires_grad(true);
  auto norms = autograd::input_gradient_norm(critic, x_hat);
  auto penalty = ops::scale(ops::mean(ops::square(ops::add_scalar(norms, -1.0))), gp_lambda);

  CriticLoss out;
  out.loss = ops::add(wasserstein, penalty);
  out.wasserstein_term = wasserstein.item();
  out.gp_term = penalty.item();
  return out;
}

/// -mean D(G(z)).
template <class GeneratorFn, class CriticFn>
Tensor generator_loss(const Tensor& z, GeneratorFn&& generator, CriticFn&& critic) {
  return ops::neg(ops::mean(critic(generator(z))));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainState {
  Generator generator;
  Critic critic;
  AdamState generator_opt;
  AdamState critic_opt;
  // Number of completed iterations.
  std::uint64_t iteration = 0;
};

inline TrainState make_train_state(const NetworkConfig& net, std::uint64_t seed) {
  auto nets = init_params(net, seed);
  TrainState s{nets.generator, nets.critic, {}, {}, 0};
  s.generator_opt = AdamState::for_parameters(s.generator.parameters());
  s.critic_opt = AdamState::for_parameters(s.critic.parameters());
  return s;
}

struct IterationLog {
  std::uint64_t iteration = 0;
  double critic_loss = 0.0;
  double wasserstein_estimate = 0.0;
  double gp_term = 0.0;
  double gen_loss = 0.0;

  bool operator==(const IterationLog&) const = default;
};

struct TrainHooks {
  std::function<void(const IterationLog&)> on_iteration;
  std::function<void(const TrainState&)> on_checkpoint;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::uint64_t iteration, const std::string& what)
      : std::runtime_error("training aborted at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  std::uint64_t iteration() const { return iteration_; }

 private:
  std::uint64_t iteration_;
};

/// Runs iterations state.iteration + 1 .. cfg.iterations. Each iteration
/// performs critic_steps_per_gen critic updates and one generator update.
/// All randomness of iteration i derives from (seed, i), so a resumed run
/// reproduces the uninterrupted trajectory. Checkpoints are emitted every
/// checkpoint_every iterations and after the last one.
inline void train(const TrainConfig& cfg, const Dataset& data, TrainState& state, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.images.empty()) throw DataError("training dataset is empty");
  const auto& net = state.generator.config();
  if (net.latent_dim != cfg.latent_dim) throw std::invalid_argument("latent_dim differs from network config");
  if (net.image_channels != data.channels || net.image_size != data.size) {
    throw DataError("dataset shape does not match the network");
  }
  Dataset batches = data;
  batches.augment_hflip = cfg.hflip_augment;

  auto gen_params = state.generator.parameters();
  auto critic_params = state.critic.parameters();
  const AdamHyper hp{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  const auto& generator = state.generator;
  const auto& critic = state.critic;

  while (state.iteration < cfg.iterations) {
    const std::uint64_t it = state.iteration + 1;
    IterationLog log{it};
    try {
      for (std::size_t step = 0; step < cfg.critic_steps_per_gen; ++step) {
        auto rng = derive_rng({cfg.seed, it, step});
        auto real = sample_batch(batches, cfg.batch_size, rng);
        Tensor z({cfg.batch_size, cfg.latent_dim}, normal_samples(rng, cfg.batch_size * cfg.latent_dim));
        Tensor fake;
        {
          NoGradGuard no_grad;
          fake = generator(z);
        }
        auto eps = uniform_samples(rng, cfg.batch_size);
        auto terms = critic_loss(real, fake, critic, cfg.gp_lambda, eps);
        auto grads = autograd::grad(terms.loss, critic_params);
        adam_step(critic_params, grads, state.critic_opt, hp);
        log.critic_loss = terms.loss.item();
        log.wasserstein_estimate = terms.wasserstein_estimate();
        log.gp_term = terms.gp_term;
      }
      auto rng = derive_rng({cfg.seed, it, cfg.critic_steps_per_gen});
      Tensor z({cfg.batch_size, cfg.latent_dim}, normal_samples(rng, cfg.batch_size * cfg.latent_dim));
      auto loss = generator_loss(z, generator, critic);
      auto grads = autograd::grad(loss, gen_params);
      adam_step(gen_params, grads, state.generator_opt, hp);
      log.gen_loss = loss.item();
    } catch (const NumericalError& e) {
      throw TrainingAborted(it, e.what());
    }
    state.iteration = it;
    if (hooks.on_iteration) hooks.on_iteration(log);
    if (hooks.on_checkpoint && (it % cfg.checkpoint_every == 0 || it == cfg.iterations)) {
      hooks.on_checkpoint(state);
    }
  }
}

}  // namespace latent_inpaint
