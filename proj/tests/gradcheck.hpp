#pragma once

// Central finite-difference gradient checking. Written against the public
// Tensor API only; it never consults the reverse rules it is checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "latent_inpaint/autograd.hpp"
#include "latent_inpaint/ops.hpp"

namespace gradcheck {

using latent_inpaint::Tensor;
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Options {
  double h = 1e-3;
  double tolerance = 1e-4;
  // Denominator floor of the relative error.
  double floor = 1e-3;
  // Coordinates checked per input; 0 checks all of them.
  std::size_t max_coords = 0;
  // Retries when a stencil straddles a ReLU/abs kink.
  std::size_t kink_retries = 8;
};

struct Report {
  double max_error = 0.0;
  std::size_t checked = 0;
  std::size_t resampled = 0;
  std::size_t unresolved = 0;
  std::string worst;

  bool passed(double tol) const { return unresolved == 0 && max_error <= tol && checked > 0; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct Probe {
  double value;
  std::uint64_t pattern;
};

inline Probe evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  latent_inpaint::ops::detail::KinkProbe probe;
  auto* saved = latent_inpaint::ops::detail::kink_probe;
  latent_inpaint::ops::detail::kink_probe = &probe;
  double v = 0.0;
  try {
    latent_inpaint::NoGradGuard no_grad;
    v = f(inputs).item();
  } catch (...) {
    latent_inpaint::ops::detail::kink_probe = saved;
    throw;
  }
  latent_inpaint::ops::detail::kink_probe = saved;
  return {v, probe.hash};
}

inline std::vector<std::vector<double>> analytic_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  auto y = f(inputs);
  std::vector<std::vector<double>> out;
  if (!y.requires_grad()) {
    // Constant in every input (e.g. the derivative of a linear map).
    for (const auto& t : inputs) out.emplace_back(t.numel(), 0.0);
    return out;
  }
  auto grads = latent_inpaint::autograd::grad(y, inputs);
  for (const auto& g : grads) out.emplace_back(g.data().begin(), g.data().end());
  return out;
}

/// Compares autograd against central differences for every (sampled)
/// coordinate of every input. Inputs must be leaves with requires_grad.
/// When the stencil points see different ReLU/abs sign patterns the
/// coordinate is moved by a random offset and checked again.
inline Report check(const ScalarFn& f, std::vector<Tensor> inputs, std::mt19937_64& rng, const Options& opt = {}) {
  Report rep;
  auto analytic = analytic_gradients(f, inputs);
  std::uniform_real_distribution<double> jitter(-20.0 * opt.h, 20.0 * opt.h);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto n = inputs[t].numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t k = 0; k < n; ++k) coords[k] = k;
    if (opt.max_coords && n > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
    }
    for (auto k : coords) {
      bool resolved = false;
      for (std::size_t attempt = 0; attempt <= opt.kink_retries; ++attempt) {
        auto data = inputs[t].mutable_data();
        const double x0 = data[k];
        auto at = [&](double offset) {
          data[k] = x0 + offset;
          return evaluate(f, inputs);
        };
        const auto p2 = at(2.0 * opt.h), p1 = at(opt.h), m1 = at(-opt.h), m2 = at(-2.0 * opt.h);
        data[k] = x0;
        if (p2.pattern != m2.pattern || p1.pattern != p2.pattern || m1.pattern != m2.pattern) {
          ++rep.resampled;
          data[k] = x0 + jitter(rng);
          analytic = analytic_gradients(f, inputs);
          continue;
        }
        // Five-point central stencil; truncation error is O(h^4).
        const double numeric = (8.0 * (p1.value - m1.value) - (p2.value - m2.value)) / (12.0 * opt.h);
        const double err = relative_error(analytic[t][k], numeric, opt.floor);
        if (err > rep.max_error) {
          rep.max_error = err;
          rep.worst = "input " + std::to_string(t) + " coord " + std::to_string(k) + ": analytic " +
                      std::to_string(analytic[t][k]) + " numeric " + std::to_string(numeric);
        }
        ++rep.checked;
        resolved = true;
        break;
      }
      if (!resolved) ++rep.unresolved;
    }
  }
  return rep;
}

/// Leaf tensor with entries ~ U(lo, hi).
inline Tensor random_leaf(latent_inpaint::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(latent_inpaint::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Constant tensor used to contract an op's output to a scalar.
inline Tensor random_weights(const latent_inpaint::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(latent_inpaint::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(shape, std::move(v));
}

/// sum(op(inputs) * R) for a fixed random R matching the output shape.
inline ScalarFn contracted(std::function<Tensor(const std::vector<Tensor>&)> op, const std::vector<Tensor>& inputs,
                           std::mt19937_64& rng) {
  Tensor probe;
  {
    latent_inpaint::NoGradGuard no_grad;
    probe = op(inputs);
  }
  auto r = random_weights(probe.shape(), rng);
  return [op, r](const std::vector<Tensor>& in) { return latent_inpaint::ops::sum(latent_inpaint::ops::mul(op(in), r)); };
}

/// First-order gradient of `f` contracted with random weights; checking it
/// exercises every reverse rule's own reverse rule.
inline ScalarFn second_order(const ScalarFn& f, const std::vector<Tensor>& inputs, std::mt19937_64& rng) {
  std::vector<Tensor> weights;
  for (const auto& t : inputs) weights.push_back(random_weights(t.shape(), rng));
  return [f, weights](const std::vector<Tensor>& in) {
    latent_inpaint::EnableGradGuard enable(true);
    auto grads = latent_inpaint::autograd::grad(f(in), in, true);
    Tensor total = latent_inpaint::ops::sum(latent_inpaint::ops::mul(grads[0], weights[0]));
    for (std::size_t k = 1; k < grads.size(); ++k) {
      total = latent_inpaint::ops::add(total, latent_inpaint::ops::sum(latent_inpaint::ops::mul(grads[k], weights[k])));
    }
    return total;
  };
}

}  // namespace gradcheck
