#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/image.hpp"
#include "latent_inpaint/parallel.hpp"

namespace latent_inpaint {

class IsolatedHoleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using LinearOperator = std::function<void(std::span<const double> in, std::span<double> out)>;

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
  double residual_inf = 0.0;
};

/// Conjugate gradients for a symmetric positive definite operator, started
/// from zero. Stops once |r|_2 <= tol |b|_2 and |r|_inf <= inf_tol.
inline CgResult solve_spd_system(const LinearOperator& apply, std::span<const double> b, double tol,
                                 std::size_t max_iter,
                                 double inf_tol = std::numeric_limits<double>::infinity()) {
  const auto n = b.size();
  auto dot = [](std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
  };
  auto max_abs = [](std::span<const double> u) {
    double m = 0.0;
    for (double v : u) m = std::max(m, std::abs(v));
    return m;
  };
  CgResult res;
  res.x.assign(n, 0.0);
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) return res;

  std::vector<double> r(b.begin(), b.end()), p = r, ap(n);
  double rr = dot(r, r);
  for (;;) {
    res.relative_residual = std::sqrt(rr) / bnorm;
    res.residual_inf = max_abs(r);
    if (res.relative_residual <= tol && res.residual_inf <= inf_tol) return res;
    if (res.iterations >= max_iter) {
      throw ConvergenceError("conjugate gradient did not converge in " + std::to_string(max_iter) +
                             " iterations (relative residual " + std::to_string(res.relative_residual) + ")");
    }
    apply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) throw ConvergenceError("conjugate gradient breakdown: operator not positive definite");
    const double alpha = rr / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_next = dot(r, r);
    const double beta = rr_next / rr;
    rr = rr_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    ++res.iterations;
  }
}

struct PoissonProblem {
  Image guidance;  // G(z_hat)
  Image boundary;  // y
  Mask mask;
  double tolerance = 1e-6;
  // 0 selects 10 x (number of hole pixels).
  std::size_t max_iterations = 0;
};

struct PoissonResult {
  Image image;
  // max over channels and hole pixels of |lap(x) - lap(g)| before clipping
  double residual_inf = 0.0;
  std::size_t iterations = 0;
};

namespace detail {

inline constexpr double kDynamicRange = 2.0;

struct HoleIndex {
  std::vector<std::ptrdiff_t> index;  // per pixel, -1 for known
  std::vector<std::size_t> pixels;    // per unknown, its pixel
};

inline HoleIndex index_holes(const Mask& m) {
  HoleIndex h;
  h.index.assign(m.known.size(), -1);
  for (std::size_t k = 0; k < m.known.size(); ++k) {
    if (!m.known[k]) {
      h.index[k] = static_cast<std::ptrdiff_t>(h.pixels.size());
      h.pixels.push_back(k);
    }
  }
  return h;
}

template <class Fn>
void for_each_neighbor(const Mask& m, std::size_t pixel, Fn&& fn) {
  const auto i = pixel / m.width, j = pixel % m.width;
  if (i > 0) fn(pixel - m.width);
  if (i + 1 < m.height) fn(pixel + m.width);
  if (j > 0) fn(pixel - 1);
  if (j + 1 < m.width) fn(pixel + 1);
}

// Every 4-connected hole component must touch a known pixel.
inline void require_anchored_holes(const Mask& m) {
  std::vector<std::uint8_t> seen(m.known.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.known.size(); ++start) {
    if (m.known[start] || seen[start]) continue;
    bool anchored = false;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      for_each_neighbor(m, p, [&](std::size_t q) {
        if (m.known[q]) {
          anchored = true;
        } else if (!seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      });
    }
    if (!anchored) {
      throw IsolatedHoleError("hole component containing pixel (" + std::to_string(start / m.width) + "," +
                              std::to_string(start % m.width) + ") has no known neighbour");
    }
  }
}

}  // namespace detail

/// Solves, per channel, lap(x) = lap(g) on hole pixels (5-point stencil,
/// neighbours restricted to the image) with x = y on known pixels. Hole
/// values are clipped to [-1, 1]; known pixels are copied from y.
inline PoissonResult poisson_blend(const PoissonProblem& problem) {
  const auto& g = problem.guidance;
  const auto& y = problem.boundary;
  const auto& m = problem.mask;
  if (!g.same_shape(y) || m.height != y.height || m.width != y.width) {
    throw ShapeError("poisson_blend: guidance, boundary and mask shapes differ");
  }
  detail::require_anchored_holes(m);
  const auto holes = detail::index_holes(m);
  PoissonResult result{y, 0.0, 0};
  const auto n = holes.pixels.size();
  if (n == 0) return result;
  const auto max_iter = problem.max_iterations ? problem.max_iterations : 10 * n;

  const LinearOperator apply = [&](std::span<const double> in, std::span<double> out) {
    for (std::size_t u = 0; u < n; ++u) {
      double acc = 0.0;
      detail::for_each_neighbor(m, holes.pixels[u], [&](std::size_t q) {
        acc += in[u];
        if (holes.index[q] >= 0) acc -= in[static_cast<std::size_t>(holes.index[q])];
      });
      out[u] = acc;
    }
  };

  std::vector<double> residuals(y.channels, 0.0);
  std::vector<std::size_t> iterations(y.channels, 0);
  parallel_for(y.channels, [&](std::size_t c) {
    const auto plane = c * y.pixels();
    std::vector<double> b(n, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
      const auto p = holes.pixels[u];
      detail::for_each_neighbor(m, p, [&](std::size_t q) {
        b[u] += g.values[plane + p] - g.values[plane + q];
        if (holes.index[q] < 0) b[u] += y.values[plane + q];
      });
    }
    auto cg = solve_spd_system(apply, b, problem.tolerance, max_iter,
                               problem.tolerance * detail::kDynamicRange);
    residuals[c] = cg.residual_inf;
    iterations[c] = cg.iterations;
    for (std::size_t u = 0; u < n; ++u) {
      result.image.values[plane + holes.pixels[u]] = std::clamp(cg.x[u], -1.0, 1.0);
    }
  });
  result.residual_inf = *std::max_element(residuals.begin(), residuals.end());
  result.iterations = *std::max_element(iterations.begin(), iterations.end());
  return result;
}

/// Sum over 4-adjacent pixel pairs touching a hole of
/// ((x_p - x_q) - (g_p - g_q))^2; the functional poisson_blend minimizes.
inline double guidance_energy(const Image& x, const Image& g, const Mask& m) {
  double e = 0.0;
  for (std::size_t c = 0; c < x.channels; ++c) {
    const auto plane = c * x.pixels();
    for (std::size_t p = 0; p < m.known.size(); ++p) {
      detail::for_each_neighbor(m, p, [&](std::size_t q) {
        if (q < p || (m.known[p] && m.known[q])) return;
        const double d = (x.values[plane + p] - x.values[plane + q]) - (g.values[plane + p] - g.values[plane + q]);
        e += d * d;
      });
    }
  }
  return e;
}

}  // namespace latent_inpaint
