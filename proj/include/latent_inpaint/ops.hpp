#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latent_inpaint/tensor.hpp"

// Differentiable primitives. Every reverse rule is written in terms of other
// primitives, so gradients can be recorded and differentiated again
// (double backprop). Linear operators come in adjoint pairs whose rules
// reference each other.

namespace latent_inpaint::ops {

namespace detail {

using latent_inpaint::detail::make_result;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

// Folds the sign pattern of every kink-carrying activation evaluated while
// installed. Gradient checkers compare patterns at x+h and x-h to detect
// finite-difference stencils that straddle a kink.
struct KinkProbe {
  std::uint64_t hash = 1469598103934665603ull;
  void record(double v) {
    hash ^= (v > 0.0) ? 0x9e3779b97f4a7c15ull : 0x7f4a7c159e3779b9ull;
    hash *= 1099511628211ull;
  }
};

inline thread_local KinkProbe* kink_probe = nullptr;

template <class F>
std::vector<double> map_values(std::span<const double> in, F&& f) {
  std::vector<double> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), f);
  return out;
}

template <class F>
std::vector<double> zip_values(std::span<const double> a, std::span<const double> b, F&& f) {
  std::vector<double> out(a.size());
  std::transform(a.begin(), a.end(), b.begin(), out.begin(), f);
  return out;
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline bool broadcastable_to(const Shape& from, const Shape& to) {
  if (from.size() != to.size()) return false;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] != to[i] && from[i] != 1) return false;
  }
  return true;
}

// For every element of `to`, the linear index of its source element in `from`.
inline std::vector<std::size_t> broadcast_index_map(const Shape& from, const Shape& to) {
  const std::size_t rank = to.size();
  std::vector<std::size_t> src_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    src_stride[i] = (from[i] == 1 && to[i] != 1) ? 0 : stride;
    stride *= from[i];
  }
  std::vector<std::size_t> map(shape_numel(to));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < map.size(); ++lin) {
    map[lin] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < to[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting and shape
// ---------------------------------------------------------------------------

Tensor reduce_to(const Tensor& x, const Shape& target);

/// Repeats size-1 axes of `x` to reach `target` (equal rank required).
inline Tensor expand(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  if (!detail::broadcastable_to(x.shape(), target)) {
    throw ShapeError("expand: " + shape_str(x.shape()) + " not broadcastable to " +
                     shape_str(target));
  }
  auto map = detail::broadcast_index_map(x.shape(), target);
  std::vector<double> out(map.size());
  auto src = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = src[map[i]];
  Shape source_shape = x.shape();
  return detail::make_result(
      "expand", target, std::move(out), {x},
      [source_shape](const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{reduce_to(g, source_shape)};
      });
}

/// Sums `x` over the axes where `target` has extent 1. Adjoint of expand.
inline Tensor reduce_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  if (!detail::broadcastable_to(target, x.shape())) {
    throw ShapeError("reduce_to: " + shape_str(x.shape()) + " cannot reduce to " +
                     shape_str(target));
  }
  auto map = detail::broadcast_index_map(target, x.shape());
  std::vector<double> out(shape_numel(target), 0.0);
  auto src = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += src[i];
  Shape source_shape = x.shape();
  return detail::make_result(
      "reduce_to", target, std::move(out), {x},
      [source_shape](const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{expand(g, source_shape)};
      });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  if (shape == x.shape()) return x;
  Shape source_shape = x.shape();
  std::vector<double> values(x.data().begin(), x.data().end());
  return detail::make_result(
      "reshape", std::move(shape), std::move(values), {x},
      [source_shape](const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{reshape(g, source_shape)};
      });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  auto src = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return detail::make_result("transpose", {cols, rows}, std::move(out), {x},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{transpose(g)};
                             });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    auto s = detail::broadcast_shape(a.shape(), b.shape());
    return add(expand(a, s), expand(b, s));
  }
  return detail::make_result("add", a.shape(), detail::zip_values(a.data(), b.data(), std::plus<>()),
                             {a, b},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{g, g};
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    auto s = detail::broadcast_shape(a.shape(), b.shape());
    return sub(expand(a, s), expand(b, s));
  }
  return detail::make_result("sub", a.shape(),
                             detail::zip_values(a.data(), b.data(), std::minus<>()), {a, b},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
                               std::vector<Tensor> r(2);
                               r[0] = g;
                               if (needs[1]) r[1] = scale(g, -1.0);
                               return r;
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    auto s = detail::broadcast_shape(a.shape(), b.shape());
    return mul(expand(a, s), expand(b, s));
  }
  return detail::make_result(
      "mul", a.shape(), detail::zip_values(a.data(), b.data(), std::multiplies<>()), {a, b},
      [a, b](const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = mul(g, b);
        if (needs[1]) r[1] = mul(g, a);
        return r;
      });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::make_result("scale", x.shape(),
                             detail::map_values(x.data(), [factor](double v) { return v * factor; }),
                             {x},
                             [factor](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{scale(g, factor)};
                             });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double offset) {
  return detail::make_result("add_scalar", x.shape(),
                             detail::map_values(x.data(), [offset](double v) { return v + offset; }),
                             {x},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{g};
                             });
}

inline Tensor square(const Tensor& x) {
  return detail::make_result("square", x.shape(),
                             detail::map_values(x.data(), [](double v) { return v * v; }), {x},
                             [x](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{mul(g, scale(x, 2.0))};
                             });
}

Tensor reciprocal(const Tensor& x);

inline Tensor sqrt(const Tensor& x) {
  return detail::make_result(
      "sqrt", x.shape(), detail::map_values(x.data(), [](double v) { return std::sqrt(v); }), {x},
      [](const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, scale(reciprocal(out), 0.5))};
      });
}

inline Tensor reciprocal(const Tensor& x) {
  return detail::make_result(
      "reciprocal", x.shape(), detail::map_values(x.data(), [](double v) { return 1.0 / v; }),
      {x}, [](const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{scale(mul(g, square(out)), -1.0)};
      });
}

inline Tensor tanh(const Tensor& x) {
  return detail::make_result(
      "tanh", x.shape(), detail::map_values(x.data(), [](double v) { return std::tanh(v); }), {x},
      [](const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        auto slope = add_scalar(scale(square(out), -1.0), 1.0);
        return std::vector<Tensor>{mul(g, slope)};
      });
}

/// Rectifier. The reverse rule multiplies by the forward's 0/1 mask, which is
/// a constant of the tape, so the second derivative is zero almost everywhere.
inline Tensor relu(const Tensor& x) {
  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> mask(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (detail::kink_probe) detail::kink_probe->record(in[i]);
    mask[i] = in[i] > 0.0 ? 1.0 : 0.0;
    out[i] = in[i] * mask[i];
  }
  Tensor mask_t(x.shape(), std::move(mask));
  return detail::make_result("relu", x.shape(), std::move(out), {x},
                             [mask_t](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{mul(g, mask_t)};
                             });
}

inline Tensor abs(const Tensor& x) {
  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> sign(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (detail::kink_probe) detail::kink_probe->record(in[i]);
    sign[i] = in[i] > 0.0 ? 1.0 : (in[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::abs(in[i]);
  }
  Tensor sign_t(x.shape(), std::move(sign));
  return detail::make_result("abs", x.shape(), std::move(out), {x},
                             [sign_t](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{mul(g, sign_t)};
                             });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum of all elements, shape [1].
inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Shape source_shape = x.shape();
  return detail::make_result(
      "sum", {1}, {total}, {x},
      [source_shape](const Tensor&, const Tensor& g, const std::vector<bool>&) {
        Shape ones(source_shape.size(), 1);
        return std::vector<Tensor>{expand(reshape(g, ones), source_shape)};
      });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Per-sample sum over all non-batch axes: [N, ...] -> [N].
inline Tensor sum_per_sample(const Tensor& x) {
  Shape target(x.rank(), 1);
  target[0] = x.dim(0);
  return reshape(reduce_to(x, target), {x.dim(0)});
}

// ---------------------------------------------------------------------------
// Dense and convolution
// ---------------------------------------------------------------------------

Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::MatrixMap(out.data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), k, n);
  return detail::make_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = matmul_nt(g, b);
        if (needs[1]) r[1] = matmul_tn(a, g);
        return r;
      });
}

// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n);
  detail::MatrixMap(out.data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), n, k).transpose();
  return detail::make_result(
      "matmul_nt", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = matmul(g, b);
        if (needs[1]) r[1] = matmul_tn(g, a);
        return r;
      });
}

// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: incompatible " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  const auto k = a.dim(0), m = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::MatrixMap(out.data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), k, m).transpose() * detail::ConstMatrixMap(b.data().data(), k, n);
  return detail::make_result(
      "matmul_tn", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = matmul_nt(b, g);
        if (needs[1]) r[1] = matmul(a, g);
        return r;
      });
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t filters, kernel, stride, pad;
  std::size_t out_height, out_width;

  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_height * out_width; }
};

namespace detail {

inline ConvGeometry conv_geometry(const Shape& input, std::size_t in_channels_kernel,
                                  std::size_t filters, std::size_t kernel, std::size_t stride,
                                  std::size_t pad) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(input));
  if (kernel < 1 || stride < 1) throw ShapeError("conv2d: kernel and stride must be >= 1");
  if (input[1] != in_channels_kernel) {
    throw ShapeError("conv2d: input has " + std::to_string(input[1]) + " channels, kernel expects " +
                     std::to_string(in_channels_kernel));
  }
  ConvGeometry g{input[0], input[1], input[2], input[3], filters, kernel, stride, pad, 0, 0};
  const std::size_t ph = g.height + 2 * pad, pw = g.width + 2 * pad;
  if (ph < kernel || pw < kernel) throw ShapeError("conv2d: kernel larger than padded input");
  if ((ph - kernel) % stride != 0 || (pw - kernel) % stride != 0) {
    throw ShapeError("conv2d: output size is not exact for stride " + std::to_string(stride));
  }
  g.out_height = (ph - kernel) / stride + 1;
  g.out_width = (pw - kernel) / stride + 1;
  return g;
}

// cols: [C*k*k, ld] for one sample, filling columns [0, Ho*Wo).
inline void im2col(const double* x, const ConvGeometry& g, double* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld;
        for (std::size_t oi = 0; oi < g.out_height; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t oj = 0; oj < g.out_width; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.height) &&
                                jj < static_cast<std::ptrdiff_t>(g.width);
            row[oi * g.out_width + oj] =
                inside ? x[(c * g.height + static_cast<std::size_t>(ii)) * g.width +
                           static_cast<std::size_t>(jj)]
                       : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* x, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld;
        for (std::size_t oi = 0; oi < g.out_height; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t oj = 0; oj < g.out_width; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) continue;
            x[(c * g.height + static_cast<std::size_t>(ii)) * g.width + static_cast<std::size_t>(jj)] +=
                row[oi * g.out_width + oj];
          }
        }
      }
    }
  }
}

// Whole-batch patch matrix [C*k*k, N*Ho*Wo]; sample n owns columns
// [n*Ho*Wo, (n+1)*Ho*Wo).
inline std::vector<double> batch_im2col(const Tensor& input, const ConvGeometry& g) {
  const auto np = g.out_pixels(), ld = g.batch * np;
  std::vector<double> cols(g.patch() * ld);
  const auto sample = g.in_channels * g.height * g.width;
  for (std::size_t n = 0; n < g.batch; ++n) im2col(input.data().data() + n * sample, g, cols.data() + n * np, ld);
  return cols;
}

// [N, F, P] <-> [F, N*P]
inline std::vector<double> to_feature_major(std::span<const double> x, std::size_t n, std::size_t f,
                                            std::size_t p) {
  std::vector<double> out(x.size());
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < f; ++b)
      std::copy_n(x.data() + (a * f + b) * p, p, out.data() + (b * n + a) * p);
  return out;
}

inline std::vector<double> from_feature_major(std::span<const double> x, std::size_t n, std::size_t f,
                                              std::size_t p) {
  std::vector<double> out(x.size());
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < f; ++b)
      std::copy_n(x.data() + (b * n + a) * p, p, out.data() + (a * f + b) * p);
  return out;
}

}  // namespace detail

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         std::size_t stride, std::size_t pad);
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::size_t kernel_size,
                          std::size_t stride, std::size_t pad);

/// Cross-correlation of input [N,C,H,W] with kernel [F,C,k,k].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t pad = 0) {
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3)) {
    throw ShapeError("conv2d: kernel must be [F,C,k,k], got " + shape_str(kernel.shape()));
  }
  auto g = detail::conv_geometry(input.shape(), kernel.dim(1), kernel.dim(0), kernel.dim(2), stride, pad);
  const auto np = g.out_pixels(), patch = g.patch(), ld = g.batch * np;
  const auto cols = detail::batch_im2col(input, g);
  std::vector<double> fm(g.filters * ld);
  detail::MatrixMap(fm.data(), g.filters, ld).noalias() =
      detail::ConstMatrixMap(kernel.data().data(), g.filters, patch) *
      detail::ConstMatrixMap(cols.data(), patch, ld);
  auto out = detail::from_feature_major(fm, g.batch, g.filters, np);
  Shape in_shape = input.shape();
  return detail::make_result(
      "conv2d", {g.batch, g.filters, g.out_height, g.out_width}, std::move(out), {input, kernel},
      [input, kernel, in_shape, stride, pad](const Tensor&, const Tensor& grad,
                                             const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d_input_grad(grad, kernel, in_shape, stride, pad);
        if (needs[1]) r[1] = conv2d_weight_grad(input, grad, kernel.dim(2), stride, pad);
        return r;
      });
}

/// Adjoint of conv2d with respect to its input.
inline Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                                std::size_t stride, std::size_t pad) {
  auto g = detail::conv_geometry(input_shape, kernel.dim(1), kernel.dim(0), kernel.dim(2), stride, pad);
  if (grad_out.shape() != Shape{g.batch, g.filters, g.out_height, g.out_width}) {
    throw ShapeError("conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  const auto np = g.out_pixels(), patch = g.patch(), ld = g.batch * np;
  const auto sample = g.in_channels * g.height * g.width;
  const auto gfm = detail::to_feature_major(grad_out.data(), g.batch, g.filters, np);
  std::vector<double> cols(patch * ld);
  detail::MatrixMap(cols.data(), patch, ld).noalias() =
      detail::ConstMatrixMap(kernel.data().data(), g.filters, patch).transpose() *
      detail::ConstMatrixMap(gfm.data(), g.filters, ld);
  std::vector<double> out(g.batch * sample, 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) detail::col2im(cols.data() + n * np, g, out.data() + n * sample, ld);
  return detail::make_result(
      "conv2d_input_grad", input_shape, std::move(out), {grad_out, kernel},
      [grad_out, kernel, stride, pad](const Tensor&, const Tensor& up, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d(up, kernel, stride, pad);
        if (needs[1]) r[1] = conv2d_weight_grad(up, grad_out, kernel.dim(2), stride, pad);
        return r;
      });
}

/// Adjoint of conv2d with respect to its kernel.
inline Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::size_t kernel_size,
                                 std::size_t stride, std::size_t pad) {
  if (grad_out.rank() != 4) throw ShapeError("conv2d_weight_grad: gradient must be rank 4");
  auto g = detail::conv_geometry(input.shape(), input.dim(1), grad_out.dim(1), kernel_size, stride, pad);
  if (grad_out.shape() != Shape{g.batch, g.filters, g.out_height, g.out_width}) {
    throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  const auto np = g.out_pixels(), patch = g.patch(), ld = g.batch * np;
  const auto cols = detail::batch_im2col(input, g);
  const auto gfm = detail::to_feature_major(grad_out.data(), g.batch, g.filters, np);
  std::vector<double> out(g.filters * patch);
  detail::MatrixMap(out.data(), g.filters, patch).noalias() =
      detail::ConstMatrixMap(gfm.data(), g.filters, ld) * detail::ConstMatrixMap(cols.data(), patch, ld).transpose();
  Shape in_shape = input.shape();
  return detail::make_result(
      "conv2d_weight_grad", {g.filters, g.in_channels, kernel_size, kernel_size}, std::move(out),
      {input, grad_out},
      [input, grad_out, in_shape, stride, pad](const Tensor&, const Tensor& up,
                                               const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d_input_grad(grad_out, up, in_shape, stride, pad);
        if (needs[1]) r[1] = conv2d(input, up, stride, pad);
        return r;
      });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

Tensor sum_pool2x(const Tensor& x);

/// Nearest-neighbour x2 upsampling of [N,C,H,W].
inline Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x expects [N,C,H,W]");
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(planes * 4 * h * w);
  auto src = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
  return detail::make_result("upsample2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{sum_pool2x(g)};
                             });
}

/// Sum over non-overlapping 2x2 blocks. Adjoint of upsample2x.
inline Tensor sum_pool2x(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2) {
    throw ShapeError("sum_pool2x expects [N,C,H,W] with even H, W; got " + shape_str(x.shape()));
  }
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  std::vector<double> out(planes * h * w, 0.0);
  auto src = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[(p * h + i / 2) * w + j / 2] += src[(p * 2 * h + i) * 2 * w + j];
  return detail::make_result("sum_pool2x", {x.dim(0), x.dim(1), h, w}, std::move(out), {x},
                             [](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{upsample2x(g)};
                             });
}

inline Tensor avg_pool2x(const Tensor& x) { return scale(sum_pool2x(x), 0.25); }

// ---------------------------------------------------------------------------
// Sparse stencils over the trailing [H, W] plane
// ---------------------------------------------------------------------------

/// Fixed linear map on an H x W plane, applied independently to every
/// leading slice: out[to] += weight * in[from].
struct Stencil {
  struct Tap {
    std::uint32_t to;
    std::uint32_t from;
    double weight;
  };
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Tap> taps;
};

using StencilPtr = std::shared_ptr<const Stencil>;

Tensor apply_stencil_adjoint(const Tensor& x, const StencilPtr& stencil);

namespace detail {

inline std::vector<double> run_stencil(const Tensor& x, const Stencil& s, bool adjoint) {
  if (x.rank() < 2 || x.dim(x.rank() - 2) != s.height || x.dim(x.rank() - 1) != s.width) {
    throw ShapeError("stencil expects trailing plane " + std::to_string(s.height) + "x" +
                     std::to_string(s.width) + ", got " + shape_str(x.shape()));
  }
  const auto plane = s.height * s.width;
  const auto slices = x.numel() / plane;
  std::vector<double> out(x.numel(), 0.0);
  auto in = x.data();
  for (std::size_t k = 0; k < slices; ++k) {
    const double* src = in.data() + k * plane;
    double* dst = out.data() + k * plane;
    for (const auto& t : s.taps) {
      if (adjoint) {
        dst[t.from] += t.weight * src[t.to];
      } else {
        dst[t.to] += t.weight * src[t.from];
      }
    }
  }
  return out;
}

}  // namespace detail

inline Tensor apply_stencil(const Tensor& x, const StencilPtr& stencil) {
  return detail::make_result("stencil", x.shape(), detail::run_stencil(x, *stencil, false), {x},
                             [stencil](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{apply_stencil_adjoint(g, stencil)};
                             });
}

inline Tensor apply_stencil_adjoint(const Tensor& x, const StencilPtr& stencil) {
  return detail::make_result("stencil_adjoint", x.shape(), detail::run_stencil(x, *stencil, true), {x},
                             [stencil](const Tensor&, const Tensor& g, const std::vector<bool>&) {
                               return std::vector<Tensor>{apply_stencil(g, stencil)};
                             });
}

enum class Axis { x, y };

/// Finite-difference stencil along one axis. A pixel is differentiable only
/// if `usable` marks it (empty span: every pixel usable). For each usable
/// pixel: central difference when both neighbours are usable, else forward,
/// else backward, else no contribution.
inline StencilPtr difference_stencil(std::size_t height, std::size_t width, Axis axis,
                                     std::span<const std::uint8_t> usable = {}) {
  if (!usable.empty() && usable.size() != height * width) {
    throw ShapeError("difference_stencil: usable map has wrong size");
  }
  auto ok = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(height) ||
        j >= static_cast<std::ptrdiff_t>(width))
      return false;
    return usable.empty() || usable[static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j)] != 0;
  };
  auto stencil = std::make_shared<Stencil>();
  stencil->height = height;
  stencil->width = width;
  const std::ptrdiff_t di = axis == Axis::y ? 1 : 0;
  const std::ptrdiff_t dj = axis == Axis::x ? 1 : 0;
  auto index = [width](std::ptrdiff_t i, std::ptrdiff_t j) {
    return static_cast<std::uint32_t>(static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j));
  };
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(height); ++i) {
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(width); ++j) {
      if (!ok(i, j)) continue;
      const auto here = index(i, j);
      const bool next = ok(i + di, j + dj);
      const bool prev = ok(i - di, j - dj);
      if (next && prev) {
        stencil->taps.push_back({here, index(i + di, j + dj), 0.5});
        stencil->taps.push_back({here, index(i - di, j - dj), -0.5});
      } else if (next) {
        stencil->taps.push_back({here, index(i + di, j + dj), 1.0});
        stencil->taps.push_back({here, here, -1.0});
      } else if (prev) {
        stencil->taps.push_back({here, here, 1.0});
        stencil->taps.push_back({here, index(i - di, j - dj), -1.0});
      }
    }
  }
  return stencil;
}

struct SpatialGradient {
  Tensor gx;
  Tensor gy;
};

/// Central differences in the interior, one-sided at the image border.
inline SpatialGradient spatial_gradient(const Tensor& img) {
  if (img.rank() < 2) throw ShapeError("spatial_gradient expects [..., H, W]");
  const auto h = img.dim(img.rank() - 2), w = img.dim(img.rank() - 1);
  if (h < 3 || w < 3) throw ShapeError("spatial_gradient requires H, W >= 3");
  return {apply_stencil(img, difference_stencil(h, w, Axis::x)),
          apply_stencil(img, difference_stencil(h, w, Axis::y))};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Normalizes each sample of x [N, C, ...] over all of its features, then
/// applies per-channel gain and bias ([C]; pass undefined tensors to skip).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (x.rank() < 2) throw ShapeError("layer_norm expects [N, C, ...]");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const double features = static_cast<double>(x.numel() / x.dim(0));
  Shape stat(x.rank(), 1);
  stat[0] = x.dim(0);
  auto mu = scale(reduce_to(x, stat), 1.0 / features);
  auto centered = sub(x, mu);
  auto var = scale(reduce_to(square(centered), stat), 1.0 / features);
  auto y = mul(centered, reciprocal(sqrt(add_scalar(var, eps))));
  Shape affine(x.rank(), 1);
  affine[1] = x.dim(1);
  if (gain.defined()) {
    if (gain.numel() != x.dim(1)) throw ShapeError("layer_norm: gain must have C entries");
    y = mul(y, reshape(gain, affine));
  }
  if (bias.defined()) {
    if (bias.numel() != x.dim(1)) throw ShapeError("layer_norm: bias must have C entries");
    y = add(y, reshape(bias, affine));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Extension point
// ---------------------------------------------------------------------------

/// Elementwise op with a user-supplied derivative. Its reverse rule is not
/// recorded, so it cannot appear on a double-backprop path.
template <class Fn, class Deriv>
Tensor pointwise_first_order(const Tensor& x, std::string name, Fn&& fn, Deriv&& deriv) {
  auto values = detail::map_values(x.data(), fn);
  auto slope = detail::map_values(x.data(), deriv);
  Tensor slope_t(x.shape(), std::move(slope));
  return detail::make_result(
      name, x.shape(), std::move(values), {x},
      [slope_t](const Tensor&, const Tensor& g, const std::vector<bool>&) {
        NoGradGuard no_grad;
        return std::vector<Tensor>{mul(g, slope_t)};
      },
      false);
}

}  // namespace latent_inpaint::ops
