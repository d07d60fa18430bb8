#pragma once

// Differentiable operations over atx::Tensor.
//
// Shapes must match exactly; the only broadcast is a 0-d scalar combined with
// a tensor of any shape. Every op rejects non-finite inputs.

#include <map>

#include "atx/tensor.hpp"

namespace atx {

namespace detail {

inline void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_ndim(std::string_view op, const Tensor& a, std::size_t n) {
  if (a.ndim() != n) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d input, got " +
                     shape_str(a.shape()));
  }
}

// Dot product with eight fixed partial sums; the summation order depends only on
// n, so results are reproducible while still vectorizing.
inline double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  double s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

enum class Binary { add, sub, mul };

inline Tensor binary(std::string_view op, Binary kind, const Tensor& a, const Tensor& b) {
  require_finite(op, a);
  require_finite(op, b);
  const bool a_scalar = a.ndim() == 0 && b.ndim() != 0;
  const bool b_scalar = b.ndim() == 0 && a.ndim() != 0;
  if (!a_scalar && !b_scalar) require_same(op, a, b);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
    }
  }
  return make_result(op, shape, std::move(out), {a, b}, [kind, a_scalar, b_scalar](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = kind == Binary::mul ? g[i] * bv[b_scalar ? 0 : i] : g[i];
        (*ga)[a_scalar ? 0 : i] += d;
      }
    }
    if (auto* gb = self.input_grad(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = g[i];
        if (kind == Binary::sub) d = -d;
        if (kind == Binary::mul) d *= av[a_scalar ? 0 : i];
        (*gb)[b_scalar ? 0 : i] += d;
      }
    }
  });
}

template <class F, class DF>
Tensor unary(std::string_view op, const Tensor& a, F f, DF df) {
  require_finite(op, a);
  std::vector<double> out(a.size());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  require_finite_output(op, out);
  return make_result(op, a.shape(), std::move(out), {a}, [df](Node& self) {
    if (auto* ga = self.input_grad(0)) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * df(x[i], self.value[i]);
    }
  });
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
inline void axis_extents(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary("add", detail::Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary("sub", detail::Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary("mul", detail::Binary::mul, a, b); }

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (v <= 0.0) throw std::domain_error("log: input must be positive");
  }
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// d/du sqrt(u) at u == 0 is taken as 0 (subgradient) so norms of zero stay finite.
inline Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw std::domain_error("sqrt: input must be nonnegative");
  }
  return detail::unary("sqrt", a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  detail::require_finite("reshape", a);
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    detail::require_finite("concat", p);
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer, len, inner;
  detail::axis_extents(out_shape, axis, outer, len, inner);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t plen = p.dim(axis);
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * plen * inner), plen * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * len + off) * inner));
    }
    off += plen;
  }
  return detail::make_result("concat", out_shape, std::move(out), parts,
                             [offsets, outer, len, inner, axis](detail::Node& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 auto* gk = self.input_grad(k);
                                 if (!gk) continue;
                                 const std::size_t plen = self.inputs[k]->shape[axis];
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < plen * inner; ++j) {
                                     (*gk)[o * plen * inner + j] += self.grad[(o * len + offsets[k]) * inner + j];
                                   }
                                 }
                               }
                             });
}

// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.ndim() || begin >= end || end > a.dim(axis)) {
    throw ShapeError("slice: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  detail::require_finite("slice", a);
  std::size_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t span_len = (end - begin) * inner;
  std::vector<double> out(outer * span_len);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner), span_len,
                out.begin() + static_cast<std::ptrdiff_t>(o * span_len));
  }
  return detail::make_result("slice", out_shape, std::move(out), {a},
                             [outer, len, inner, begin, span_len](detail::Node& self) {
                               if (auto* ga = self.input_grad(0)) {
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < span_len; ++j) {
                                     (*ga)[(o * len + begin) * inner + j] += self.grad[o * span_len + j];
                                   }
                                 }
                               }
                             });
}

inline Tensor sum(const Tensor& a) {
  detail::require_finite("sum", a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", Shape{}, {s}, {a}, [](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (double& g : *ga) g += self.grad[0];
    }
  });
}

// Sum along one axis; the axis is removed from the shape.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.ndim()) throw ShapeError("sum: axis out of range for " + shape_str(a.shape()));
  detail::require_finite("sum", a);
  std::size_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + k) * inner + i];
  return detail::make_result("sum_axis", out_shape, std::move(out), {a}, [outer, len, inner](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
          for (std::size_t i = 0; i < inner; ++i) (*ga)[(o * len + k) * inner + i] += self.grad[o * inner + i];
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Softmax along the last axis.
inline Tensor softmax(const Tensor& a) {
  if (a.ndim() == 0) throw ShapeError("softmax: needs at least one axis");
  detail::require_finite("softmax", a);
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  std::vector<double> out(a.size());
  auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double* y = out.data() + r * d;
    const double m = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a}, [rows, d](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * d;
        const double* g = self.grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) (*ga)[r * d + j] += y[j] * (g[j] - dot);
      }
    }
  });
}

// Layer normalization along the last axis with affine gamma/beta of length d.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  if (x.ndim() == 0) throw ShapeError("layer_norm: needs at least one axis");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  detail::require_finite("layer_norm", x);
  detail::require_finite("layer_norm", gamma);
  detail::require_finite("layer_norm", beta);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - m) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gam = self.inputs[1]->value;
        auto* gx = self.input_grad(0);
        auto* gg = self.input_grad(1);
        auto* gb = self.input_grad(2);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (gg || gb) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) (*gg)[j] += g[j] * xh[j];
              if (gb) (*gb)[j] += g[j];
            }
          }
          if (gx) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gy = g[j] * gam[j];
              s1 += gy;
              s2 += gy * xh[j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double gy = g[j] * gam[j];
              (*gx)[r * d + j] += inv_std[r] * (gy - inv_d * s1 - xh[j] * inv_d * s2);
            }
          }
        }
      });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_ndim("matmul", a, 2);
  detail::require_ndim("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  detail::require_finite("matmul", a);
  detail::require_finite("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return detail::make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += s;
        }
    }
    if (auto* gb = self.input_grad(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_ndim("transpose", a, 2);
  detail::require_finite("transpose", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result("transpose", Shape{n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
    }
  });
}

// x [m, k] times weight [k, n] plus bias [n] added to every row.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_ndim("linear", x, 2);
  detail::require_ndim("linear", weight, 2);
  if (x.dim(1) != weight.dim(0) || bias.shape() != Shape{weight.dim(1)}) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(weight.shape()) +
                     " b" + shape_str(bias.shape()));
  }
  detail::require_finite("linear", x);
  detail::require_finite("linear", weight);
  detail::require_finite("linear", bias);
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  std::vector<double> out(m * n);
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    std::copy(bv.begin(), bv.end(), orow);
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = xv[i * k + p];
      const double* wrow = wv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xip * wrow[j];
    }
  }
  return detail::make_result("linear", Shape{m, n}, std::move(out), {x, weight, bias}, [m, k, n](detail::Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* gx = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * wv[p * n + j];
          (*gx)[i * k + p] += s;
        }
    }
    if (auto* gw = self.input_grad(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = xv[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gw)[p * n + j] += xip * g[i * n + j];
        }
    }
    if (auto* gb = self.input_grad(2)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
    }
  });
}

// Cosine similarity of matching rows along the last axis. 1-d inputs give a
// 0-d scalar. Zero rows are rejected.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require_same("cosine_similarity", a, b);
  if (a.ndim() == 0) throw ShapeError("cosine_similarity: needs at least one axis");
  detail::require_finite("cosine_similarity", a);
  detail::require_finite("cosine_similarity", b);
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows), na(rows), nb(rows);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av[r * d + j] * bv[r * d + j];
      aa += av[r * d + j] * av[r * d + j];
      bb += bv[r * d + j] * bv[r * d + j];
    }
    if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine_similarity: zero vector");
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = dot / (na[r] * nb[r]);
  }
  return detail::make_result(
      "cosine_similarity", out_shape, std::move(out), {a, b},
      [rows, d, na = std::move(na), nb = std::move(nb)](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        auto* ga = self.input_grad(0);
        auto* gb = self.input_grad(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double c = self.value[r];
          const double g = self.grad[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double x = av[r * d + j], y = bv[r * d + j];
            if (ga) (*ga)[r * d + j] += g * (y / (na[r] * nb[r]) - c * x / (na[r] * na[r]));
            if (gb) (*gb)[r * d + j] += g * (x / (na[r] * nb[r]) - c * y / (nb[r] * nb[r]));
          }
        }
      });
}

// All-pairs cosine similarity: a [n, d], b [m, d] -> [n, m].
inline Tensor pairwise_cosine(const Tensor& a, const Tensor& b) {
  detail::require_ndim("pairwise_cosine", a, 2);
  detail::require_ndim("pairwise_cosine", b, 2);
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise_cosine: feature dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  detail::require_finite("pairwise_cosine", a);
  detail::require_finite("pairwise_cosine", b);
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> na(n), nb(m);
  auto norms = [d](std::span<const double> v, std::vector<double>& out) {
    for (std::size_t r = 0; r < out.size(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
      if (s == 0.0) throw std::domain_error("pairwise_cosine: zero vector");
      out[r] = std::sqrt(s);
    }
  };
  norms(av, na);
  norms(bv, nb);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t p = 0; p < d; ++p) dot += av[i * d + p] * bv[j * d + p];
      out[i * m + j] = dot / (na[i] * nb[j]);
    }
  return detail::make_result(
      "pairwise_cosine", Shape{n, m}, std::move(out), {a, b},
      [n, m, d, na = std::move(na), nb = std::move(nb)](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        auto* ga = self.input_grad(0);
        auto* gb = self.input_grad(1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double g = self.grad[i * m + j];
            if (g == 0.0) continue;
            const double c = self.value[i * m + j];
            const double inv = 1.0 / (na[i] * nb[j]);
            for (std::size_t p = 0; p < d; ++p) {
              const double x = av[i * d + p], y = bv[j * d + p];
              if (ga) (*ga)[i * d + p] += g * (y * inv - c * x / (na[i] * na[i]));
              if (gb) (*gb)[j * d + p] += g * (x * inv - c * y / (nb[j] * nb[j]));
            }
          }
      });
}

// Sum of squared differences.
inline Tensor squared_error(const Tensor& a, const Tensor& b) {
  detail::require_same("squared_error", a, b);
  detail::require_finite("squared_error", a);
  detail::require_finite("squared_error", b);
  double s = 0.0;
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return detail::make_result("squared_error", Shape{}, {s}, {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const double g = self.grad[0];
    auto* ga = self.input_grad(0);
    auto* gb = self.input_grad(1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = 2.0 * g * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// Euclidean norm of all elements; gradient at the zero vector is taken as zero.
inline Tensor l2_norm(const Tensor& a) {
  detail::require_finite("l2_norm", a);
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  const double nrm = std::sqrt(s);
  return detail::make_result("l2_norm", Shape{}, {nrm}, {a}, [](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      const double nrm = self.value[0];
      if (nrm == 0.0) return;
      const auto& av = self.inputs[0]->value;
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += self.grad[0] * av[i] / nrm;
    }
  });
}

inline Tensor diag(const Tensor& a) {
  detail::require_ndim("diag", a, 2);
  if (a.dim(0) != a.dim(1)) throw ShapeError("diag: matrix must be square, got " + shape_str(a.shape()));
  detail::require_finite("diag", a);
  const std::size_t n = a.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i * n + i];
  return detail::make_result("diag", Shape{n}, std::move(out), {a}, [n](detail::Node& self) {
    if (auto* ga = self.input_grad(0)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i * n + i] += self.grad[i];
    }
  });
}

// Mean cross-entropy of logits [n, k] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  detail::require_ndim("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw std::out_of_range("cross_entropy: label out of range");
  }
  detail::require_finite("cross_entropy", logits);
  std::vector<double> prob(n * k);
  double loss = 0.0;
  auto lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = lv.data() + i * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(x[j] - lse);
    loss += lse - x[labels[i]];
  }
  loss /= static_cast<double>(n);
  return detail::make_result("cross_entropy", Shape{}, {loss}, {logits},
                             [n, k, labels, prob = std::move(prob)](detail::Node& self) {
                               if (auto* gl = self.input_grad(0)) {
                                 const double g = self.grad[0] / static_cast<double>(n);
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < k; ++j) {
                                     const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
                                     (*gl)[i * k + j] += g * (prob[i * k + j] - onehot);
                                   }
                               }
                             });
}

// Rows of `table` [rows, d] selected by index -> [indices.size(), d].
inline Tensor take_rows(const Tensor& table, const std::vector<int>& indices) {
  detail::require_ndim("take_rows", table, 2);
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows) throw std::out_of_range("take_rows: index out of range");
  }
  detail::require_finite("take_rows", table);
  std::vector<double> out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  return detail::make_result("take_rows", Shape{indices.size(), d}, std::move(out), {table},
                             [indices, d](detail::Node& self) {
                               if (auto* gt = self.input_grad(0)) {
                                 for (std::size_t r = 0; r < indices.size(); ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*gt)[static_cast<std::size_t>(indices[r]) * d + j] += self.grad[r * d + j];
                               }
                             });
}

namespace detail {

struct ConvGeom {
  std::size_t ci, h, w, k, stride, pad, oh, ow;
};

// Unfolds one image [ci, h, w] into columns [ci*k*k, oh*ow]; out-of-range taps are 0.
inline void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the image gradient.
inline void col2im_add(const double* col, const ConvGeom& g, double* img) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// 2-d convolution, NCHW input [n, ci, h, w], weight [co, ci, k, k], bias [co].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 1) {
  detail::require_ndim("conv2d", x, 4);
  detail::require_ndim("conv2d", weight, 4);
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci || weight.dim(3) != k || bias.shape() != Shape{co} || stride == 0 ||
      h + 2 * pad < k || w + 2 * pad < k) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(weight.shape()) +
                     " b" + shape_str(bias.shape()));
  }
  detail::require_finite("conv2d", x);
  detail::require_finite("conv2d", weight);
  detail::require_finite("conv2d", bias);
  const detail::ConvGeom geom{ci, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1};
  const std::size_t plane = geom.oh * geom.ow;
  const std::size_t kk = ci * k * k;
  std::vector<double> out(n * co * plane);
  std::vector<double> col(kk * plane);
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(xv.data() + b * ci * h * w, geom, col.data());
    double* ob = out.data() + b * co * plane;
    for (std::size_t o = 0; o < co; ++o) std::fill(ob + o * plane, ob + (o + 1) * plane, bv[o]);
    for (std::size_t r = 0; r < kk; ++r) {
      const double* crow = col.data() + r * plane;
      for (std::size_t o = 0; o < co; ++o) {
        const double wt = wv[o * kk + r];
        double* orow = ob + o * plane;
        for (std::size_t p = 0; p < plane; ++p) orow[p] += wt * crow[p];
      }
    }
  }

  return detail::make_result(
      "conv2d", Shape{n, co, geom.oh, geom.ow}, std::move(out), {x, weight, bias},
      [n, co, geom, plane, kk](detail::Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        auto* gx = self.input_grad(0);
        auto* gw = self.input_grad(1);
        auto* gb = self.input_grad(2);
        const std::size_t img = geom.ci * geom.h * geom.w;
        std::vector<double> col(gw ? kk * plane : 0);
        std::vector<double> dcol(gx ? kk * plane : 0);
        for (std::size_t b = 0; b < n; ++b) {
          const double* gp = self.grad.data() + b * co * plane;
          if (gb) {
            for (std::size_t o = 0; o < co; ++o) {
              double s = 0.0;
              for (std::size_t p = 0; p < plane; ++p) s += gp[o * plane + p];
              (*gb)[o] += s;
            }
          }
          if (gw) {
            detail::im2col(xv.data() + b * img, geom, col.data());
            for (std::size_t r = 0; r < kk; ++r) {
              const double* crow = col.data() + r * plane;
              for (std::size_t o = 0; o < co; ++o) {
                (*gw)[o * kk + r] += detail::dot(gp + o * plane, crow, plane);
              }
            }
          }
          if (gx) {
            for (std::size_t r = 0; r < kk; ++r) {
              double* drow = dcol.data() + r * plane;
              std::fill(drow, drow + plane, 0.0);
              for (std::size_t o = 0; o < co; ++o) {
                const double wt = wv[o * kk + r];
                const double* grow = gp + o * plane;
                for (std::size_t p = 0; p < plane; ++p) drow[p] += wt * grow[p];
              }
            }
            detail::col2im_add(dcol.data(), geom, gx->data() + b * img);
          }
        }
      });
}

// Nearest-neighbour 2x upsampling of [n, c, h, w].
inline Tensor upsample2x(const Tensor& x) {
  detail::require_ndim("upsample2x", x, 4);
  detail::require_finite("upsample2x", x);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(n * c * 4 * h * w);
  auto xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  return detail::make_result("upsample2x", Shape{n, c, 2 * h, 2 * w}, std::move(out), {x},
                             [n, c, h, w](detail::Node& self) {
                               if (auto* gx = self.input_grad(0)) {
                                 for (std::size_t p = 0; p < n * c; ++p)
                                   for (std::size_t y = 0; y < 2 * h; ++y)
                                     for (std::size_t xx = 0; xx < 2 * w; ++xx)
                                       (*gx)[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
                               }
                             });
}

// Adds v [n, c] to every spatial position of x [n, c, h, w].
inline Tensor add_channel(const Tensor& x, const Tensor& v) {
  detail::require_ndim("add_channel", x, 4);
  if (v.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw ShapeError("add_channel: expected bias " + shape_str({x.dim(0), x.dim(1)}) + ", got " + shape_str(v.shape()));
  }
  detail::require_finite("add_channel", x);
  detail::require_finite("add_channel", v);
  const std::size_t plane = x.dim(2) * x.dim(3);
  const std::size_t planes = x.dim(0) * x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] += v[p];
  return detail::make_result("add_channel", x.shape(), std::move(out), {x, v}, [plane, planes](detail::Node& self) {
    auto* gx = self.input_grad(0);
    auto* gv = self.input_grad(1);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < plane; ++i) {
        const double g = self.grad[p * plane + i];
        if (gx) (*gx)[p * plane + i] += g;
        if (gv) (*gv)[p] += g;
      }
  });
}

// Image [c, h, w] -> non-overlapping patches [(h/p)*(w/p), c*p*p], row-major
// over the patch grid; each patch is flattened channel-major.
inline Tensor patchify(const Tensor& img, std::size_t patch) {
  detail::require_ndim("patchify", img, 3);
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: image " + shape_str(img.shape()) + " not divisible by patch " + std::to_string(patch));
  }
  detail::require_finite("patchify", img);
  const std::size_t gh = h / patch, gw = w / patch, d = c * patch * patch;
  std::vector<std::size_t> src(gh * gw * d);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            src[((py * gw + px) * c + ch) * patch * patch + y * patch + x] =
                (ch * h + py * patch + y) * w + px * patch + x;
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = img[src[i]];
  return detail::make_result("patchify", Shape{gh * gw, d}, std::move(out), {img}, [src](detail::Node& self) {
    if (auto* gi = self.input_grad(0)) {
      for (std::size_t i = 0; i < src.size(); ++i) (*gi)[src[i]] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Name-based dispatch.

struct OpAttrs {
  std::map<std::string, double> num;
  Shape shape;
  std::vector<int> indices;

  double get(const std::string& key, double fallback) const {
    auto it = num.find(key);
    return it == num.end() ? fallback : it->second;
  }
  double require(const std::string& op, const std::string& key) const {
    auto it = num.find(key);
    if (it == num.end()) throw std::invalid_argument(op + ": missing attribute '" + key + "'");
    return it->second;
  }
};

inline const std::vector<std::string>& registered_ops() {
  static const std::vector<std::string> names = {
      "add",      "sub",          "mul",           "matmul",       "reshape",      "concat",
      "slice",    "sum",          "mean",          "softmax",      "layer_norm",   "gelu",
      "relu",     "sqrt",         "exp",           "log",          "cosine_similarity",
      "squared_error", "silu",    "scale",         "add_scalar",   "transpose",    "linear",
      "pairwise_cosine", "l2_norm", "diag",        "cross_entropy", "take_rows",   "conv2d",
      "upsample2x", "add_channel", "patchify"};
  return names;
}

inline Tensor forward_op(const std::string& name, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(name + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  auto axis = [&](const char* key) { return static_cast<std::size_t>(attrs.require(name, key)); };
  if (name == "add") return arity(2), add(in[0], in[1]);
  if (name == "sub") return arity(2), sub(in[0], in[1]);
  if (name == "mul") return arity(2), mul(in[0], in[1]);
  if (name == "matmul") return arity(2), matmul(in[0], in[1]);
  if (name == "reshape") return arity(1), reshape(in[0], attrs.shape);
  if (name == "concat") return concat(in, axis("axis"));
  if (name == "slice") return arity(1), slice(in[0], axis("axis"), axis("begin"), axis("end"));
  if (name == "sum") {
    arity(1);
    return attrs.num.count("axis") ? sum(in[0], axis("axis")) : sum(in[0]);
  }
  if (name == "mean") return arity(1), mean(in[0]);
  if (name == "softmax") return arity(1), softmax(in[0]);
  if (name == "layer_norm") return arity(3), layer_norm(in[0], in[1], in[2], attrs.get("eps", 1e-5));
  if (name == "gelu") return arity(1), gelu(in[0]);
  if (name == "relu") return arity(1), relu(in[0]);
  if (name == "silu") return arity(1), silu(in[0]);
  if (name == "sqrt") return arity(1), sqrt(in[0]);
  if (name == "exp") return arity(1), exp(in[0]);
  if (name == "log") return arity(1), log(in[0]);
  if (name == "cosine_similarity") return arity(2), cosine_similarity(in[0], in[1]);
  if (name == "squared_error") return arity(2), squared_error(in[0], in[1]);
  if (name == "scale") return arity(1), scale(in[0], attrs.require(name, "factor"));
  if (name == "add_scalar") return arity(1), add_scalar(in[0], attrs.require(name, "value"));
  if (name == "transpose") return arity(1), transpose(in[0]);
  if (name == "linear") return arity(3), linear(in[0], in[1], in[2]);
  if (name == "pairwise_cosine") return arity(2), pairwise_cosine(in[0], in[1]);
  if (name == "l2_norm") return arity(1), l2_norm(in[0]);
  if (name == "diag") return arity(1), diag(in[0]);
  if (name == "cross_entropy") return arity(1), cross_entropy(in[0], attrs.indices);
  if (name == "take_rows") return arity(1), take_rows(in[0], attrs.indices);
  if (name == "conv2d") {
    arity(3);
    return conv2d(in[0], in[1], in[2], static_cast<std::size_t>(attrs.get("stride", 1)),
                  static_cast<std::size_t>(attrs.get("pad", 1)));
  }
  if (name == "upsample2x") return arity(1), upsample2x(in[0]);
  if (name == "add_channel") return arity(2), add_channel(in[0], in[1]);
  if (name == "patchify") return arity(1), patchify(in[0], axis("patch"));
  throw std::invalid_argument("forward_op: unknown op '" + name + "'");
}

}  // namespace atx
