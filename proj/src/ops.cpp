#include "cdvgm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdvgm/errors.hpp"

namespace cdvgm {

using detail::grad_target;
using detail::make_result;

namespace {

enum class Broadcast { same, lhs_scalar, rhs_scalar };

Broadcast binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::rhs_scalar;
  if (a.numel() == 1) return Broadcast::lhs_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// Applies f(a_i, b_i) with scalar broadcast; dfa/dfb give the partials.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA dfa, DB dfb) {
  const auto layout = binary_layout(a, b, op);
  const Shape out_shape = layout == Broadcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t sa = layout == Broadcast::lhs_scalar ? 0 : 1;
  const std::size_t sb = layout == Broadcast::rhs_scalar ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  return make_result(out_shape, std::move(out), op, {a, b}, [a, b, n, sa, sb, dfa, dfb](std::span<const double> g) {
    const auto av = a.data();
    const auto bv = b.data();
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * dfa(av[i * sa], bv[i * sb]);
    }
    if (double* gb = grad_target(b)) {
      for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * dfb(av[i * sa], bv[i * sb]);
    }
  });
}

// y = f(x) elementwise; d(x, y) is dy/dx.
template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F f, D d) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto y = std::make_shared<std::vector<double>>();
  if (grad_enabled() && a.requires_grad()) *y = out;
  return make_result(a.shape(), std::move(out), op, {a}, [a, y, d](std::span<const double> g) {
    double* ga = grad_target(a);
    if (!ga) return;
    const auto av = a.data();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * d(av[i], (*y)[i]);
  });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log1p(const Tensor& a) {
  return unary(
      a, "log1p", [](double x) { return std::log1p(x); }, [](double x, double) { return 1.0 / (1.0 + x); });
}

Tensor sin(const Tensor& a) {
  return unary(
      a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor leaky_relu(const Tensor& a, double negative_slope) {
  return unary(
      a, "leaky_relu", [negative_slope](double x) { return x >= 0.0 ? x : negative_slope * x; },
      [negative_slope](double x, double) { return x >= 0.0 ? 1.0 : negative_slope; });
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor sum(const Tensor& a) {
  const auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  return make_result({}, {s}, "sum", {a}, [a](std::span<const double> g) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  const auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  return make_result({}, {s * inv}, "mean", {a}, [a, inv](std::span<const double> g) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0] * inv;
    }
  });
}

Tensor amax(const Tensor& a) {
  const auto av = a.data();
  if (av.empty()) throw ShapeError("amax: empty tensor");
  const std::size_t arg = static_cast<std::size_t>(std::max_element(av.begin(), av.end()) - av.begin());
  return make_result({}, {av[arg]}, "amax", {a}, [a, arg](std::span<const double> g) {
    if (double* ga = grad_target(a)) ga[arg] += g[0];
  });
}

namespace {

// View of a tensor as [outer, axis, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Tensor reduce_axis(const Tensor& a, std::size_t axis, bool keepdim, double factor, const char* op) {
  if (axis >= a.rank()) throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_str(a.shape()));
  const auto v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto av = a.data();
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t e = 0; e < v.extent; ++e) {
      const double* src = av.data() + (o * v.extent + e) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& x : out) x *= factor;
  return make_result(out_shape, std::move(out), op, {a}, [a, v, factor](std::span<const double> g) {
    double* ga = grad_target(a);
    if (!ga) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t e = 0; e < v.extent; ++e) {
        double* dst = ga + (o * v.extent + e) * v.inner;
        const double* src = g.data() + o * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i] * factor;
      }
    }
  });
}

}  // namespace

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, 1.0, "sum_axis");
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  if (axis >= a.rank()) throw ShapeError("mean_axis: axis out of range for shape " + shape_str(a.shape()));
  return reduce_axis(a, axis, keepdim, 1.0 / static_cast<double>(a.dim(axis)), "mean_axis");
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.rank() != shape.size()) {
    throw ShapeError("broadcast_to: rank mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (a.dim(i) != shape[i] && a.dim(i) != 1) {
      throw ShapeError("broadcast_to: cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
  }
  const auto out_strides = strides_of(shape);
  auto src_strides = strides_of(a.shape());
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (a.dim(i) == 1) src_strides[i] = 0;
  }
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> src_index(n);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t i = 0; i < shape.size(); ++i) {
      off += (rem / out_strides[i]) * src_strides[i];
      rem %= out_strides[i];
    }
    src_index[flat] = off;
  }
  const auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[src_index[i]];
  return make_result(shape, std::move(out), "broadcast_to", {a},
                     [a, index = std::move(src_index)](std::span<const double> g) {
                       if (double* ga = grad_target(a)) {
                         for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return make_result(std::move(shape), a.to_vector(), "reshape", {a}, [a](std::span<const double> g) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const auto& in_shape = a.shape();
  if (order.size() != in_shape.size()) {
    throw ShapeError("permute: order of length " + std::to_string(order.size()) + " for shape " +
                     shape_str(in_shape));
  }
  std::vector<bool> used(order.size(), false);
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= order.size() || used[order[i]]) throw ShapeError("permute: invalid axis order");
    used[order[i]] = true;
    out_shape[i] = in_shape[order[i]];
  }
  const auto in_strides = strides_of(in_shape);
  const auto out_strides = strides_of(out_shape);
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      off += (rem / out_strides[i]) * in_strides[order[i]];
      rem %= out_strides[i];
    }
    src[flat] = off;
  }
  const auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[src[i]];
  return make_result(out_shape, std::move(out), "permute", {a}, [a, src = std::move(src)](std::span<const double> g) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += g[i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[a.rank() - 1], order[a.rank() - 2]);
  return permute(a, order);
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || start + length > a.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " of shape " + shape_str(a.shape()));
  }
  const auto v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const auto av = a.data();
  std::vector<double> out(v.outer * length * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(av.data() + (o * v.extent + start) * v.inner, length * v.inner, out.data() + o * length * v.inner);
  }
  return make_result(out_shape, std::move(out), "narrow", {a}, [a, v, start, length](std::span<const double> g) {
    double* ga = grad_target(a);
    if (!ga) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = ga + (o * v.extent + start) * v.inner;
      const double* src = g.data() + o * length * v.inner;
      for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(ref));
    out_shape[axis] += s[axis];
  }
  const auto v = axis_view(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    const auto pv = p.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(pv.data() + o * len * v.inner, len * v.inner, out.data() + (o * v.extent + offset) * v.inner);
    }
    offset += len;
  }
  return make_result(out_shape, std::move(out), "concat", parts,
                     [parts, offsets, v, axis](std::span<const double> g) {
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         double* gp = grad_target(parts[k]);
                         if (!gp) continue;
                         const std::size_t len = parts[k].dim(axis);
                         for (std::size_t o = 0; o < v.outer; ++o) {
                           const double* src = g.data() + (o * v.extent + offsets[k]) * v.inner;
                           double* dst = gp + o * len * v.inner;
                           for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias, std::size_t axis) {
  if (axis >= x.rank() || bias.rank() != 1 || bias.dim(0) != x.dim(axis)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match axis " + std::to_string(axis) +
                     " of " + shape_str(x.shape()));
  }
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  const auto bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t e = 0; e < v.extent; ++e) {
      const std::size_t base = (o * v.extent + e) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) out[base + i] = xv[base + i] + bv[e];
    }
  }
  return make_result(x.shape(), std::move(out), "add_bias", {x, bias}, [x, bias, v](std::span<const double> g) {
    if (double* gx = grad_target(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (double* gb = grad_target(bias)) {
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t e = 0; e < v.extent; ++e) {
          const double* src = g.data() + (o * v.extent + e) * v.inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < v.inner; ++i) acc += src[i];
          gb[e] += acc;
        }
      }
    }
  });
}

namespace {

void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_acc_bt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_acc_at(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const std::size_t rank = std::max(a_batch.size(), b_batch.size());
  Shape out_batch(rank);
  std::vector<std::size_t> a_stride(rank, 0), b_stride(rank, 0);
  {
    const auto as = strides_of(a_batch);
    const auto bs = strides_of(b_batch);
    for (std::size_t i = 0; i < rank; ++i) {
      const std::size_t ai = i + a_batch.size() >= rank ? i + a_batch.size() - rank : SIZE_MAX;
      const std::size_t bi = i + b_batch.size() >= rank ? i + b_batch.size() - rank : SIZE_MAX;
      const std::size_t ad = ai == SIZE_MAX ? 1 : a_batch[ai];
      const std::size_t bd = bi == SIZE_MAX ? 1 : b_batch[bi];
      if (ad != bd && ad != 1 && bd != 1) {
        throw ShapeError("matmul: batch axes not broadcastable for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
      }
      out_batch[i] = std::max(ad, bd);
      if (ai != SIZE_MAX && ad != 1) a_stride[i] = as[ai];
      if (bi != SIZE_MAX && bd != 1) b_stride[i] = bs[bi];
    }
  }
  const std::size_t batches = shape_numel(out_batch);
  const auto ob_strides = strides_of(out_batch);
  std::vector<std::size_t> a_off(batches), b_off(batches);
  for (std::size_t flat = 0; flat < batches; ++flat) {
    std::size_t rem = flat, ao = 0, bo = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      const std::size_t idx = rem / ob_strides[i];
      rem %= ob_strides[i];
      ao += idx * a_stride[i];
      bo += idx * b_stride[i];
    }
    a_off[flat] = ao * m * k;
    b_off[flat] = bo * k * n;
  }
  Shape out_shape = out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t t = 0; t < batches; ++t) {
    gemm_acc(av.data() + a_off[t], bv.data() + b_off[t], out.data() + t * m * n, m, k, n);
  }
  return make_result(out_shape, std::move(out), "matmul", {a, b},
                     [a, b, m, k, n, a_off, b_off](std::span<const double> g) {
                       const auto av = a.data();
                       const auto bv = b.data();
                       double* ga = grad_target(a);
                       double* gb = grad_target(b);
                       for (std::size_t t = 0; t < a_off.size(); ++t) {
                         const double* gt = g.data() + t * m * n;
                         if (ga) gemm_acc_bt(gt, bv.data() + b_off[t], ga + a_off[t], m, k, n);
                         if (gb) gemm_acc_at(av.data() + a_off[t], gt, gb + b_off[t], m, k, n);
                       }
                     });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 4, "pointwise_conv", "input");
  require_rank(w, 2, "pointwise_conv", "weight");
  const std::size_t batch = x.dim(0), cin = x.dim(1), positions = x.dim(2) * x.dim(3);
  const std::size_t cout = w.dim(0);
  if (w.dim(1) != cin) {
    throw ShapeError("pointwise_conv: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                     " input channels, input " + shape_str(x.shape()) + " has " + std::to_string(cin));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("pointwise_conv: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  const auto xv = x.data();
  const auto wv = w.data();
  std::vector<double> out(batch * cout * positions, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* dst = out.data() + (b * cout + o) * positions;
      if (has_bias) std::fill_n(dst, positions, bias.data()[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double wc = wv[o * cin + c];
        const double* src = xv.data() + (b * cin + c) * positions;
        for (std::size_t p = 0; p < positions; ++p) dst[p] += wc * src[p];
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result({batch, cout, x.dim(2), x.dim(3)}, std::move(out), "pointwise_conv", std::move(inputs),
                     [x, w, bias, batch, cin, cout, positions](std::span<const double> g) {
                       const auto xv = x.data();
                       const auto wv = w.data();
                       double* gx = grad_target(x);
                       double* gw = grad_target(w);
                       double* gb = bias.defined() ? grad_target(bias) : nullptr;
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t o = 0; o < cout; ++o) {
                           const double* go = g.data() + (b * cout + o) * positions;
                           if (gb) {
                             double acc = 0.0;
                             for (std::size_t p = 0; p < positions; ++p) acc += go[p];
                             gb[o] += acc;
                           }
                           for (std::size_t c = 0; c < cin; ++c) {
                             const double* src = xv.data() + (b * cin + c) * positions;
                             if (gw) {
                               double acc = 0.0;
                               for (std::size_t p = 0; p < positions; ++p) acc += go[p] * src[p];
                               gw[o * cin + c] += acc;
                             }
                             if (gx) {
                               const double wc = wv[o * cin + c];
                               double* dst = gx + (b * cin + c) * positions;
                               for (std::size_t p = 0; p < positions; ++p) dst[p] += wc * go[p];
                             }
                           }
                         }
                       }
                     });
}

Tensor temporal_conv(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t dilation, bool causal) {
  require_rank(x, 4, "temporal_conv", "input");
  require_rank(w, 3, "temporal_conv", "weight");
  const std::size_t batch = x.dim(0), cin = x.dim(1), nodes = x.dim(2), steps = x.dim(3);
  const std::size_t cout = w.dim(0), width = w.dim(2);
  if (w.dim(1) != cin) {
    throw ShapeError("temporal_conv: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (width < 1 || dilation < 1) throw DomainError("temporal_conv: kernel width and dilation must be >= 1");
  const std::size_t span = dilation * (width - 1);
  if (!causal && steps < span + 1) {
    throw DomainError("temporal_conv: time axis of length " + std::to_string(steps) +
                      " is shorter than the effective kernel span " + std::to_string(span + 1));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("temporal_conv: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  const std::size_t out_steps = causal ? steps : steps - span;
  // Input index for output step t and tap j is t + j*dilation - shift.
  const std::ptrdiff_t shift = causal ? static_cast<std::ptrdiff_t>(span) : 0;
  const auto xv = x.data();
  const auto wv = w.data();
  std::vector<double> out(batch * cout * nodes * out_steps, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* dst_bo = out.data() + (b * cout + o) * nodes * out_steps;
      if (has_bias) std::fill_n(dst_bo, nodes * out_steps, bias.data()[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double* src_bc = xv.data() + (b * cin + c) * nodes * steps;
        for (std::size_t j = 0; j < width; ++j) {
          const double wj = wv[(o * cin + c) * width + j];
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j * dilation) - shift;
          const std::size_t t0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
          for (std::size_t n = 0; n < nodes; ++n) {
            double* dst = dst_bo + n * out_steps;
            const double* src = src_bc + n * steps;
            for (std::size_t t = t0; t < out_steps; ++t) dst[t] += wj * src[static_cast<std::ptrdiff_t>(t) + off];
          }
        }
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      {batch, cout, nodes, out_steps}, std::move(out), "temporal_conv", std::move(inputs),
      [x, w, bias, batch, cin, cout, nodes, steps, width, dilation, out_steps, shift](std::span<const double> g) {
        const auto xv = x.data();
        const auto wv = w.data();
        double* gx = grad_target(x);
        double* gw = grad_target(w);
        double* gb = bias.defined() ? grad_target(bias) : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t o = 0; o < cout; ++o) {
            const double* g_bo = g.data() + (b * cout + o) * nodes * out_steps;
            if (gb) {
              double acc = 0.0;
              for (std::size_t i = 0; i < nodes * out_steps; ++i) acc += g_bo[i];
              gb[o] += acc;
            }
            for (std::size_t c = 0; c < cin; ++c) {
              const double* src_bc = xv.data() + (b * cin + c) * nodes * steps;
              double* gx_bc = gx ? gx + (b * cin + c) * nodes * steps : nullptr;
              for (std::size_t j = 0; j < width; ++j) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j * dilation) - shift;
                const std::size_t t0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
                const double wj = wv[(o * cin + c) * width + j];
                double acc = 0.0;
                for (std::size_t n = 0; n < nodes; ++n) {
                  const double* go = g_bo + n * out_steps;
                  const double* src = src_bc + n * steps;
                  for (std::size_t t = t0; t < out_steps; ++t) {
                    const auto s = static_cast<std::ptrdiff_t>(t) + off;
                    acc += go[t] * src[s];
                    if (gx_bc) gx_bc[n * steps + static_cast<std::size_t>(s)] += wj * go[t];
                  }
                }
                if (gw) gw[(o * cin + c) * width + j] += acc;
              }
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for shape " + shape_str(x.shape()));
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double mx = xv[base];
      for (std::size_t e = 1; e < v.extent; ++e) mx = std::max(mx, xv[base + e * v.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double ex = std::exp(xv[base + e * v.inner] - mx);
        out[base + e * v.inner] = ex;
        total += ex;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<double>>();
  if (grad_enabled() && x.requires_grad()) *y = out;
  return make_result(x.shape(), std::move(out), "softmax", {x}, [x, y, v](std::span<const double> g) {
    double* gx = grad_target(x);
    if (!gx) return;
    const auto& yv = *y;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.extent * v.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < v.extent; ++e) dot += g[base + e * v.inner] * yv[base + e * v.inner];
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t k = base + e * v.inner;
          gx[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const std::vector<std::size_t>& axes,
                  double eps) {
  const auto& shape = x.shape();
  std::vector<bool> is_norm(shape.size(), false);
  Shape norm_shape;
  for (auto a : axes) {
    if (a >= shape.size() || is_norm[a]) throw ShapeError("layer_norm: invalid normalization axes for " + shape_str(shape));
    is_norm[a] = true;
  }
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (is_norm[a]) norm_shape.push_back(shape[a]);
  }
  if (norm_shape.empty()) throw ShapeError("layer_norm: no normalization axes");
  if (gamma.shape() != norm_shape || beta.shape() != norm_shape) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " must have shape " + shape_str(norm_shape));
  }
  const std::size_t n = x.numel();
  const std::size_t members = shape_numel(norm_shape);
  const std::size_t groups = n / members;
  // Map each flat element to (group, member).
  std::vector<std::size_t> group_of(n), member_of(n);
  {
    const auto strides = strides_of(shape);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t rem = flat, gi = 0, mi = 0;
      for (std::size_t a = 0; a < shape.size(); ++a) {
        const std::size_t idx = rem / strides[a];
        rem %= strides[a];
        if (is_norm[a]) {
          mi = mi * shape[a] + idx;
        } else {
          gi = gi * shape[a] + idx;
        }
      }
      group_of[flat] = gi;
      member_of[flat] = mi;
    }
  }
  const auto xv = x.data();
  std::vector<double> mu(groups, 0.0), var(groups, 0.0);
  for (std::size_t i = 0; i < n; ++i) mu[group_of[i]] += xv[i];
  for (auto& m : mu) m /= static_cast<double>(members);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = xv[i] - mu[group_of[i]];
    var[group_of[i]] += d * d;
  }
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) inv_std[gi] = 1.0 / std::sqrt(var[gi] / static_cast<double>(members) + eps);
  std::vector<double> xhat(n), out(n);
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (xv[i] - mu[group_of[i]]) * inv_std[group_of[i]];
    out[i] = xhat[i] * gv[member_of[i]] + bv[member_of[i]];
  }
  return make_result(
      shape, std::move(out), "layer_norm", {x, gamma, beta},
      [x, gamma, beta, members, groups, group_of = std::move(group_of), member_of = std::move(member_of),
       xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
        const auto gv = gamma.data();
        const std::size_t n = xhat.size();
        if (double* gg = grad_target(gamma)) {
          for (std::size_t i = 0; i < n; ++i) gg[member_of[i]] += g[i] * xhat[i];
        }
        if (double* gb = grad_target(beta)) {
          for (std::size_t i = 0; i < n; ++i) gb[member_of[i]] += g[i];
        }
        if (double* gx = grad_target(x)) {
          std::vector<double> mean_d(groups, 0.0), mean_dx(groups, 0.0);
          for (std::size_t i = 0; i < n; ++i) {
            const double d = g[i] * gv[member_of[i]];
            mean_d[group_of[i]] += d;
            mean_dx[group_of[i]] += d * xhat[i];
          }
          for (std::size_t gi = 0; gi < groups; ++gi) {
            mean_d[gi] /= static_cast<double>(members);
            mean_dx[gi] /= static_cast<double>(members);
          }
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t gi = group_of[i];
            const double d = g[i] * gv[member_of[i]];
            gx[i] += inv_std[gi] * (d - mean_d[gi] - xhat[i] * mean_dx[gi]);
          }
        }
      });
}

BatchNormState BatchNormState::for_features(std::size_t count) {
  BatchNormState s;
  s.running_mean.assign(count, 0.0);
  s.running_var.assign(count, 1.0);
  return s;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training) {
  if (x.rank() < 1 || x.dim(0) < 1) throw ShapeError("batch_norm: needs a non-empty batch axis, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t features = x.numel() / batch;
  if (state.running_mean.size() != features || state.running_var.size() != features) {
    throw ShapeError("batch_norm: running state holds " + std::to_string(state.running_mean.size()) +
                     " features, input " + shape_str(x.shape()) + " has " + std::to_string(features));
  }
  const auto xv = x.data();
  std::vector<double> mu(features, 0.0), var(features, 0.0);
  if (training) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t f = 0; f < features; ++f) mu[f] += xv[b * features + f];
    }
    for (auto& m : mu) m /= static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t f = 0; f < features; ++f) {
        const double d = xv[b * features + f] - mu[f];
        var[f] += d * d;
      }
    }
    for (auto& v : var) v /= static_cast<double>(batch);
    for (std::size_t f = 0; f < features; ++f) {
      state.running_mean[f] = state.momentum * state.running_mean[f] + (1.0 - state.momentum) * mu[f];
      state.running_var[f] = state.momentum * state.running_var[f] + (1.0 - state.momentum) * var[f];
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  std::vector<double> inv_std(features);
  for (std::size_t f = 0; f < features; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + state.eps);
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < features; ++f) {
      out[b * features + f] = (xv[b * features + f] - mu[f]) * inv_std[f];
    }
  }
  auto xhat = std::make_shared<std::vector<double>>();
  if (grad_enabled() && x.requires_grad() && training) *xhat = out;
  return make_result(x.shape(), std::move(out), "batch_norm", {x},
                     [x, batch, features, training, xhat, inv_std = std::move(inv_std)](std::span<const double> g) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       if (!training) {
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t f = 0; f < features; ++f) gx[b * features + f] += g[b * features + f] * inv_std[f];
                         }
                         return;
                       }
                       const auto& xh = *xhat;
                       const double inv_b = 1.0 / static_cast<double>(batch);
                       for (std::size_t f = 0; f < features; ++f) {
                         double mean_g = 0.0, mean_gx = 0.0;
                         for (std::size_t b = 0; b < batch; ++b) {
                           mean_g += g[b * features + f];
                           mean_gx += g[b * features + f] * xh[b * features + f];
                         }
                         mean_g *= inv_b;
                         mean_gx *= inv_b;
                         for (std::size_t b = 0; b < batch; ++b) {
                           const std::size_t k = b * features + f;
                           gx[k] += inv_std[f] * (g[k] - mean_g - xh[k] * mean_gx);
                         }
                       }
                     });
}

Tensor time_contract(const Tensor& e, const Tensor& x) {
  require_rank(e, 3, "time_contract", "score matrix");
  require_rank(x, 4, "time_contract", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), nodes = x.dim(2), steps = x.dim(3);
  if (e.dim(0) != batch || e.dim(2) != steps) {
    throw ShapeError("time_contract: scores " + shape_str(e.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const std::size_t out_steps = e.dim(1);
  const auto ev = e.data();
  const auto xv = x.data();
  const std::size_t rows = channels * nodes;
  std::vector<double> out(batch * rows * out_steps, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* eb = ev.data() + b * out_steps * steps;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = xv.data() + (b * rows + r) * steps;
      double* dst = out.data() + (b * rows + r) * out_steps;
      for (std::size_t t = 0; t < out_steps; ++t) {
        double acc = 0.0;
        for (std::size_t s = 0; s < steps; ++s) acc += eb[t * steps + s] * src[s];
        dst[t] = acc;
      }
    }
  }
  return make_result({batch, channels, nodes, out_steps}, std::move(out), "time_contract", {e, x},
                     [e, x, batch, rows, steps, out_steps](std::span<const double> g) {
                       const auto ev = e.data();
                       const auto xv = x.data();
                       double* ge = grad_target(e);
                       double* gx = grad_target(x);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const double* eb = ev.data() + b * out_steps * steps;
                         for (std::size_t r = 0; r < rows; ++r) {
                           const double* src = xv.data() + (b * rows + r) * steps;
                           const double* go = g.data() + (b * rows + r) * out_steps;
                           for (std::size_t t = 0; t < out_steps; ++t) {
                             if (ge) {
                               double* ge_row = ge + (b * out_steps + t) * steps;
                               for (std::size_t s = 0; s < steps; ++s) ge_row[s] += go[t] * src[s];
                             }
                             if (gx) {
                               double* gx_row = gx + (b * rows + r) * steps;
                               for (std::size_t s = 0; s < steps; ++s) gx_row[s] += go[t] * eb[t * steps + s];
                             }
                           }
                         }
                       }
                     });
}

}  // namespace cdvgm
