#include "cdvgm/graph_ops.hpp"

#include <cmath>

#include "cdvgm/errors.hpp"
#include "cdvgm/ops.hpp"

namespace cdvgm::graph {

ChebyRescale parse_cheby_rescale(const std::string& s) {
  if (s == "rowsum") return ChebyRescale::rowsum;
  if (s == "none") return ChebyRescale::none;
  throw ConfigError("cheby_rescale must be rowsum|none, got '" + s + "'");
}

std::string to_string(ChebyRescale m) { return m == ChebyRescale::rowsum ? "rowsum" : "none"; }

LaplacianUpdateMode parse_laplacian_update_mode(const std::string& s) {
  if (s == "scalar_mean") return LaplacianUpdateMode::scalar_mean;
  if (s == "row_mean") return LaplacianUpdateMode::row_mean;
  throw ConfigError("laplacian_update_mode must be scalar_mean|row_mean, got '" + s + "'");
}

std::string to_string(LaplacianUpdateMode m) {
  return m == LaplacianUpdateMode::scalar_mean ? "scalar_mean" : "row_mean";
}

DvglParams DvglParams::init(std::size_t nodes, double theta, double slope, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(nodes));
  DvglParams p;
  p.p_h = rng.uniform_tensor({nodes, nodes}, -bound, bound, true);
  p.p_b = rng.uniform_tensor({nodes, nodes}, -bound, bound, true);
  p.theta = theta;
  p.activation_slope = slope;
  p.validate();
  return p;
}

void DvglParams::validate() const {
  if (p_h.rank() != 2 || p_h.dim(0) != p_h.dim(1) || p_b.shape() != p_h.shape()) {
    throw ShapeError("DvglParams: P_h " + shape_str(p_h.shape()) + " and P_b " + shape_str(p_b.shape()) +
                     " must be equal square matrices");
  }
  if (!(theta > 0.0)) throw DomainError("DvglParams: theta must be positive");
}

ChebyParams ChebyParams::init(std::size_t order, std::size_t in, std::size_t out, Rng& rng) {
  if (order < 1) throw DomainError("ChebyParams: order K must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * order));
  ChebyParams p;
  for (std::size_t k = 0; k < order; ++k) p.coeffs.push_back(rng.uniform_tensor({in, out}, -bound, bound, true));
  return p;
}

Tensor trend_matrix(const DvglParams& p) {
  p.validate();
  return add(matmul(p.p_h, transpose(p.p_h)), p.p_b);
}

Tensor connectivity_matrix(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("connectivity_matrix: expects [N, T], got " + shape_str(x.shape()));
  for (double v : x.data()) {
    if (v < -1e-9 || std::isnan(v)) {
      throw DomainError("connectivity_matrix: entries must be nonnegative, found " + std::to_string(v));
    }
  }
  const Tensor clamped = relu(x);
  return neg(matmul(clamped, transpose(log1p(clamped))));
}

Tensor virtual_laplacian(const Tensor& l_t, const Tensor& l_c, double theta, double slope) {
  if (l_t.shape() != l_c.shape()) {
    throw ShapeError("virtual_laplacian: L_t " + shape_str(l_t.shape()) + " vs L_c " + shape_str(l_c.shape()));
  }
  return scale(leaky_relu(add(l_t, l_c), slope), theta);
}

Tensor laplacian_update(const Tensor& l_v, LaplacianUpdateMode mode) {
  if (l_v.rank() != 2 || l_v.dim(0) != l_v.dim(1)) {
    throw ShapeError("laplacian_update: expects a square matrix, got " + shape_str(l_v.shape()));
  }
  const Tensor gram = matmul(l_v, transpose(l_v));
  if (mode == LaplacianUpdateMode::scalar_mean) return sub(mean(l_v), gram);
  return sub(broadcast_to(mean_axis(l_v, 1, true), l_v.shape()), gram);
}

Tensor rescale_laplacian(const Tensor& l, ChebyRescale mode) {
  if (mode == ChebyRescale::none) return l;
  const Tensor norm = amax(sum_axis(abs(l), 1));
  return div(l, add_scalar(norm, 1e-6));
}

Tensor chebyshev_conv(const Tensor& l_v, const Tensor& x, const ChebyParams& p, ChebyRescale rescale, double slope) {
  if (p.order() < 1) throw DomainError("chebyshev_conv: order K must be >= 1");
  if (x.rank() != 4) throw ShapeError("chebyshev_conv: input must be [B, C, N, T], got " + shape_str(x.shape()));
  if (l_v.rank() != 2 || l_v.dim(0) != l_v.dim(1) || l_v.dim(0) != x.dim(2)) {
    throw ShapeError("chebyshev_conv: Laplacian " + shape_str(l_v.shape()) + " does not match node axis of " +
                     shape_str(x.shape()));
  }
  for (const auto& th : p.coeffs) {
    if (th.rank() != 2 || th.dim(0) != x.dim(1) || th.shape() != p.coeffs.front().shape()) {
      throw ShapeError("chebyshev_conv: coefficient " + shape_str(th.shape()) + " vs input channels of " +
                       shape_str(x.shape()));
    }
  }
  const Tensor lap = rescale_laplacian(l_v, rescale);
  // Node mixing: matmul of [N, N] against the [.., N, T] trailing matrices.
  Tensor prev2 = x;
  Tensor acc = pointwise_conv(x, transpose(p.coeffs[0]));
  if (p.order() > 1) {
    Tensor prev1 = matmul(lap, x);
    acc = add(acc, pointwise_conv(prev1, transpose(p.coeffs[1])));
    for (std::size_t k = 2; k < p.order(); ++k) {
      Tensor next = sub(scale(matmul(lap, prev1), 2.0), prev2);
      acc = add(acc, pointwise_conv(next, transpose(p.coeffs[k])));
      prev2 = prev1;
      prev1 = next;
    }
  }
  return leaky_relu(acc, slope);
}

}  // namespace cdvgm::graph
