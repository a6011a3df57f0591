#pragma once

// Reference implementations that share no code with the library.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cdvgm/graph_ops.hpp"
#include "cdvgm/tensor.hpp"

namespace oracle {

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const cdvgm::Tensor& a, const cdvgm::Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// Row-major [m, k] x [k, n].
inline std::vector<double> matmul(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
                                  std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Power-basis coefficients of T_0 .. T_{K-1}; row k holds T_k.
inline std::vector<std::vector<double>> chebyshev_coefficients(std::size_t order) {
  std::vector<std::vector<double>> t(order, std::vector<double>(order, 0.0));
  if (order > 0) t[0][0] = 1.0;
  if (order > 1) t[1][1] = 1.0;
  for (std::size_t k = 2; k < order; ++k) {
    for (std::size_t p = 0; p < order; ++p) {
      t[k][p] = -t[k - 2][p];
      if (p > 0) t[k][p] += 2.0 * t[k - 1][p - 1];
    }
  }
  return t;
}

// Direct evaluation of leaky(sum_k T_k(L) x Theta_k) from power-basis
// coefficients and explicit matrix powers.
inline std::vector<double> cheby_oracle(const cdvgm::Tensor& l, const cdvgm::Tensor& x,
                                        const cdvgm::graph::ChebyParams& p, double slope) {
  const std::size_t n = l.dim(0), batch = x.dim(0), cin = x.dim(1), steps = x.dim(3);
  const std::size_t order = p.order(), cout = p.coeffs[0].dim(1);
  const auto coef = chebyshev_coefficients(order);
  std::vector<std::vector<double>> powers{std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) powers[0][i * n + i] = 1.0;
  for (std::size_t q = 1; q < order; ++q) powers.push_back(matmul(powers.back(), l.data(), n, n, n));

  std::vector<double> y(batch * cout * n * steps, 0.0);
  for (std::size_t k = 0; k < order; ++k) {
    std::vector<double> tk(n * n, 0.0);
    for (std::size_t q = 0; q < order; ++q)
      for (std::size_t e = 0; e < n * n; ++e) tk[e] += coef[k][q] * powers[q][e];
    const auto theta = p.coeffs[k].data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t s = 0; s < steps; ++s) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t j = 0; j < n; ++j) acc += tk[i * n + j] * x.data()[((b * cin + c) * n + j) * steps + s] * theta[c * cout + o];
            y[((b * cout + o) * n + i) * steps + s] += acc;
          }
  }
  for (double& v : y) v = v >= 0.0 ? v : slope * v;
  return y;
}

struct Scores {
  double mae, rmse, mape;
};

// Scalar loops over flat arrays; MAPE skips |truth| < 1.
inline Scores scores(std::span<const double> pred, std::span<const double> truth) {
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (std::abs(truth[i]) >= 1.0) {
      pct_sum += std::abs(e / truth[i]);
      ++pct_n;
    }
  }
  const double n = static_cast<double>(pred.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), pct_n ? 100.0 * pct_sum / static_cast<double>(pct_n) : 0.0};
}

}  // namespace oracle
