#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cdvgm/rng.hpp"
#include "cdvgm/tensor.hpp"

namespace cdvgm::graph {

enum class ChebyRescale { rowsum, none };
enum class LaplacianUpdateMode { scalar_mean, row_mean };

ChebyRescale parse_cheby_rescale(const std::string& s);
std::string to_string(ChebyRescale m);
LaplacianUpdateMode parse_laplacian_update_mode(const std::string& s);
std::string to_string(LaplacianUpdateMode m);

// Learnable trend factors plus the fixed scale of the virtual Laplacian.
struct DvglParams {
  Tensor p_h;  // [N, N]
  Tensor p_b;  // [N, N]
  double theta = 0.5;
  double activation_slope = 0.01;

  // P_h, P_b ~ U(-1/sqrt(N), 1/sqrt(N)).
  static DvglParams init(std::size_t nodes, double theta, double slope, Rng& rng);
  std::size_t nodes() const { return p_h.dim(0); }
  void validate() const;
};

// K feature-mixing matrices Theta_k of shape [in, out].
struct ChebyParams {
  std::vector<Tensor> coeffs;

  static ChebyParams init(std::size_t order, std::size_t in, std::size_t out, Rng& rng);
  std::size_t order() const { return coeffs.size(); }
};

// L_t = P_h P_h^T + P_b
Tensor trend_matrix(const DvglParams& p);

// L_c[i, j] = -sum_t x[i, t] * log(1 + x[j, t]) for x [N, T].
// Entries in [-1e-9, 0) are clamped to zero; anything more negative is a
// DomainError.
Tensor connectivity_matrix(const Tensor& x);

// L_v = theta * leaky_relu(L_t + L_c)
Tensor virtual_laplacian(const Tensor& l_t, const Tensor& l_c, double theta, double slope = 0.01);

// Inter-block evolution: M - L_v L_v^T, where M is the mean of all entries
// (scalar_mean) or of each row (row_mean), broadcast to N x N.
Tensor laplacian_update(const Tensor& l_v, LaplacianUpdateMode mode = LaplacianUpdateMode::scalar_mean);

// rowsum: L / (max_i sum_j |L_ij| + 1e-6); none: L unchanged.
Tensor rescale_laplacian(const Tensor& l, ChebyRescale mode);

// leaky_relu(sum_k T_k(L~) x Theta_k) with the three-term Chebyshev
// recurrence; L~ = rescale_laplacian(l_v). x is [B, C, N, T].
Tensor chebyshev_conv(const Tensor& l_v, const Tensor& x, const ChebyParams& p,
                      ChebyRescale rescale = ChebyRescale::rowsum, double slope = 0.01);

}  // namespace cdvgm::graph
