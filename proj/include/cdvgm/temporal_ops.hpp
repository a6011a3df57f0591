#pragma once

#include <cstddef>
#include <vector>

#include "cdvgm/ops.hpp"
#include "cdvgm/rng.hpp"
#include "cdvgm/tensor.hpp"

namespace cdvgm::temporal {

// Interior convolution of the long-term strengthening reshaping. The kernel
// spans exactly three steps so that the two endpoint slices restore length T.
struct Lt2sParams {
  Tensor conv_w;  // [C, C, 3]
  Tensor conv_b;  // [C]

  static Lt2sParams init(std::size_t channels, Rng& rng);
};

// Temporal self-attention over a length-T sequence.
//   lhs[b, t, n]  = sum_c W_p[n, c] * (x * tau1)[b, c, n, t]
//   rhs[b, n, s]  = (x * tau2)[b, 0, n, s]
//   E'            = V_p sigmoid(lhs rhs + b_p)
//   E             = softmax_rows(batch_norm(E'))
// tau1 / tau2 are width-1 temporal kernels (channel projections).
struct AttentionParams {
  Tensor v_p;   // [T, T]
  Tensor w_p;   // [N, C]
  Tensor b_p;   // [T, T]
  Tensor tau1;  // [C, C, 1]
  Tensor tau2;  // [1, C, 1]
  BatchNormState bn;  // per (t, s) position

  static AttentionParams init(std::size_t steps, std::size_t nodes, std::size_t channels, Rng& rng);
  std::size_t steps() const { return v_p.dim(0); }
};

struct TcnLayer {
  Tensor kernel;  // [Cout, Cin, k]
  Tensor bias;    // [Cout]
  std::size_t dilation = 1;
};

struct TcnParams {
  std::vector<TcnLayer> layers;

  // Layers with dilations 1, 2, 4, ... and equal in/out width.
  static TcnParams init(std::size_t layers, std::size_t channels, std::size_t kernel, Rng& rng);
  std::size_t receptive_field() const;
};

// [x_0, leaky_relu(conv3(x)), x_{T-1}] along time; same shape as the input.
Tensor lt2s(const Tensor& x_low, const Lt2sParams& p, double slope = 0.01);

// Row-stochastic [B, T, T] scores. batch_norm runs in training or eval mode
// and, when training, updates p.bn.
Tensor temporal_attention(const Tensor& x_t, AttentionParams& p, bool training);

// out[b, c, n, t] = sum_s e[b, t, s] * x_s[b, c, n, s]
Tensor apply_attention(const Tensor& e, const Tensor& x_s);

// Causal dilated convolutions, each followed by leaky_relu and a residual
// add when the layer keeps the channel width.
Tensor tcn_forward(const Tensor& x, const TcnParams& p, double slope = 0.01);

}  // namespace cdvgm::temporal
