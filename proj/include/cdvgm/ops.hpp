#pragma once

#include <cstddef>
#include <vector>

#include "cdvgm/tensor.hpp"

namespace cdvgm {

// Elementwise binary ops: shapes must match, or one side holds a single value
// (scalar broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log1p(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope = 0.01);
Tensor relu(const Tensor& a);

// Full reductions return shape ().
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Maximum entry; the gradient flows to the first maximal position.
Tensor amax(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

// Expands size-1 axes of `a` (same rank) to `shape`.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// Adds a 1-D bias along `axis`.
Tensor add_bias(const Tensor& x, const Tensor& bias, std::size_t axis);

// [.., m, k] x [.., k, n] -> [.., m, n]. Leading batch axes broadcast
// numpy-style (right aligned, equal or 1); either side may be a plain matrix.
Tensor matmul(const Tensor& a, const Tensor& b);

// x [B, Cin, N, T], w [Cout, Cin], optional bias [Cout] -> [B, Cout, N, T].
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// 1-D convolution along the last (time) axis of x [B, C, N, T] with w
// [Cout, C, k] and optional bias [Cout]. Causal mode left-pads with
// dilation*(k-1) zeros (output length T); otherwise the output has length
// T - dilation*(k-1).
Tensor temporal_conv(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t dilation, bool causal);

Tensor softmax(const Tensor& x, std::size_t axis);

// Normalizes over `axes` (zero mean, unit variance, eps inside the root), then
// applies gamma/beta whose shape equals x's extent along those axes.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const std::vector<std::size_t>& axes,
                  double eps = 1e-5);

// Running moments for batch_norm over axis 0; one entry per position of x[0].
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  static BatchNormState for_features(std::size_t count);
};

// Training mode normalizes by (biased) batch statistics and folds them into
// the running moments; eval mode uses the running moments.
Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training);

// out[b, c, n, t] = sum_s e[b, t, s] * x[b, c, n, s]
Tensor time_contract(const Tensor& e, const Tensor& x);

}  // namespace cdvgm
