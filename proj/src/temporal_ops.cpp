#include "cdvgm/temporal_ops.hpp"

#include <cmath>

#include "cdvgm/errors.hpp"

namespace cdvgm::temporal {

namespace {

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

Lt2sParams Lt2sParams::init(std::size_t channels, Rng& rng) {
  const double bound = fan_in_bound(channels * 3);
  return {rng.uniform_tensor({channels, channels, 3}, -bound, bound, true),
          rng.uniform_tensor({channels}, -bound, bound, true)};
}

AttentionParams AttentionParams::init(std::size_t steps, std::size_t nodes, std::size_t channels, Rng& rng) {
  AttentionParams p;
  const double bt = fan_in_bound(steps);
  const double bc = fan_in_bound(channels);
  p.v_p = rng.uniform_tensor({steps, steps}, -bt, bt, true);
  p.w_p = rng.uniform_tensor({nodes, channels}, -bc, bc, true);
  p.b_p = Tensor::zeros({steps, steps}, true);
  p.tau1 = rng.uniform_tensor({channels, channels, 1}, -bc, bc, true);
  p.tau2 = rng.uniform_tensor({1, channels, 1}, -bc, bc, true);
  p.bn = BatchNormState::for_features(steps * steps);
  return p;
}

TcnParams TcnParams::init(std::size_t layers, std::size_t channels, std::size_t kernel, Rng& rng) {
  TcnParams p;
  const double bound = fan_in_bound(channels * kernel);
  std::size_t dilation = 1;
  for (std::size_t i = 0; i < layers; ++i) {
    p.layers.push_back({rng.uniform_tensor({channels, channels, kernel}, -bound, bound, true),
                        rng.uniform_tensor({channels}, -bound, bound, true), dilation});
    dilation *= 2;
  }
  return p;
}

std::size_t TcnParams::receptive_field() const {
  std::size_t field = 1;
  for (const auto& l : layers) field += l.dilation * (l.kernel.dim(2) - 1);
  return field;
}

Tensor lt2s(const Tensor& x_low, const Lt2sParams& p, double slope) {
  if (x_low.rank() != 4) throw ShapeError("lt2s: input must be [B, C, N, T], got " + shape_str(x_low.shape()));
  const std::size_t steps = x_low.dim(3);
  if (steps < 3) throw DomainError("lt2s: needs at least 3 time steps, got " + std::to_string(steps));
  if (p.conv_w.rank() != 3 || p.conv_w.dim(2) != 3) {
    throw ShapeError("lt2s: kernel must have time width 3, got " + shape_str(p.conv_w.shape()));
  }
  const Tensor interior = leaky_relu(temporal_conv(x_low, p.conv_w, p.conv_b, 1, false), slope);
  return concat({narrow(x_low, 3, 0, 1), interior, narrow(x_low, 3, steps - 1, 1)}, 3);
}

Tensor temporal_attention(const Tensor& x_t, AttentionParams& p, bool training) {
  if (x_t.rank() != 4) throw ShapeError("temporal_attention: input must be [B, C, N, T], got " + shape_str(x_t.shape()));
  const std::size_t batch = x_t.dim(0), channels = x_t.dim(1), nodes = x_t.dim(2), steps = x_t.dim(3);
  if (p.v_p.shape() != Shape{steps, steps} || p.b_p.shape() != Shape{steps, steps}) {
    throw ShapeError("temporal_attention: sequence length " + std::to_string(steps) + " does not match V_p " +
                     shape_str(p.v_p.shape()));
  }
  if (p.w_p.shape() != Shape{nodes, channels}) {
    throw ShapeError("temporal_attention: W_p " + shape_str(p.w_p.shape()) + " vs input " + shape_str(x_t.shape()));
  }
  const Tensor proj1 = temporal_conv(x_t, p.tau1, {}, 1, false);  // [B, C, N, T]
  const Tensor proj2 = temporal_conv(x_t, p.tau2, {}, 1, false);  // [B, 1, N, T]

  // lhs[b, t, n] = sum_c W_p[n, c] * proj1[b, c, n, t]
  const Tensor weighted = mul(permute(proj1, {0, 3, 2, 1}), broadcast_to(reshape(p.w_p, {1, 1, nodes, channels}),
                                                                          {batch, steps, nodes, channels}));
  const Tensor lhs = sum_axis(weighted, 3);                // [B, T, N]
  const Tensor rhs = reshape(proj2, {batch, nodes, steps});  // [B, N, T]
  const Tensor logits = add(matmul(lhs, rhs), broadcast_to(reshape(p.b_p, {1, steps, steps}), {batch, steps, steps}));
  const Tensor scores = matmul(p.v_p, sigmoid(logits));  // [B, T, T]
  return softmax(batch_norm(scores, p.bn, training), 2);
}

Tensor apply_attention(const Tensor& e, const Tensor& x_s) {
  if (e.rank() != 3 || x_s.rank() != 4 || e.dim(1) != x_s.dim(3) || e.dim(2) != x_s.dim(3)) {
    throw ShapeError("apply_attention: scores " + shape_str(e.shape()) + " and input " + shape_str(x_s.shape()) +
                     " disagree on time length");
  }
  return time_contract(e, x_s);
}

Tensor tcn_forward(const Tensor& x, const TcnParams& p, double slope) {
  Tensor h = x;
  for (const auto& layer : p.layers) {
    Tensor y = leaky_relu(temporal_conv(h, layer.kernel, layer.bias, layer.dilation, true), slope);
    h = y.dim(1) == h.dim(1) ? add(y, h) : y;
  }
  return h;
}

}  // namespace cdvgm::temporal
