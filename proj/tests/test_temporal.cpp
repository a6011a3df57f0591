#include <doctest.h>

#include <cmath>

#include "cdvgm/errors.hpp"
#include "cdvgm/gradcheck.hpp"
#include "cdvgm/ops.hpp"
#include "cdvgm/temporal_ops.hpp"
#include "oracles.hpp"

using namespace cdvgm;
using namespace cdvgm::temporal;

namespace {

Tensor t(Shape s, std::vector<double> v, bool grad = false) { return Tensor::from(std::move(s), std::move(v), grad); }

Tensor eye_scores(std::size_t batch, std::size_t steps) {
  std::vector<double> v(batch * steps * steps, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < steps; ++i) v[(b * steps + i) * steps + i] = 1.0;
  return t({batch, steps, steps}, v);
}

void check_row_stochastic(const Tensor& e, double tol) {
  const std::size_t steps = e.dim(2), rows = e.numel() / steps;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < steps; ++c) {
      const double v = e.data()[r * steps + c];
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < tol);
  }
}

// Scalar loop: causal dilated convolution, leaky activation and residual.
std::vector<double> tcn_oracle(std::vector<double> h, const std::vector<std::vector<double>>& kernels,
                               const std::vector<std::size_t>& dilations, double slope) {
  const std::size_t steps = h.size();
  for (std::size_t l = 0; l < kernels.size(); ++l) {
    const auto& w = kernels[l];
    const std::size_t k = w.size();
    std::vector<double> y(steps, 0.0);
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t back = dilations[l] * (k - 1 - j);
        if (s >= back) y[s] += w[j] * h[s - back];
      }
      y[s] = (y[s] >= 0.0 ? y[s] : slope * y[s]) + h[s];
    }
    h = y;
  }
  return h;
}

}  // namespace

TEST_CASE("lt2s") {
  Rng rng(1);
  SUBCASE("zero kernel keeps the endpoints and zeroes the interior") {
    const Tensor x = rng.uniform_tensor({2, 2, 3, 3}, -1, 1);
    const Lt2sParams p{Tensor::zeros({2, 2, 3}), Tensor::zeros({2})};
    const Tensor y = lt2s(x, p);
    for (std::size_t i = 0; i < 2 * 2 * 3; ++i) {
      CHECK(y.data()[i * 3] == x.data()[i * 3]);
      CHECK(y.data()[i * 3 + 1] == 0.0);
      CHECK(y.data()[i * 3 + 2] == x.data()[i * 3 + 2]);
    }
  }
  SUBCASE("hand case") {
    const Lt2sParams p{t({1, 1, 3}, {1, 1, 1}), Tensor::zeros({1})};
    CHECK(lt2s(t({1, 1, 1, 4}, {1, 2, 3, 4}), p).to_vector() == std::vector<double>{1, 6, 9, 4});
  }
  SUBCASE("shape and endpoints for every length") {
    for (std::size_t steps = 3; steps <= 12; ++steps) {
      const Tensor x = rng.uniform_tensor({2, 3, 2, steps}, -1, 1);
      const auto p = Lt2sParams::init(3, rng);
      const Tensor y = lt2s(x, p);
      CHECK(y.shape() == x.shape());
      for (std::size_t r = 0; r < 2 * 3 * 2; ++r) {
        CHECK(y.data()[r * steps] == x.data()[r * steps]);
        CHECK(y.data()[r * steps + steps - 1] == x.data()[r * steps + steps - 1]);
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(lt2s(Tensor::zeros({1, 1, 1, 2}), Lt2sParams::init(1, rng)), DomainError);
    const Lt2sParams wide{Tensor::zeros({1, 1, 5}), Tensor::zeros({1})};
    CHECK_THROWS_AS(lt2s(Tensor::zeros({1, 1, 1, 6}), wide), ShapeError);
  }
  SUBCASE("gradcheck") {
    Tensor x = rng.uniform_tensor({2, 2, 2, 5}, -1, 1, true);
    auto p = Lt2sParams::init(2, rng);
    const Tensor r = rng.normal_tensor({2, 2, 2, 5}, 1.0);
    for (const auto& c : finite_diff_check_params([&] { return sum(mul(lt2s(x, p, 0.2), r)); },
                                                  {{"x", x}, {"w", p.conv_w}, {"b", p.conv_b}})) {
      CHECK_MESSAGE(c.result.max_rel_error < 1e-4, c.name);
    }
  }
}

TEST_CASE("temporal_attention") {
  Rng rng(2);
  SUBCASE("zero parameters give uniform rows") {
    auto p = AttentionParams::init(4, 3, 2, rng);
    for (Tensor* w : {&p.v_p, &p.w_p, &p.b_p, &p.tau1, &p.tau2}) {
      for (double& v : w->mutable_data()) v = 0.0;
    }
    const Tensor e = temporal_attention(rng.uniform_tensor({2, 2, 3, 4}, -1, 1), p, false);
    for (double v : e.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("row-stochastic over 100 parameter draws") {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t steps = 2 + rng.below(10), nodes = 1 + rng.below(5), ch = 1 + rng.below(4);
      auto p = AttentionParams::init(steps, nodes, ch, rng);
      for (Tensor* w : {&p.v_p, &p.w_p, &p.b_p, &p.tau1, &p.tau2}) {
        for (double& v : w->mutable_data()) v = rng.uniform(-3.0, 3.0);
      }
      const std::size_t batch = 1 + rng.below(4);
      const bool training = trial % 2 == 0;
      check_row_stochastic(temporal_attention(rng.uniform_tensor({batch, ch, nodes, steps}, -2, 2), p, training), 1e-9);
    }
  }
  SUBCASE("training mode updates the running moments") {
    auto p = AttentionParams::init(3, 2, 2, rng);
    const auto before = p.bn.running_mean;
    temporal_attention(rng.uniform_tensor({3, 2, 2, 3}, -1, 1), p, true);
    CHECK(p.bn.running_mean != before);
    const auto after = p.bn.running_mean;
    temporal_attention(rng.uniform_tensor({3, 2, 2, 3}, -1, 1), p, false);
    CHECK(p.bn.running_mean == after);
  }
  SUBCASE("length mismatch") {
    auto p = AttentionParams::init(4, 2, 2, rng);
    CHECK_THROWS_AS(temporal_attention(Tensor::zeros({1, 2, 2, 5}), p, false), ShapeError);
  }
  SUBCASE("gradcheck through E") {
    auto p = AttentionParams::init(4, 3, 2, rng);
    Tensor x = rng.uniform_tensor({1, 2, 3, 4}, -1, 1, true);
    const Tensor r = rng.normal_tensor({1, 4, 4}, 1.0);
    const auto checks = finite_diff_check_params([&] { return sum(mul(temporal_attention(x, p, false), r)); },
                                                 {{"x", x}, {"v_p", p.v_p}, {"w_p", p.w_p}, {"b_p", p.b_p}});
    for (const auto& c : checks) CHECK_MESSAGE(c.result.max_rel_error < 1e-4, c.name);
  }
}

TEST_CASE("apply_attention") {
  Rng rng(3);
  const Tensor x = rng.uniform_tensor({2, 3, 2, 4}, -1, 1);
  CHECK(apply_attention(eye_scores(2, 4), x).to_vector() == x.to_vector());

  const Tensor uniform = Tensor::full({2, 4, 4}, 0.25);
  const Tensor avg = apply_attention(uniform, x);
  for (std::size_t r = 0; r < 2 * 3 * 2; ++r) {
    double mean = 0.0;
    for (std::size_t s = 0; s < 4; ++s) mean += x.data()[r * 4 + s] / 4.0;
    for (std::size_t s = 0; s < 4; ++s) CHECK(avg.data()[r * 4 + s] == doctest::Approx(mean).epsilon(1e-14));
  }

  // e = [[1, 2], [3, 4]], x = [5, 6]: out = [1*5 + 2*6, 3*5 + 4*6]
  CHECK(apply_attention(t({1, 2, 2}, {1, 2, 3, 4}), t({1, 1, 1, 2}, {5, 6})).to_vector() == std::vector<double>{17, 39});
  CHECK_THROWS_AS(apply_attention(Tensor::zeros({1, 3, 3}), Tensor::zeros({1, 1, 1, 4})), ShapeError);

  Tensor e = rng.uniform_tensor({2, 4, 4}, 0, 1, true);
  Tensor xs = rng.uniform_tensor({2, 3, 2, 4}, -1, 1, true);
  const Tensor r = rng.normal_tensor({2, 3, 2, 4}, 1.0);
  for (const auto& c : finite_diff_check_params([&] { return sum(mul(apply_attention(e, xs), r)); }, {{"e", e}, {"x_s", xs}})) {
    CHECK_MESSAGE(c.result.max_rel_error < 1e-4, c.name);
  }
}

TEST_CASE("tcn_forward") {
  Rng rng(4);
  SUBCASE("single width-1 identity layer") {
    TcnParams p;
    p.layers.push_back({t({1, 1, 1}, {1}), t({1}, {0}), 1});
    const Tensor x = rng.uniform_tensor({1, 1, 2, 5}, 0, 1);
    // identity conv, leaky pass-through of nonnegative values, then the residual
    CHECK(tcn_forward(x, p).to_vector() == scale(x, 2.0).to_vector());
  }
  SUBCASE("impulse response") {
    TcnParams p;
    p.layers.push_back({t({1, 1, 2}, {1, 1}), t({1}, {0}), 1});
    p.layers.push_back({t({1, 1, 2}, {1, 1}), t({1}, {0}), 2});
    // layer 1: conv [1,1,0,0] + residual -> [2,1,0,0]
    // layer 2: conv [2,1,2,1] + residual -> [4,2,2,1]
    CHECK(tcn_forward(t({1, 1, 1, 4}, {1, 0, 0, 0}), p).to_vector() == std::vector<double>{4, 2, 2, 1});
    CHECK(p.receptive_field() == 4);
  }
  SUBCASE("random kernels against the scalar oracle") {
    for (int trial = 0; trial < 10; ++trial) {
      TcnParams p;
      std::vector<std::vector<double>> kernels;
      std::vector<std::size_t> dilations;
      for (std::size_t l = 0, d = 1; l < 3; ++l, d *= 2) {
        const Tensor w = rng.uniform_tensor({1, 1, 3}, -1, 1);
        p.layers.push_back({w, t({1}, {0}), d});
        kernels.push_back(w.to_vector());
        dilations.push_back(d);
      }
      const Tensor x = rng.uniform_tensor({1, 1, 1, 12}, -1, 1);
      CHECK(oracle::max_abs_diff(tcn_forward(x, p, 0.05).data(), tcn_oracle(x.to_vector(), kernels, dilations, 0.05)) < 1e-14);
    }
  }
  SUBCASE("causality") {
    const auto p = TcnParams::init(2, 3, 3, rng);
    const Tensor x = rng.uniform_tensor({2, 3, 2, 8}, -1, 1);
    Tensor x2 = x.clone();
    for (std::size_t r = 0; r < 2 * 3 * 2; ++r) x2.mutable_data()[r * 8 + 7] += 5.0;
    const Tensor y = tcn_forward(x, p), y2 = tcn_forward(x2, p);
    for (std::size_t r = 0; r < 2 * 3 * 2; ++r)
      for (std::size_t s = 0; s < 7; ++s) CHECK(y.data()[r * 8 + s] == y2.data()[r * 8 + s]);
  }
  SUBCASE("dilations double") {
    const auto p = TcnParams::init(3, 2, 3, rng);
    CHECK(p.layers[0].dilation == 1);
    CHECK(p.layers[1].dilation == 2);
    CHECK(p.layers[2].dilation == 4);
    CHECK(p.receptive_field() == 15);
  }
  SUBCASE("gradcheck") {
    const auto p = TcnParams::init(2, 2, 3, rng);
    Tensor x = rng.uniform_tensor({1, 2, 2, 6}, -1, 1, true);
    const Tensor r = rng.normal_tensor({1, 2, 2, 6}, 1.0);
    std::vector<NamedTensor> leaves{{"x", x}};
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      leaves.push_back({"w" + std::to_string(l), p.layers[l].kernel});
      leaves.push_back({"b" + std::to_string(l), p.layers[l].bias});
    }
    for (const auto& c : finite_diff_check_params([&] { return sum(mul(tcn_forward(x, p, 0.2), r)); }, leaves)) {
      CHECK_MESSAGE(c.result.max_rel_error < 1e-4, c.name);
    }
  }
}
