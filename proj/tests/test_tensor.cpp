#include <doctest.h>

#include <cmath>

#include "cdvgm/errors.hpp"
#include "cdvgm/gradcheck.hpp"
#include "cdvgm/ops.hpp"
#include "cdvgm/rng.hpp"
#include "oracles.hpp"

using namespace cdvgm;

namespace {

Tensor t(Shape s, std::vector<double> v, bool grad = false) { return Tensor::from(std::move(s), std::move(v), grad); }

std::vector<double> vec(const Tensor& x) { return x.to_vector(); }

void check_close(const Tensor& x, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(x.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(x.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor x = Tensor::zeros({2, 3, 4}, true);
  CHECK(x.numel() == shape_numel(x.shape()));
  CHECK(x.data().size() == 24);
  CHECK(x.grad().size() == x.numel());
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    const Tensor y = matmul(t({2, 2}, {1, 0, 0, 1}), t({2, 2}, {1, 2, 3, 4}));
    CHECK(vec(y) == std::vector<double>{1, 2, 3, 4});
  }
  SUBCASE("annihilating product") {
    const Tensor y = matmul(t({2, 2}, {1, 0, 0, 0}), t({2, 2}, {0, 0, 0, 1}));
    CHECK(vec(y) == std::vector<double>{0, 0, 0, 0});
  }
  SUBCASE("triple-loop oracle on random shapes up to 16x16") {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
      const Tensor a = rng.uniform_tensor({m, k}, -1, 1), b = rng.uniform_tensor({k, n}, -1, 1);
      const auto ref = oracle::matmul(a.data(), b.data(), m, k, n);
      CHECK(oracle::max_abs_diff(matmul(a, b).data(), ref) < 1e-12);
    }
    const Tensor a = rng.uniform_tensor({3, 4}, -1, 1), b = rng.uniform_tensor({4, 2}, -1, 1);
    CHECK(oracle::max_abs_diff(matmul(a, b).data(), oracle::matmul(a.data(), b.data(), 3, 4, 2)) < 1e-12);
  }
  SUBCASE("batched broadcast") {
    Rng rng(12);
    const Tensor a = rng.uniform_tensor({3, 2, 4}, -1, 1), b = rng.uniform_tensor({4, 5}, -1, 1);
    const Tensor y = matmul(a, b);
    REQUIRE(y.shape() == Shape{3, 2, 5});
    for (std::size_t i = 0; i < 3; ++i) {
      const auto ref = oracle::matmul(a.data().subspan(i * 8, 8), b.data(), 2, 4, 5);
      CHECK(oracle::max_abs_diff(y.data().subspan(i * 10, 10), ref) < 1e-12);
    }
  }
  SUBCASE("gradients") {
    Rng rng(13);
    Tensor a = rng.uniform_tensor({3, 4}, -1, 1, true), b = rng.uniform_tensor({4, 2}, -1, 1, true);
    const Tensor r = rng.normal_tensor({3, 2}, 1.0);
    sum(mul(matmul(a, b), r)).backward();
    // dA = R B^T, dB = A^T R
    const auto bt = vec(transpose(b.detach()));
    const auto at = vec(transpose(a.detach()));
    CHECK(oracle::max_abs_diff(a.grad(), oracle::matmul(r.data(), bt, 3, 2, 4)) < 1e-12);
    CHECK(oracle::max_abs_diff(b.grad(), oracle::matmul(at, r.data(), 4, 3, 2)) < 1e-12);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("(2,3)") != std::string::npos);
      CHECK(msg.find("(4,2)") != std::string::npos);
    }
  }
}

TEST_CASE("pointwise_conv") {
  Rng rng(21);
  SUBCASE("identity weights") {
    const Tensor x = rng.uniform_tensor({2, 3, 2, 4}, -1, 1);
    const Tensor w = t({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(vec(pointwise_conv(x, w, Tensor::zeros({3}))) == vec(x));
  }
  SUBCASE("hand case") {
    const Tensor y = pointwise_conv(Tensor::full({1, 2, 2, 3}, 1.0), t({1, 2}, {1, 1}), t({1}, {0.5}));
    REQUIRE(y.shape() == Shape{1, 1, 2, 3});
    for (double v : y.data()) CHECK(v == 2.5);
  }
  SUBCASE("gradcheck") {
    Tensor x = rng.uniform_tensor({2, 3, 2, 3}, -1, 1, true);
    Tensor w = rng.uniform_tensor({2, 3}, -1, 1, true), b = rng.uniform_tensor({2}, -1, 1, true);
    const Tensor r = rng.normal_tensor({2, 2, 2, 3}, 1.0);
    const auto checks = finite_diff_check_params([&] { return sum(mul(pointwise_conv(x, w, b), r)); },
                                                 {{"x", x}, {"w", w}, {"b", b}});
    for (const auto& c : checks) CHECK_MESSAGE(c.result.max_rel_error < 1e-6, c.name);
  }
  SUBCASE("channel mismatch") { CHECK_THROWS_AS(pointwise_conv(Tensor::zeros({1, 2, 1, 1}), Tensor::zeros({1, 3})), ShapeError); }
}

TEST_CASE("temporal_conv") {
  SUBCASE("width-1 identity") {
    Rng rng(31);
    const Tensor x = rng.uniform_tensor({1, 1, 2, 5}, -1, 1);
    CHECK(vec(temporal_conv(x, t({1, 1, 1}, {1}), t({1}, {0}), 1, false)) == vec(x));
  }
  SUBCASE("unpadded k=3") {
    const Tensor y = temporal_conv(t({1, 1, 1, 4}, {1, 2, 3, 4}), t({1, 1, 3}, {1, 1, 1}), {}, 1, false);
    CHECK(vec(y) == std::vector<double>{6, 9});
  }
  SUBCASE("causal k=2 dilation 2") {
    const Tensor y = temporal_conv(Tensor::full({1, 1, 1, 4}, 1.0), t({1, 1, 2}, {1, 1}), {}, 2, true);
    CHECK(vec(y) == std::vector<double>{1, 1, 2, 2});
  }
  SUBCASE("too short for the kernel span") {
    CHECK_THROWS_AS(temporal_conv(Tensor::zeros({1, 1, 1, 3}), Tensor::zeros({1, 1, 3}), {}, 2, false), DomainError);
  }
}

TEST_CASE("softmax") {
  check_close(softmax(Tensor::full({4}, 3.0), 0), {0.25, 0.25, 0.25, 0.25});
  check_close(softmax(t({2}, {0.0, std::log(3.0)}), 0), {0.25, 0.75});
  Rng rng(41);
  for (int i = 0; i < 20; ++i) {
    const Tensor y = softmax(rng.uniform_tensor({5, 7}, -30, 30), 1);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(y.data()[r * 7 + c] >= 0.0);
        s += y.data()[r * 7 + c];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  const Tensor big = softmax(t({3}, {1000.0, 1000.0, -1000.0}), 0);
  check_close(big, {0.5, 0.5, 0.0});
}

TEST_CASE("layer_norm") {
  const Tensor y = layer_norm(t({3}, {1, 2, 3}), Tensor::full({3}, 1.0), Tensor::zeros({3}), {0});
  double mu = 0.0, var = 0.0;
  for (double v : y.data()) mu += v / 3.0;
  for (double v : y.data()) var += (v - mu) * (v - mu) / 3.0;
  CHECK(std::abs(mu) < 1e-12);
  CHECK(std::abs(var - 1.0) < 1e-4);

  const Tensor flat = layer_norm(Tensor::full({4}, 7.0), Tensor::full({4}, 1.0), Tensor::zeros({4}), {0});
  for (double v : flat.data()) CHECK(std::abs(v) < 1e-2);

  Rng rng(51);
  Tensor x = rng.uniform_tensor({2, 3, 2, 2}, -1, 1, true);
  Tensor g = rng.uniform_tensor({3}, 0.5, 1.5, true), b = rng.uniform_tensor({3}, -1, 1, true);
  const Tensor r = rng.normal_tensor({2, 3, 2, 2}, 1.0);
  const auto checks = finite_diff_check_params([&] { return sum(mul(layer_norm(x, g, b, {1}), r)); },
                                               {{"x", x}, {"gamma", g}, {"beta", b}});
  for (const auto& c : checks) CHECK_MESSAGE(c.result.max_rel_error < 1e-5, c.name);
}

TEST_CASE("batch_norm") {
  SUBCASE("two equal samples") {
    auto st = BatchNormState::for_features(3);
    const Tensor y = batch_norm(t({2, 3}, {1, 2, 3, 1, 2, 3}), st, true);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("hand case and running moments") {
    auto st = BatchNormState::for_features(1);
    const Tensor y = batch_norm(t({2, 1}, {0.0, 2.0}), st, true);
    CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-2));
    CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-2));
    // momentum 0.9 on the previous value: 0.9 * 0 + 0.1 * 1
    CHECK(st.running_mean[0] == doctest::Approx(0.1));
  }
  SUBCASE("eval identity") {
    auto st = BatchNormState::for_features(4);
    st.eps = 0.0;
    Rng rng(61);
    const Tensor x = rng.uniform_tensor({3, 4}, -2, 2);
    CHECK(oracle::max_abs_diff(batch_norm(x, st, false), x) < 1e-15);
  }
}

TEST_CASE("backward") {
  Tensor x = t({3}, {0.3, -1.0, 2.0}, true);
  sum(x).backward();
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  Tensor y = t({2}, {1, 2}, true);
  sum(square(y)).backward();
  CHECK(y.grad() == std::vector<double>{2, 4});
  sum(square(y)).backward();
  CHECK(y.grad() == std::vector<double>{4, 8});

  CHECK_THROWS_AS(mul(y, y).backward(), ShapeError);
}

TEST_CASE("shared subexpressions accumulate once per use") {
  Tensor x = t({2}, {1.5, -0.5}, true);
  const Tensor s = sin(x);
  sum(add(mul(s, s), s)).backward();
  for (std::size_t i = 0; i < 2; ++i) {
    const double v = x.data()[i];
    CHECK(x.grad()[i] == doctest::Approx((2 * std::sin(v) + 1) * std::cos(v)).epsilon(1e-14));
  }
}

TEST_CASE("finite_diff_check") {
  Rng rng(71);
  const Tensor x = rng.uniform_tensor({4, 3}, -1, 1);
  CHECK(finite_diff_check([](const Tensor& v) { return sum(v); }, x).max_rel_error < 1e-10);
  CHECK(finite_diff_check([](const Tensor& v) { return sum(sin(v)); }, x, 1e-5).max_rel_error < 1e-6);
  const Tensor w = rng.uniform_tensor({3, 5}, -1, 1);
  const Tensor r = rng.normal_tensor({4, 5}, 1.0);
  CHECK(finite_diff_check([&](const Tensor& v) { return sum(mul(softmax(matmul(v, w), 1), r)); }, x).max_rel_error < 1e-5);
  CHECK_THROWS_AS(finite_diff_check([](const Tensor& v) { return scale(v, 2.0); }, x), ShapeError);
  CHECK(relative_error(1e-12, 0.0) == doctest::Approx(1e-4));
}

TEST_CASE("determinism of forward and backward") {
  auto run = [] {
    Rng rng(81);
    Tensor a = rng.uniform_tensor({4, 4}, -1, 1, true), b = rng.uniform_tensor({4, 3}, -1, 1, true);
    const Tensor y = softmax(matmul(leaky_relu(a), b), 1);
    sum(square(y)).backward();
    return std::make_tuple(y.to_vector(), a.grad(), b.grad());
  };
  CHECK(run() == run());
}

TEST_CASE("corrupted backward rule is detected") {
  Rng rng(91);
  const Tensor x = rng.uniform_tensor({3, 3}, 0.2, 1.0);
  auto f = [](const Tensor& v) { return sum(sigmoid(v)); };
  CHECK(finite_diff_check(f, x).max_rel_error < 1e-6);
  testing::BackwardCorruption broken("sigmoid", 1.5);
  CHECK(finite_diff_check(f, x).max_rel_error > 0.1);
}
