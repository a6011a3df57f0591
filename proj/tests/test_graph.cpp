#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "cdvgm/errors.hpp"
#include "cdvgm/gradcheck.hpp"
#include "cdvgm/graph_ops.hpp"
#include "cdvgm/ops.hpp"
#include "oracles.hpp"

using namespace cdvgm;
using namespace cdvgm::graph;

namespace {

Tensor t(Shape s, std::vector<double> v, bool grad = false) { return Tensor::from(std::move(s), std::move(v), grad); }

Eigen::MatrixXd to_eigen(const Tensor& m) {
  const std::size_t r = m.dim(0), c = m.dim(1);
  Eigen::MatrixXd out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = m.data()[i * c + j];
  return out;
}

double min_eigenvalue_symmetric(const Tensor& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(m));
  return solver.eigenvalues().minCoeff();
}

ChebyParams identity_coeffs(std::size_t order, std::size_t channels) {
  ChebyParams p;
  std::vector<double> eye(channels * channels, 0.0);
  for (std::size_t i = 0; i < channels; ++i) eye[i * channels + i] = 1.0;
  for (std::size_t k = 0; k < order; ++k) p.coeffs.push_back(t({channels, channels}, eye));
  return p;
}

}  // namespace

TEST_CASE("trend_matrix") {
  Rng rng(1);
  SUBCASE("identity") {
    DvglParams p{t({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2, 2})};
    CHECK(trend_matrix(p).to_vector() == std::vector<double>{1, 0, 0, 1});
  }
  SUBCASE("term isolation") {
    DvglParams p{Tensor::zeros({2, 2}), t({2, 2}, {0, 1, 2, 0})};
    CHECK(trend_matrix(p).to_vector() == std::vector<double>{0, 1, 2, 0});
  }
  SUBCASE("L_t - P_b is symmetric") {
    auto p = DvglParams::init(4, 0.5, 0.01, rng);
    const Tensor d = sub(trend_matrix(p), p.p_b);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(d.at({i, j}) - d.at({j, i})) < 1e-12);
  }
  SUBCASE("P_h P_h^T is positive semidefinite") {
    for (int trial = 0; trial < 8; ++trial) {
      DvglParams p{rng.uniform_tensor({8, 8}, -2, 2), Tensor::zeros({8, 8})};
      CHECK(min_eigenvalue_symmetric(trend_matrix(p)) >= -1e-10);
    }
  }
  SUBCASE("init range") {
    auto p = DvglParams::init(9, 0.5, 0.01, rng);
    for (double v : p.p_h.data()) CHECK(std::abs(v) <= 1.0 / 3.0);
    for (double v : p.p_b.data()) CHECK(std::abs(v) <= 1.0 / 3.0);
  }
  SUBCASE("validation") {
    auto p = DvglParams::init(3, 0.5, 0.01, rng);
    p.theta = 0.0;
    CHECK_THROWS_AS(p.validate(), DomainError);
  }
}

TEST_CASE("connectivity_matrix") {
  CHECK(connectivity_matrix(Tensor::zeros({3, 4})).to_vector() == std::vector<double>(9, 0.0));
  const Tensor l = connectivity_matrix(t({2, 1}, {1, 0}));
  CHECK(l.at({0, 0}) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(l.at({0, 1}) == 0.0);
  CHECK(l.at({1, 0}) == 0.0);
  CHECK(l.at({1, 1}) == 0.0);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = rng.uniform_tensor({5, 6}, 0.0, 3.0);
    const Tensor l = connectivity_matrix(x);
    for (double v : l.data()) CHECK(v <= 0.0);
  }
  const Tensor asym = connectivity_matrix(t({2, 2}, {1, 2, 0.5, 0.1}));
  CHECK(asym.at({0, 1}) != doctest::Approx(asym.at({1, 0})));

  CHECK_THROWS_AS(connectivity_matrix(t({1, 2}, {0.5, -0.1})), DomainError);
  const Tensor tiny = connectivity_matrix(t({1, 2}, {0.5, -1e-12}));
  for (double v : tiny.data()) CHECK(std::isfinite(v));
}

TEST_CASE("virtual_laplacian") {
  Rng rng(3);
  const Tensor a = rng.uniform_tensor({3, 3}, 0.0, 1.0), zero = Tensor::zeros({3, 3});
  CHECK(oracle::max_abs_diff(virtual_laplacian(a, zero, 1.0), a) == 0.0);
  CHECK(virtual_laplacian(t({1, 1}, {-1}), t({1, 1}, {0}), 0.5).item() == doctest::Approx(-0.005).epsilon(1e-14));
  const Tensor lt = rng.uniform_tensor({4, 4}, -1, 1), lc = rng.uniform_tensor({4, 4}, -1, 0);
  const Tensor one = virtual_laplacian(lt, lc, 0.7), two = virtual_laplacian(lt, lc, 1.4);
  for (std::size_t i = 0; i < 16; ++i) CHECK(two.data()[i] == doctest::Approx(2.0 * one.data()[i]).epsilon(1e-15));
}

TEST_CASE("laplacian_update") {
  CHECK(laplacian_update(Tensor::zeros({3, 3})).to_vector() == std::vector<double>(9, 0.0));
  CHECK(laplacian_update(t({2, 2}, {1, 0, 0, 1})).to_vector() == std::vector<double>{-0.5, 0.5, 0.5, -0.5});

  Rng rng(4);
  const Tensor l = rng.uniform_tensor({4, 4}, -1, 1);
  double mean = 0.0;
  for (double v : l.data()) mean += v / 16.0;
  const Tensor u = laplacian_update(l);
  // mean - u = L L^T must be PSD
  const Tensor gram = sub(Tensor::full({4, 4}, mean), u);
  CHECK(min_eigenvalue_symmetric(gram) >= -1e-10);
  CHECK(oracle::max_abs_diff(gram.data(), oracle::matmul(l.data(), transpose(l).data(), 4, 4, 4)) < 1e-12);

  const Tensor rows = laplacian_update(t({2, 2}, {1, 3, 0, 2}), LaplacianUpdateMode::row_mean);
  // row means 2 and 1; L L^T = [[10, 6], [6, 4]]
  CHECK(rows.to_vector() == std::vector<double>{-8, -4, -5, -3});
}

TEST_CASE("rescale_laplacian") {
  const Tensor l = t({2, 2}, {1, -3, 2, 0});
  const Tensor r = rescale_laplacian(l, ChebyRescale::rowsum);
  CHECK(r.at({0, 1}) == doctest::Approx(-3.0 / (4.0 + 1e-6)).epsilon(1e-15));
  CHECK(rescale_laplacian(l, ChebyRescale::none).to_vector() == l.to_vector());
}

TEST_CASE("chebyshev_conv") {
  Rng rng(5);
  SUBCASE("K=1 identity weights is the pointwise activation") {
    const Tensor x = rng.uniform_tensor({2, 3, 4, 5}, -1, 1);
    const Tensor l = rng.uniform_tensor({4, 4}, -1, 1);
    const Tensor y = chebyshev_conv(l, x, identity_coeffs(1, 3));
    CHECK(y.to_vector() == leaky_relu(x, 0.01).to_vector());
  }
  SUBCASE("K=2 on the identity Laplacian doubles the input") {
    const Tensor x = rng.uniform_tensor({1, 2, 3, 4}, -1, 1);
    const Tensor eye = t({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor y = chebyshev_conv(eye, x, identity_coeffs(2, 2), ChebyRescale::none);
    CHECK(oracle::max_abs_diff(y, leaky_relu(scale(x, 2.0), 0.01)) < 1e-15);
  }
  SUBCASE("recurrence matches the power-basis expansion") {
    for (std::size_t order = 1; order <= 4; ++order) {
      for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 2 + rng.below(7);
        const Tensor l = rng.uniform_tensor({n, n}, -1, 1);
        const Tensor x = rng.uniform_tensor({2, 3, n, 2}, -1, 1);
        const auto p = ChebyParams::init(order, 3, 2, rng);
        const Tensor y = chebyshev_conv(l, x, p, ChebyRescale::none);
        CHECK(oracle::max_abs_diff(y.data(), oracle::cheby_oracle(l, x, p, 0.01)) < 1e-10);
        const Tensor yr = chebyshev_conv(l, x, p, ChebyRescale::rowsum);
        CHECK(oracle::max_abs_diff(yr.data(), oracle::cheby_oracle(rescale_laplacian(l, ChebyRescale::rowsum), x, p, 0.01)) < 1e-10);
      }
    }
  }
  SUBCASE("errors") {
    ChebyParams empty;
    CHECK_THROWS(chebyshev_conv(Tensor::zeros({2, 2}), Tensor::zeros({1, 1, 2, 1}), empty));
    CHECK_THROWS_AS(chebyshev_conv(Tensor::zeros({3, 3}), Tensor::zeros({1, 1, 2, 1}), identity_coeffs(2, 1)), ShapeError);
  }
}

TEST_CASE("gradients through the Laplacian chain") {
  Rng rng(6);
  auto p = DvglParams::init(4, 0.5, 0.2, rng);
  Tensor x = rng.uniform_tensor({4, 5}, 0.05, 1.0, true);
  const Tensor r = rng.normal_tensor({4, 4}, 1.0);
  auto f = [&] { return sum(mul(virtual_laplacian(trend_matrix(p), connectivity_matrix(x), p.theta, p.activation_slope), r)); };
  for (const auto& c : finite_diff_check_params(f, {{"x", x}, {"p_h", p.p_h}, {"p_b", p.p_b}})) {
    CHECK_MESSAGE(c.result.max_rel_error < 1e-4, c.name);
  }
}
