#include <cmath>
#include <random>

#include "doctest.h"
#include "kse/common.hpp"
#include "kse/numerics.hpp"

using kse::num::Distribution;
using kse::num::Matrix;
using kse::num::Vector;

namespace {

// Independent inverse via Gauss-Jordan elimination, used only to cross-check
// the production LU path.
Matrix gauss_jordan_inverse(Matrix a) {
  REQUIRE(a.rows == a.cols);
  const std::size_t n = a.rows;
  Matrix inv = Matrix::identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a.at(r, col)) > std::abs(a.at(piv, col))) piv = r;
    REQUIRE(std::abs(a.at(piv, col)) > 0.0);
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(a.at(piv, j), a.at(col, j));
        std::swap(inv.at(piv, j), inv.at(col, j));
      }
    }
    const double d = a.at(col, col);
    for (std::size_t j = 0; j < n; ++j) {
      a.at(col, j) /= d;
      inv.at(col, j) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a.at(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        a.at(r, j) -= f * a.at(col, j);
        inv.at(r, j) -= f * inv.at(col, j);
      }
    }
  }
  return inv;
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = dist(rng);
  return m;
}

Distribution random_distribution(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> dist(0.01, 1.0);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = dist(rng);
    sum += v;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    p[i] /= sum;
    acc += p[i];
  }
  p[n - 1] = 1.0 - acc;
  return Distribution(p);
}

}  // namespace

TEST_CASE("distribution constructor validates entries") {
  CHECK_NOTHROW(Distribution({0.25, 0.75}));
  CHECK_THROWS_AS(Distribution({0.5, 0.6}), kse::Error);
  CHECK_THROWS_AS(Distribution({-0.1, 1.1}), kse::Error);
}

TEST_CASE("kl divergence of a distribution with itself is zero") {
  Distribution p({0.3, 0.7});
  CHECK(kse::num::kl_divergence(p, p) == 0.0);
}

TEST_CASE("kl divergence with a vanishing q slot is the analytic single term") {
  Distribution p({1.0, 0.0});
  Distribution q({0.5, 0.5});
  CHECK(kse::num::kl_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("kl divergence matches direct summation over the support") {
  Distribution p({0.2, 0.8});
  Distribution q({0.6, 0.4});
  double expect = 0.2 * std::log(0.2 / 0.6) + 0.8 * std::log(0.8 / 0.4);
  CHECK(kse::num::kl_divergence(p, q) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("kl divergence rejects invalid pairs") {
  Distribution p({0.2, 0.8});
  Distribution q3({0.2, 0.3, 0.5});
  CHECK_THROWS_AS(kse::num::kl_divergence(p, q3), kse::Error);
  Distribution qz({1.0, 0.0});
  CHECK_THROWS_AS(kse::num::kl_divergence(p, qz), kse::Error);
}

TEST_CASE("kl divergence is non-negative on random pairs") {
  std::mt19937_64 rng = kse::substream(7, "kl-property");
  for (int trial = 0; trial < 200; ++trial) {
    Distribution p = random_distribution(rng, 5);
    Distribution q = random_distribution(rng, 5);
    CHECK(kse::num::kl_divergence(p, q) >= 0.0);
    CHECK(kse::num::kl_divergence(p, p) == 0.0);
  }
}

TEST_CASE("regularized solve collapses to R when keys are the identity") {
  std::mt19937_64 rng = kse::substream(7, "solve-identity");
  Matrix R = random_matrix(rng, 4, 3);
  Matrix K = Matrix::identity(3);
  Matrix C(3, 3);
  Matrix delta = kse::num::solve_regularized(R, K, C);
  for (std::size_t i = 0; i < R.data.size(); ++i)
    CHECK(delta.data[i] == doctest::Approx(R.data[i]).epsilon(1e-12));
}

TEST_CASE("regularized solve with one axis key and identity covariance halves the key column") {
  Matrix K(2, 1, {1.0, 0.0});
  Matrix C = Matrix::identity(2);
  Matrix R(3, 1, {2.0, -4.0, 6.0});
  Matrix delta = kse::num::solve_regularized(R, K, C);
  REQUIRE(delta.rows == 3);
  REQUIRE(delta.cols == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(delta.at(i, 0) == doctest::Approx(0.5 * R.at(i, 0)).epsilon(1e-12));
    CHECK(delta.at(i, 1) == 0.0);
  }
}

TEST_CASE("regularized solve agrees with an explicit dense inverse") {
  std::mt19937_64 rng = kse::substream(7, "solve-oracle");
  const std::size_t d_in = 8, d_out = 5, n = 3;
  Matrix R = random_matrix(rng, d_out, n);
  Matrix K = random_matrix(rng, d_in, n);
  Matrix G = random_matrix(rng, d_in, d_in);
  Matrix C = kse::num::matmul_nt(G, G);  // symmetric positive definite

  Matrix delta = kse::num::solve_regularized(R, K, C);

  Matrix S = kse::num::add(C, kse::num::matmul_nt(K, K));
  Matrix expect = kse::num::matmul(kse::num::matmul_nt(R, K), gauss_jordan_inverse(S));
  REQUIRE(delta.rows == expect.rows);
  REQUIRE(delta.cols == expect.cols);
  for (std::size_t i = 0; i < delta.data.size(); ++i)
    CHECK(delta.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-9));
}

TEST_CASE("regularized solve satisfies its residual identity on random instances") {
  std::mt19937_64 rng = kse::substream(7, "solve-residual");
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d_in = 6, d_out = 4, n = 2;
    Matrix R = random_matrix(rng, d_out, n);
    Matrix K = random_matrix(rng, d_in, n);
    Matrix G = random_matrix(rng, d_in, d_in);
    Matrix C = kse::num::matmul_nt(G, G);
    Matrix delta = kse::num::solve_regularized(R, K, C);
    CHECK(kse::num::solve_residual(delta, R, K, C) <= 1e-8);
  }
}

TEST_CASE("regularized solve reports degenerate key sets") {
  Matrix K(2, 2, {1.0, 1.0, 0.0, 0.0});  // collinear keys, zero covariance
  Matrix C(2, 2);
  Matrix R(2, 2, {1.0, 2.0, 3.0, 4.0});
  CHECK_THROWS_AS(kse::num::solve_regularized(R, K, C), kse::Error);
}

TEST_CASE("regularized solve is bit-deterministic") {
  std::mt19937_64 rng = kse::substream(7, "solve-repeat");
  Matrix R = random_matrix(rng, 4, 3);
  Matrix K = random_matrix(rng, 6, 3);
  Matrix G = random_matrix(rng, 6, 6);
  Matrix C = kse::num::matmul_nt(G, G);
  Matrix a = kse::num::solve_regularized(R, K, C);
  Matrix b = kse::num::solve_regularized(R, K, C);
  CHECK(a.data == b.data);
}

TEST_CASE("gradient check accepts the analytic gradient of a quadratic") {
  auto f = [](const Vector& v) {
    double s = 0.0;
    for (double x : v.data) s += x * x;
    return s;
  };
  Vector x(std::vector<double>{1.0, 2.0});
  Vector g(std::vector<double>{2.0, 4.0});
  CHECK(kse::num::check_gradient(f, x, g) <= 1e-8);
}

TEST_CASE("gradient check reports zero error for a constant function") {
  auto f = [](const Vector&) { return 3.5; };
  Vector x(std::vector<double>{0.2, -0.4, 1.0});
  Vector g(std::vector<double>{0.0, 0.0, 0.0});
  CHECK(kse::num::check_gradient(f, x, g) == 0.0);
}

TEST_CASE("gradient check flags a wrong gradient") {
  auto f = [](const Vector& v) { return v[0] * v[0]; };
  Vector x(std::vector<double>{1.0});
  Vector g(std::vector<double>{5.0});
  CHECK(kse::num::check_gradient(f, x, g) > 0.1);
}

TEST_CASE("matrix product transposed helpers agree with explicit transpose") {
  std::mt19937_64 rng = kse::substream(7, "matmul-helpers");
  Matrix a = random_matrix(rng, 3, 5);
  Matrix b = random_matrix(rng, 4, 5);
  Matrix nt = kse::num::matmul_nt(a, b);
  Matrix ref = kse::num::matmul(a, kse::num::transpose(b));
  for (std::size_t i = 0; i < nt.data.size(); ++i)
    CHECK(nt.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));

  Matrix c = random_matrix(rng, 3, 4);
  Matrix tn = kse::num::matmul_tn(a, c);
  Matrix ref2 = kse::num::matmul(kse::num::transpose(a), c);
  REQUIRE(tn.rows == ref2.rows);
  REQUIRE(tn.cols == ref2.cols);
  for (std::size_t i = 0; i < tn.data.size(); ++i)
    CHECK(tn.data[i] == doctest::Approx(ref2.data[i]).epsilon(1e-12));
}
