#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace kse::num {

// Dense row-major matrix of doubles. Small systems only (desk scale is a
// few hundred rows at most), so everything is direct and allocation-happy.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d);

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  bool all_finite() const;

  static Matrix identity(std::size_t n);
};

struct Vector {
  std::vector<double> data;

  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data(n, fill) {}
  explicit Vector(std::vector<double> d) : data(std::move(d)) {}

  std::size_t dim() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  bool all_finite() const;
};

// Probability distribution over a finite support. Construction validates
// non-negativity and normalization to 1 within 1e-9.
struct Distribution {
  std::vector<double> probs;

  Distribution() = default;
  explicit Distribution(std::vector<double> p);
};

// Basic dense ops used across modules.
Matrix matmul(const Matrix& a, const Matrix& b);           // a * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);        // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);        // a^T * b
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
double frobenius_norm(const Matrix& a);
double dot(const Vector& a, const Vector& b);
double norm2(const Vector& a);

// KL divergence sum_i p_i * log(p_i / q_i). Zero p entries contribute
// zero; a zero q entry under positive p is an error (the constraint
// distribution would be unsatisfiable).
double kl_divergence(const Distribution& p, const Distribution& q);

// Solves Delta * (C + K*K^T) = R * K^T by direct dense factorization and
// returns Delta. Shapes: R (d_out x n), K (d_in x n), C (d_in x d_in).
// Throws on dimension mismatch, non-finite input, a singular system, or a
// relative residual above 1e-8 (degenerate key set; the caller must add
// covariance samples or regularization).
Matrix solve_regularized(const Matrix& R, const Matrix& K, const Matrix& C);

// Relative Frobenius residual ||Delta*(C+KK^T) - RK^T|| / ||RK^T||.
// Falls back to the absolute residual when RK^T is exactly zero.
double solve_residual(const Matrix& delta, const Matrix& R, const Matrix& K,
                      const Matrix& C);

// LU solve with partial pivoting: returns X with X * A = B (A: n x n,
// B: m x n). Throws kse::Error on a singular pivot.
Matrix solve_right(const Matrix& B, const Matrix& A);

struct GradCheckOptions {
  double step = 1e-4;  // per-coordinate step, scaled by max(1, |x_i|)
};

// Max deviation between g and central finite differences of f at x,
// normalized by the largest gradient magnitude seen (or 1e-12 when both
// are zero). Throws on non-finite f evaluations.
double check_gradient(const std::function<double(const Vector&)>& f,
                      const Vector& x, const Vector& g,
                      const GradCheckOptions& opts = {});

}  // namespace kse::num
