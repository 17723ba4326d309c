#include "kse/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "kse/common.hpp"

namespace kse::num {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
  require(rows * cols == data.size(), "Matrix: rows*cols != data length");
}

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

bool Vector::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Distribution::Distribution(std::vector<double> p) : probs(std::move(p)) {
  double sum = 0.0;
  for (double v : probs) {
    require(v >= 0.0, "Distribution: negative probability");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "Distribution: probabilities do not sum to 1");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols == b.rows, "matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols == b.cols, "matmul_nt: inner dimensions differ");
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      c.at(i, j) = s;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows, "matmul_tn: inner dimensions differ");
  Matrix c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows && a.cols == b.cols, "add: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows && a.cols == b.cols, "sub: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data) v *= s;
  return c;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

double dot(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vector& a) { return std::sqrt(dot(a, a)); }

double kl_divergence(const Distribution& p, const Distribution& q) {
  require(p.probs.size() == q.probs.size(), "kl_divergence: support size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    const double pi = p.probs[i];
    if (pi == 0.0) continue;
    require(q.probs[i] > 0.0, "kl_divergence: q is zero where p is positive");
    kl += pi * std::log(pi / q.probs[i]);
  }
  return kl;
}

Matrix solve_right(const Matrix& B, const Matrix& A) {
  require(A.rows == A.cols, "solve_right: A must be square");
  require(B.cols == A.rows, "solve_right: shape mismatch");
  const std::size_t n = A.rows;

  // X * A = B  <=>  A^T * X^T = B^T. LU-factor A^T with partial pivoting,
  // then back-substitute each row of B.
  Matrix lu = transpose(A);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(lu.at(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      double v = std::abs(lu.at(i, k));
      if (v > best) {
        best = v;
        piv = i;
      }
    }
    if (best == 0.0) fail("solve_right: singular system");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu.at(piv, j), lu.at(k, j));
      std::swap(perm[piv], perm[k]);
    }
    const double d = lu.at(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu.at(i, k) / d;
      lu.at(i, k) = f;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu.at(i, j) -= f * lu.at(k, j);
    }
  }

  Matrix X(B.rows, n);
  std::vector<double> y(n);
  for (std::size_t r = 0; r < B.rows; ++r) {
    const double* b = B.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[perm[i]];
      for (std::size_t j = 0; j < i; ++j) s -= lu.at(i, j) * y[j];
      y[i] = s;
    }
    double* x = X.row(r);
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t j = ii + 1; j < n; ++j) s -= lu.at(ii, j) * x[j];
      x[ii] = s / lu.at(ii, ii);
    }
  }
  return X;
}

static Matrix gram_plus(const Matrix& K, const Matrix& C) {
  Matrix S = matmul_nt(K, K);  // K * K^T, d_in x d_in
  return add(C, S);
}

double solve_residual(const Matrix& delta, const Matrix& R, const Matrix& K,
                      const Matrix& C) {
  Matrix S = gram_plus(K, C);
  Matrix lhs = matmul(delta, S);
  Matrix rhs = matmul_nt(R, K);
  double denom = frobenius_norm(rhs);
  double err = frobenius_norm(sub(lhs, rhs));
  return denom > 0.0 ? err / denom : err;
}

Matrix solve_regularized(const Matrix& R, const Matrix& K, const Matrix& C) {
  require(C.rows == C.cols, "solve_regularized: C must be square");
  require(K.rows == C.rows, "solve_regularized: K rows must match C");
  require(R.cols == K.cols, "solve_regularized: R and K column counts differ");
  require(R.all_finite() && K.all_finite() && C.all_finite(),
          "solve_regularized: non-finite input");

  Matrix S = gram_plus(K, C);
  Matrix B = matmul_nt(R, K);  // R * K^T, d_out x d_in
  Matrix delta = solve_right(B, S);

  double res = solve_residual(delta, R, K, C);
  if (!(res <= 1e-8))
    fail("solve_regularized: singular or ill-conditioned system (relative residual " +
         std::to_string(res) + ")");
  return delta;
}

double check_gradient(const std::function<double(const Vector&)>& f,
                      const Vector& x, const Vector& g,
                      const GradCheckOptions& opts) {
  require(x.dim() == g.dim(), "check_gradient: dimension mismatch");
  Vector fd(x.dim());
  Vector probe = x;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double h = opts.step * std::max(1.0, std::abs(x[i]));
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    require(std::isfinite(fp) && std::isfinite(fm),
            "check_gradient: non-finite function evaluation");
    fd[i] = (fp - fm) / (2.0 * h);
  }
  double scale = 1e-12;
  for (std::size_t i = 0; i < x.dim(); ++i)
    scale = std::max({scale, std::abs(g[i]), std::abs(fd[i])});
  double worst = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i)
    worst = std::max(worst, std::abs(g[i] - fd[i]) / scale);
  return worst;
}

}  // namespace kse::num
