#include "palmlab/core.hpp"

#include <cmath>
#include <limits>

namespace palmlab {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
  return a * b;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
        throw std::invalid_argument("softmax_rows: non-finite entry");
      }
      mx = std::max(mx, v);
    }
    if (std::isinf(mx)) throw std::invalid_argument("softmax_rows: fully masked row");
    double sum = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      // exp(-inf - mx) is exactly 0, so masked logits drop out.
      const double e = std::exp(m(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    out.row(r) /= sum;
  }
  return out;
}

double spectral_norm(const Matrix& m, double tol, int max_iter) {
  if (m.rows() == 0 || m.cols() == 0) throw std::invalid_argument("spectral_norm: empty matrix");
  // Power-iterate on the Gram matrix of the smaller dimension.
  const Matrix b = (m.cols() <= m.rows()) ? Matrix(m.transpose() * m) : Matrix(m * m.transpose());
  const Eigen::Index n = b.rows();
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 1e-3 * static_cast<double>(i);
  v /= v.norm();
  double sigma = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vector w = b * v;
    const double wn = w.norm();
    if (wn == 0.0) return 0.0;
    v = w / wn;
    const double lambda = v.dot(b * v);
    const double next = std::sqrt(std::max(lambda, 0.0));
    if (it > 0 && std::abs(next - sigma) <= tol * std::max(next, 1e-300)) return next;
    sigma = next;
  }
  throw ConvergenceError("spectral_norm: power iteration did not converge", sigma);
}

double frobenius_norm(const Matrix& m) { return m.norm(); }

Matrix init_uniform(int rows, int cols, double bound, SeededRng& rng) {
  if (bound <= 0.0) throw std::invalid_argument("init_uniform: bound must be positive");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

Matrix finite_difference_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x,
                                  double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_jacobian: h must be positive");
  Matrix jac;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector xp = x;
    Vector xm = x;
    xp(j) += h;
    xm(j) -= h;
    const Vector fp = f(xp);
    const Vector fm = f(xm);
    if (!fp.allFinite() || !fm.allFinite()) {
      throw std::runtime_error("finite_difference_jacobian: f returned non-finite values");
    }
    if (j == 0) jac.resize(fp.size(), x.size());
    jac.col(j) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

}  // namespace palmlab
