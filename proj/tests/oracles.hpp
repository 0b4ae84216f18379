#pragma once

// Brute-force reference implementations. Nothing here calls into the
// library's numerics; only the Eigen containers are shared.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = normal(rng);
  return m;
}

inline Matrix unit_rows(Matrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) /= m.row(i).norm();
  return m;
}

inline std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Triple-loop product.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Determinant by Gaussian elimination with partial pivoting on plain loops.
inline double det(Matrix a) {
  const Eigen::Index n = a.rows();
  double d = 1.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index p = k;
    for (Eigen::Index i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(p, k))) p = i;
    if (a(p, k) == 0.0) return 0.0;
    if (p != k) {
      for (Eigen::Index j = 0; j < n; ++j) std::swap(a(k, j), a(p, j));
      d = -d;
    }
    d *= a(k, k);
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      for (Eigen::Index j = k; j < n; ++j) a(i, j) -= f * a(k, j);
    }
  }
  return d;
}

/// Largest k such that some k-subset of columns has Gram determinant above
/// `threshold` (relative to the product of the column norms squared).
inline std::size_t rank_by_column_subsets(const Matrix& m, double threshold) {
  const auto cols = static_cast<std::size_t>(m.cols());
  std::size_t best = 0;
  for (std::size_t k = 1; k <= std::min<std::size_t>(cols, static_cast<std::size_t>(m.rows())); ++k) {
    std::vector<bool> pick(cols, false);
    std::fill(pick.begin(), pick.begin() + static_cast<long>(k), true);
    bool found = false;
    do {
      Matrix sub(m.rows(), static_cast<Eigen::Index>(k));
      double scale = 1.0;
      Eigen::Index c = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        if (!pick[j]) continue;
        sub.col(c++) = m.col(static_cast<Eigen::Index>(j));
        scale *= m.col(static_cast<Eigen::Index>(j)).squaredNorm();
      }
      const double g = det(matmul(sub.transpose(), sub));
      if (scale > 0.0 && g / scale > threshold) found = true;
    } while (!found && std::prev_permutation(pick.begin(), pick.end()));
    if (found) best = k;
  }
  return best;
}

/// min over ordered pairs i != j of ||x_i||^2 - x_i . x_j.
inline double pair_margin(const Matrix& x) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      if (i == j) continue;
      double sq = 0.0;
      double dot = 0.0;
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        sq += x(i, k) * x(i, k);
        dot += x(i, k) * x(j, k);
      }
      best = std::min(best, sq - dot);
    }
  return best;
}

/// Central differences of a scalar function.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& w, double h = 1e-5) {
  Vector g(w.size());
  Vector p = w;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double keep = p(i);
    p(i) = keep + h;
    const double up = f(p);
    p(i) = keep - h;
    const double down = f(p);
    p(i) = keep;
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

/// Central differences of a vector function; column i is d f / d w_i.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& w, double h = 1e-5) {
  const Vector f0 = f(w);
  Matrix jac(f0.size(), w.size());
  Vector p = w;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double keep = p(i);
    p(i) = keep + h;
    const Vector up = f(p);
    p(i) = keep - h;
    const Vector down = f(p);
    p(i) = keep;
    jac.col(i) = (up - down) / (2.0 * h);
  }
  return jac;
}

/// max |a - b| / max(1, |b|) elementwise-style, scaled by the reference size.
inline double max_rel_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline double softplus(double z, double s) { return std::log1p(std::exp(s * z)) / s; }

/// Per-sample forward pass of a network without batch norm, written from the
/// definition with row loops. weights[l] is (fan_in x fan_out), biases[l] is fan_out.
inline Vector forward_sample(const Vector& x, const std::vector<Matrix>& weights,
                             const std::vector<Vector>& biases, double s) {
  Vector h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Vector z(weights[l].cols());
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      double acc = biases[l](k);
      for (Eigen::Index j = 0; j < h.size(); ++j) acc += h(j) * weights[l](j, k);
      z(k) = l + 1 == weights.size() ? acc : (s * acc > 30.0 ? acc + std::log1p(std::exp(-s * acc)) / s : softplus(acc, s));
    }
    h = z;
  }
  return h;
}

/// Minimizes ||z - anchor|| over {z : M z = b} for a 2x3 M by scanning the
/// one-dimensional null-space coefficient on successively finer grids.
inline Vector null_space_grid(const Matrix& m, const Vector& b, const Vector& anchor) {
  // Particular solution with z_3 = 0 and the null vector from the cross product.
  Matrix a = m.leftCols(2);
  const double d = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  Vector part = Vector::Zero(3);
  part(0) = (b(0) * a(1, 1) - a(0, 1) * b(1)) / d;
  part(1) = (a(0, 0) * b(1) - b(0) * a(1, 0)) / d;
  Vector null(3);
  null << m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1), m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
      m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  null /= null.norm();
  double center = 0.0;
  double width = 100.0 + 10.0 * (part - anchor).norm();
  for (int round = 0; round < 60; ++round) {
    double best_t = center;
    double best = std::numeric_limits<double>::infinity();
    for (int k = -100; k <= 100; ++k) {
      const double t = center + width * k / 100.0;
      const double v = (part + t * null - anchor).squaredNorm();
      if (v < best) {
        best = v;
        best_t = t;
      }
    }
    center = best_t;
    width /= 10.0;
  }
  return part + center * null;
}

// Nearest point of the affine set {p + N c} to `a` by refining a grid over
// the two null-space coordinates.
inline Vector grid_nearest_2d(const Vector& p, const Matrix& null, const Vector& a) {
  double c0 = 0.0;
  double c1 = 0.0;
  double width = 10.0 + 10.0 * (p - a).norm();
  for (int round = 0; round < 40; ++round) {
    double best = std::numeric_limits<double>::infinity();
    double b0 = c0;
    double b1 = c1;
    for (int i = -20; i <= 20; ++i)
      for (int j = -20; j <= 20; ++j) {
        const double u = c0 + width * i / 20.0;
        const double v = c1 + width * j / 20.0;
        const double d = (p + u * null.col(0) + v * null.col(1) - a).squaredNorm();
        if (d < best) {
          best = d;
          b0 = u;
          b1 = v;
        }
      }
    c0 = b0;
    c1 = b1;
    width /= 4.0;
  }
  return p + c0 * null.col(0) + c1 * null.col(1);
}

// Nearest solution of J w = b to a via the normal equations of J J^T.
inline Vector nearest_by_normal_equations(const Matrix& j, const Vector& b, const Vector& a) {
  const Matrix gram = matmul(j, j.transpose());
  const Vector lambda = gram.ldlt().solve(b - j * a);
  return a + j.transpose() * lambda;
}

}  // namespace oracle
