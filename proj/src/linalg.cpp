#include "twophase/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace twophase::linalg {

namespace {

Eigen::BDCSVD<Matrix> thin_svd(const Matrix& m) {
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) {
    throw DecompositionError("SVD failed to converge on a " + std::to_string(m.rows()) +
                             "x" + std::to_string(m.cols()) + " matrix");
  }
  return svd;
}

double threshold_for(const Vector& sv, std::size_t rows, std::size_t cols,
                     std::optional<double> tol) {
  if (tol) {
    if (*tol < 0.0 || !std::isfinite(*tol)) {
      throw std::invalid_argument("rank tolerance must be a finite nonnegative number");
    }
    return *tol;
  }
  const double sigma_max = sv.size() > 0 ? sv(0) : 0.0;
  return default_rank_tolerance(rows, cols, sigma_max);
}

Matrix apply_pseudo_inverse(const Eigen::BDCSVD<Matrix>& svd, const Matrix& rhs,
                            double threshold, std::size_t* rank_out) {
  const Vector& s = svd.singularValues();
  std::size_t rank = 0;
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > threshold) {
      inv(i) = 1.0 / s(i);
      ++rank;
    }
  }
  if (rank_out) *rank_out = rank;
  return svd.matrixV() * (inv.asDiagonal() * (svd.matrixU().transpose() * rhs));
}

}  // namespace

RankDeficientError::RankDeficientError(std::size_t rank, std::size_t required)
    : std::runtime_error("matrix is rank deficient: numerical rank " + std::to_string(rank) +
                         " < required " + std::to_string(required)),
      rank_(rank),
      required_(required) {}

Matrix from_rows(std::size_t rows, std::size_t cols, std::span<const double> entries) {
  if (entries.size() != rows * cols) {
    throw std::invalid_argument("from_rows: expected " + std::to_string(rows * cols) +
                                " entries, got " + std::to_string(entries.size()));
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = entries[i * cols + j];
    }
  }
  require_finite(m, "from_rows");
  return m;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": matrix contains NaN or Inf");
  }
}

Vector singular_values(const Matrix& m) {
  if (m.size() == 0) throw std::invalid_argument("singular_values: empty matrix");
  require_finite(m, "singular_values");
  Eigen::BDCSVD<Matrix> svd(m);
  if (svd.info() != Eigen::Success) {
    throw DecompositionError("SVD failed to converge on a " + std::to_string(m.rows()) +
                             "x" + std::to_string(m.cols()) + " matrix");
  }
  return svd.singularValues();
}

double default_rank_tolerance(std::size_t rows, std::size_t cols, double sigma_max) {
  return static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() *
         sigma_max;
}

std::size_t rank_from_singular_values(const Vector& sv, std::size_t rows, std::size_t cols,
                                      std::optional<double> tol) {
  const double threshold = threshold_for(sv, rows, cols, tol);
  return static_cast<std::size_t>((sv.array() > threshold).count());
}

std::size_t numerical_rank(const Matrix& m, std::optional<double> tol) {
  const Vector sv = singular_values(m);
  return rank_from_singular_values(sv, static_cast<std::size_t>(m.rows()),
                                   static_cast<std::size_t>(m.cols()), tol);
}

double gram_det(const Matrix& m) {
  require_finite(m, "gram_det");
  if (m.rows() == 0) return 1.0;
  const Matrix gram = m * m.transpose();
  Eigen::PartialPivLU<Matrix> lu(gram);
  return lu.determinant();
}

Matrix min_norm_solve(const Matrix& m, const Matrix& b, const Matrix& anchor,
                      std::optional<double> tol) {
  if (m.size() == 0) throw std::invalid_argument("min_norm_solve: empty system matrix");
  if (b.rows() != m.rows()) {
    throw std::invalid_argument("min_norm_solve: rhs has " + std::to_string(b.rows()) +
                                " rows, system has " + std::to_string(m.rows()));
  }
  if (anchor.rows() != m.cols() || anchor.cols() != b.cols()) {
    throw std::invalid_argument("min_norm_solve: anchor must be cols(M) x cols(B)");
  }
  require_finite(m, "min_norm_solve(M)");
  require_finite(b, "min_norm_solve(B)");
  require_finite(anchor, "min_norm_solve(anchor)");

  const auto svd = thin_svd(m);
  const double threshold = threshold_for(svd.singularValues(), static_cast<std::size_t>(m.rows()),
                                         static_cast<std::size_t>(m.cols()), tol);
  std::size_t rank = 0;
  const Matrix correction = apply_pseudo_inverse(svd, b - m * anchor, threshold, &rank);
  if (rank < static_cast<std::size_t>(m.rows())) {
    throw RankDeficientError(rank, static_cast<std::size_t>(m.rows()));
  }
  return anchor + correction;
}

Matrix nearest_least_squares(const Matrix& m, const Matrix& b, const Matrix& anchor,
                             std::optional<double> tol) {
  if (m.size() == 0) throw std::invalid_argument("nearest_least_squares: empty system matrix");
  if (b.rows() != m.rows() || anchor.rows() != m.cols() || anchor.cols() != b.cols()) {
    throw std::invalid_argument("nearest_least_squares: shape mismatch");
  }
  const auto svd = thin_svd(m);
  const double threshold = threshold_for(svd.singularValues(), static_cast<std::size_t>(m.rows()),
                                         static_cast<std::size_t>(m.cols()), tol);
  return anchor + apply_pseudo_inverse(svd, b - m * anchor, threshold, nullptr);
}

Matrix append_ones_column(const Matrix& m) {
  Matrix out(m.rows(), m.cols() + 1);
  out.leftCols(m.cols()) = m;
  out.col(m.cols()).setOnes();
  return out;
}

}  // namespace twophase::linalg
