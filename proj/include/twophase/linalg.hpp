#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace twophase::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when an SVD or LU factorization does not converge or reports a
/// numerical issue. Never folded into a rank of zero.
class DecompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by solvers that need full row rank when the operand has less.
class RankDeficientError : public std::runtime_error {
 public:
  RankDeficientError(std::size_t rank, std::size_t required);
  std::size_t rank() const { return rank_; }
  std::size_t required() const { return required_; }

 private:
  std::size_t rank_;
  std::size_t required_;
};

/// Builds a matrix from row-major entries, rejecting NaN and infinities.
Matrix from_rows(std::size_t rows, std::size_t cols, std::span<const double> entries);

/// Throws std::invalid_argument naming `what` if any entry is not finite.
void require_finite(const Matrix& m, std::string_view what);
bool all_finite(const Matrix& m);

/// Singular values in non-increasing order.
Vector singular_values(const Matrix& m);

/// max(rows, cols) * machine epsilon * largest singular value.
double default_rank_tolerance(std::size_t rows, std::size_t cols, double sigma_max);

/// Number of singular values strictly above the threshold `tol`, or above
/// default_rank_tolerance when `tol` is absent.
std::size_t numerical_rank(const Matrix& m, std::optional<double> tol = std::nullopt);

/// Rank from precomputed singular values of a rows x cols matrix.
std::size_t rank_from_singular_values(const Vector& sv, std::size_t rows, std::size_t cols,
                                      std::optional<double> tol = std::nullopt);

/// det(M M^T).
double gram_det(const Matrix& m);

/// Z minimizing ||Z - anchor||_F subject to M Z = B. M must have full row rank
/// at the working tolerance.
Matrix min_norm_solve(const Matrix& m, const Matrix& b, const Matrix& anchor,
                      std::optional<double> tol = std::nullopt);

/// anchor + pinv(M) (B - M anchor) without the rank requirement: the
/// least-squares solution of M Z = B closest to anchor.
Matrix nearest_least_squares(const Matrix& m, const Matrix& b, const Matrix& anchor,
                             std::optional<double> tol = std::nullopt);

/// [M, 1]: appends an all-ones column.
Matrix append_ones_column(const Matrix& m);

}  // namespace twophase::linalg
