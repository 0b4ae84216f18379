#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>

#include "twophase/network.hpp"

namespace twophase {

struct JacobianOptions {
  /// Upper bound on rows * cols of the materialized Jacobian.
  std::size_t max_entries = std::size_t{1} << 26;
  /// Restrict the columns to a parameter subset (zero columns elsewhere).
  ParamSubset subset = ParamSubset::all;
  const BnStatistics* frozen = nullptr;
};

class SizeCapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// d vec(f_X^T) / dw, shape (n m_y) x d. Row i * m_y + k holds the gradient of
/// output coordinate k on sample i.
Matrix compute_jacobian(const NetworkSpec& spec, const Params& params, const Matrix& x,
                        const JacobianOptions& options = {});

/// Kernel snapshot K = J J^T. The rank is read from the singular values of J
/// (the squares of K's eigenvalues), which avoids squaring the condition number.
struct NtkSnapshot {
  Matrix jacobian;
  Matrix kernel;  // empty when built rank-only
  linalg::Vector singular_values;
  std::size_t rank = 0;
  double tolerance = 0.0;  // on the singular values of J
  std::size_t step = 0;

  std::size_t rows() const { return static_cast<std::size_t>(jacobian.rows()); }
  /// Rank of this snapshot when thresholded at another tolerance.
  std::size_t rank_at(double tol) const;
};

NtkSnapshot compute_ntk(const Matrix& jacobian, std::size_t step = 0,
                        std::optional<double> tol = std::nullopt, bool materialize_kernel = true);

/// current.rank >= reference.rank, with both ranks taken at the reference
/// tolerance. Throws std::invalid_argument when the row counts differ.
bool assert_rank_preserved(const NtkSnapshot& reference, const NtkSnapshot& current);

}  // namespace twophase
