#include "twophase/ntk.hpp"

#include <string>

namespace twophase {

Matrix compute_jacobian(const NetworkSpec& spec, const Params& params, const Matrix& x,
                        const JacobianOptions& options) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t m_y = spec.output_dim;
  const std::size_t d = params.size();
  if (n * m_y * d > options.max_entries) {
    throw SizeCapError("Jacobian would hold " + std::to_string(n * m_y * d) +
                       " entries (cap " + std::to_string(options.max_entries) +
                       "); use the rank-only path on the last-layer block instead");
  }
  const ForwardTrace trace = forward_hidden(spec, params, x, options.frozen);
  Matrix jac = Matrix::Zero(static_cast<Eigen::Index>(n * m_y), static_cast<Eigen::Index>(d));

  if (options.subset == ParamSubset::last_layer_only) {
    // Row group i is I_{m_y} (x) [h_i, 1].
    const Matrix features = linalg::append_ones_column(trace.hidden);
    const auto block = features.cols();
    const auto offset = static_cast<Eigen::Index>(params.layout().hidden_size());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(m_y); ++k) {
        jac.row(i * static_cast<Eigen::Index>(m_y) + k).segment(offset + k * block, block) =
            features.row(i);
      }
    }
    return jac;
  }

  Matrix upstream = Matrix::Zero(trace.output.rows(), trace.output.cols());
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(m_y); ++k) {
      upstream(i, k) = 1.0;
      jac.row(i * static_cast<Eigen::Index>(m_y) + k) =
          backprop(spec, params, trace, upstream, options.subset).transpose();
      upstream(i, k) = 0.0;
    }
  }
  return jac;
}

std::size_t NtkSnapshot::rank_at(double tol) const {
  return static_cast<std::size_t>((singular_values.array() > tol).count());
}

NtkSnapshot compute_ntk(const Matrix& jacobian, std::size_t step, std::optional<double> tol,
                        bool materialize_kernel) {
  linalg::require_finite(jacobian, "compute_ntk");
  NtkSnapshot snap;
  snap.jacobian = jacobian;
  snap.step = step;
  if (materialize_kernel) snap.kernel = jacobian * jacobian.transpose();
  snap.singular_values = linalg::singular_values(jacobian);
  const auto rows = static_cast<std::size_t>(jacobian.rows());
  const auto cols = static_cast<std::size_t>(jacobian.cols());
  snap.tolerance = tol ? *tol
                       : linalg::default_rank_tolerance(rows, cols, snap.singular_values(0));
  snap.rank = snap.rank_at(snap.tolerance);
  return snap;
}

bool assert_rank_preserved(const NtkSnapshot& reference, const NtkSnapshot& current) {
  if (reference.rows() != current.rows()) {
    throw std::invalid_argument("NTK snapshots have " + std::to_string(reference.rows()) +
                                " and " + std::to_string(current.rows()) + " rows");
  }
  return current.rank_at(reference.tolerance) >= reference.rank;
}

}  // namespace twophase
