#include "twophase/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace twophase {

namespace {

constexpr double kProbabilityTolerance = 1e-9;

Eigen::VectorXd row_log_sum_exp(const Matrix& f) {
  const Eigen::VectorXd max = f.rowwise().maxCoeff();
  const Eigen::VectorXd sums = (f.colwise() - max).array().exp().rowwise().sum();
  return max.array() + sums.array().log();
}

}  // namespace

double lipschitz_constant(LossKind kind) {
  switch (kind) {
    case LossKind::squared:
      return 2.0;
    case LossKind::cross_entropy:
      return 1.0;
  }
  return 2.0;
}

std::string to_string(LossKind kind) {
  return kind == LossKind::squared ? "squared" : "cross_entropy";
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "squared") return LossKind::squared;
  if (name == "cross_entropy") return LossKind::cross_entropy;
  throw std::invalid_argument("unknown loss '" + std::string(name) +
                              "' (expected squared or cross_entropy)");
}

void validate_targets(LossKind kind, const Matrix& f, const Matrix& y) {
  if (f.rows() != y.rows() || f.cols() != y.cols()) {
    throw std::invalid_argument("loss: predictions are " + std::to_string(f.rows()) + "x" +
                                std::to_string(f.cols()) + " but targets are " +
                                std::to_string(y.rows()) + "x" + std::to_string(y.cols()));
  }
  if (f.rows() == 0) throw std::invalid_argument("loss: no samples");
  if (kind != LossKind::cross_entropy) return;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if ((y.row(i).array() < 0.0).any() ||
        std::abs(y.row(i).sum() - 1.0) > kProbabilityTolerance) {
      throw std::invalid_argument("cross-entropy target row " + std::to_string(i) +
                                  " is not a probability vector");
    }
  }
}

double loss_value(LossKind kind, const Matrix& f, const Matrix& y) {
  validate_targets(kind, f, y);
  const double n = static_cast<double>(f.rows());
  if (kind == LossKind::squared) return (f - y).squaredNorm() / n;
  // -sum_k y_k (q_k - lse(q)) = lse(q) sum_k y_k - y.q
  const Eigen::VectorXd lse = row_log_sum_exp(f);
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    total += lse(i) * y.row(i).sum() - y.row(i).dot(f.row(i));
  }
  return total / n;
}

Matrix loss_grad(LossKind kind, const Matrix& f, const Matrix& y) {
  validate_targets(kind, f, y);
  const double n = static_cast<double>(f.rows());
  if (kind == LossKind::squared) return (2.0 / n) * (f - y);
  const Eigen::VectorXd lse = row_log_sum_exp(f);
  Matrix softmax = (f.colwise() - lse).array().exp().matrix();
  return (softmax - y) / n;
}

}  // namespace twophase
