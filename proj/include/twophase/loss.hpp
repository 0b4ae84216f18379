#pragma once

#include <string>
#include <string_view>

#include "twophase/linalg.hpp"

namespace twophase {

using linalg::Matrix;

/// Per-sample criteria that are convex and differentiable in the prediction
/// with a Lipschitz gradient.
///   squared:       ||q - y||^2                 (gradient Lipschitz constant 2)
///   cross_entropy: -sum_k y_k log softmax(q)_k  (bounded by 1)
enum class LossKind { squared, cross_entropy };

double lipschitz_constant(LossKind kind);
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

/// (1/n) sum_i l(F_i, Y_i).
double loss_value(LossKind kind, const Matrix& f, const Matrix& y);

/// Gradient of loss_value with respect to F.
Matrix loss_grad(LossKind kind, const Matrix& f, const Matrix& y);

/// Rejects shape mismatches and, for cross-entropy, target rows that are not
/// probability vectors.
void validate_targets(LossKind kind, const Matrix& f, const Matrix& y);

}  // namespace twophase
