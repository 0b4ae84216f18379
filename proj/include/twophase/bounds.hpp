#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "twophase/loss.hpp"
#include "twophase/trainer.hpp"

namespace twophase {

struct OptimumOptions {
  double grad_tolerance = 1e-10;
  std::size_t max_steps = 1'000'000;
};

/// Minimizer of the frozen-feature problem nearest the anchor.
struct LastLayerOptimum {
  Matrix weight_bias;  // (m_H + 1) x m_y, same layout as Params::weight_bias(H + 1)
  double loss = 0.0;   // L(w*)
  double r_squared = 0.0;
  std::size_t rank = 0;  // rank([h, 1])
  bool full_rank = false;
  bool approximate = false;  // iterative cross-entropy path
  std::size_t iterations = 0;
};

/// Squared loss: exact interpolating solution nearest `anchor` (least squares
/// when rank([h,1]) < n, with full_rank = false). Cross-entropy: exact
/// gradient descent with step 1/L_H from the anchor.
LastLayerOptimum solve_last_layer_optimum(LossKind kind, const Matrix& hidden, const Matrix& y,
                                          const Matrix& anchor, const OptimumOptions& options = {});

/// R^2 L_H / (2 (t - tau)). Throws when t <= tau.
double gd_bound(double r_squared, double lipschitz_last, std::size_t t, std::size_t tau);

/// (R^2 + G^2 sum eta_k^2) / (2 sum eta_k) with k = tau..t and
/// rates[k - tau] = eta_k.
double sgd_bound(double r_squared, double g_squared, const std::vector<double>& rates,
                 std::size_t t, std::size_t tau);

/// a / sqrt(k - tau + 1) for k = tau..t.
std::vector<double> sqrt_schedule(double a, std::size_t t, std::size_t tau);

/// sqrt(L Rbar^2 (L(w^tau) - L*) / (2 eta (1 - eta))) / sqrt(t - tau + 1).
double lazy_bound(double lipschitz, double r_bar, double loss_tau, double loss_star,
                  double eta_bar, std::size_t t, std::size_t tau);

struct TrajectoryPoint {
  Vector masked_params;  // nu (.) w^k
  Matrix jacobian;       // J(w^k), n m_y rows
};

/// max_k min ||nu (.) w^k - omega|| over solutions of J_k omega = vec(Y^T).
/// Squared loss only.
double estimate_R_bar(const std::vector<TrajectoryPoint>& trajectory, const Matrix& y,
                      LossKind kind);

/// max over consecutive iterates of ||g_{k+1} - g_k|| / ||w_{k+1} - w_k||.
/// A lower bound on the true Lipschitz constant.
double empirical_lipschitz(const std::vector<Vector>& iterates, const std::vector<Vector>& gradients);

struct BoundConstants {
  Phase2Mode mode = Phase2Mode::last_layer_gd;
  double r_squared = 0.0;
  double loss_star = 0.0;
  double lipschitz_last = 0.0;  // gd
  double g_squared = 0.0;       // sgd
  bool g_squared_measured = true;
  double sgd_rate = 0.01;       // sgd: a in a / sqrt(k - tau + 1)
  double lipschitz = 0.0;       // lazy
  double r_bar = 0.0;           // lazy
  double eta_bar = 0.5;         // lazy
  bool approximate_optimum = false;
};

struct BoundPoint {
  std::size_t t = 0;
  double bound = 0.0;
  double measured = 0.0;  // suboptimality at t (gd) or at t* (sgd, lazy)
  double slack = 0.0;     // bound - measured
  bool violated = false;
};

struct BoundReport {
  BoundConstants constants;
  std::vector<BoundPoint> points;
  std::size_t violations = 0;
  /// lazy bounds use an empirical L and never count as failures.
  bool diagnostic_only = false;
};

class BoundError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

bool bound_violated(double measured, double bound);

/// Evaluates the bound for every phase-2 record of `log`.
BoundReport check_bounds(const TrainLog& log, const BoundConstants& constants);

}  // namespace twophase
