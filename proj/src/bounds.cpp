#include "twophase/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace twophase {

namespace {

Vector stack_targets(const Matrix& y) {
  // Row i m_y + k holds Y(i, k).
  const Matrix yt = y.transpose();
  return Eigen::Map<const Vector>(yt.data(), yt.size());
}

}  // namespace

LastLayerOptimum solve_last_layer_optimum(LossKind kind, const Matrix& hidden, const Matrix& y,
                                          const Matrix& anchor, const OptimumOptions& options) {
  if (hidden.rows() != y.rows()) throw BoundError("features and targets have different row counts");
  const Matrix features = linalg::append_ones_column(hidden);
  if (anchor.rows() != features.cols() || anchor.cols() != y.cols()) {
    throw BoundError("anchor must be (m_H + 1) x m_y");
  }
  LastLayerOptimum opt;
  opt.rank = linalg::numerical_rank(features);
  opt.full_rank = opt.rank == static_cast<std::size_t>(features.rows());

  if (kind == LossKind::squared) {
    opt.weight_bias = linalg::nearest_least_squares(features, y, anchor);
  } else {
    const double step = 1.0 / compute_L_H(kind, hidden);
    Matrix z = anchor;
    for (; opt.iterations < options.max_steps; ++opt.iterations) {
      const Matrix g = features.transpose() * loss_grad(kind, features * z, y);
      if (g.norm() < options.grad_tolerance) break;
      z -= step * g;
    }
    opt.weight_bias = std::move(z);
    opt.approximate = true;
  }
  opt.loss = loss_value(kind, features * opt.weight_bias, y);
  opt.r_squared = (opt.weight_bias - anchor).squaredNorm();
  return opt;
}

double gd_bound(double r_squared, double lipschitz_last, std::size_t t, std::size_t tau) {
  if (t <= tau) throw BoundError("gd_bound needs t > tau");
  return r_squared * lipschitz_last / (2.0 * static_cast<double>(t - tau));
}

double sgd_bound(double r_squared, double g_squared, const std::vector<double>& rates,
                 std::size_t t, std::size_t tau) {
  if (t < tau) throw BoundError("sgd_bound needs t >= tau");
  if (rates.size() < t - tau + 1) throw BoundError("sgd_bound: schedule shorter than t - tau + 1");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t k = 0; k <= t - tau; ++k) {
    if (rates[k] < 0.0) throw BoundError("sgd_bound: negative rate");
    sum += rates[k];
    sum_sq += rates[k] * rates[k];
  }
  if (sum == 0.0) throw BoundError("sgd_bound: rates sum to zero");
  return (r_squared + g_squared * sum_sq) / (2.0 * sum);
}

std::vector<double> sqrt_schedule(double a, std::size_t t, std::size_t tau) {
  std::vector<double> rates(t - tau + 1);
  for (std::size_t k = 0; k < rates.size(); ++k) rates[k] = a / std::sqrt(static_cast<double>(k + 1));
  return rates;
}

double lazy_bound(double lipschitz, double r_bar, double loss_tau, double loss_star,
                  double eta_bar, std::size_t t, std::size_t tau) {
  if (!(eta_bar > 0.0 && eta_bar < 1.0)) throw BoundError("lazy_bound needs eta_bar in (0, 1)");
  if (t < tau) throw BoundError("lazy_bound needs t >= tau");
  const double gap = std::max(0.0, loss_tau - loss_star);
  return std::sqrt(lipschitz * r_bar * r_bar * gap / (2.0 * eta_bar * (1.0 - eta_bar))) /
         std::sqrt(static_cast<double>(t - tau + 1));
}

double estimate_R_bar(const std::vector<TrajectoryPoint>& trajectory, const Matrix& y,
                      LossKind kind) {
  if (kind != LossKind::squared) {
    throw BoundError("exact R-bar is only available for squared loss; use the iterative last-layer optimum instead");
  }
  if (trajectory.empty()) throw BoundError("estimate_R_bar: empty trajectory");
  const Vector target = stack_targets(y);
  double r_bar = 0.0;
  for (const auto& point : trajectory) {
    if (point.jacobian.rows() != target.size() || point.jacobian.cols() != point.masked_params.size()) {
      throw BoundError("estimate_R_bar: Jacobian shape does not match targets or parameters");
    }
    const Matrix omega = linalg::min_norm_solve(point.jacobian, target, point.masked_params);
    r_bar = std::max(r_bar, (omega.col(0) - point.masked_params).norm());
  }
  return r_bar;
}

double empirical_lipschitz(const std::vector<Vector>& iterates, const std::vector<Vector>& gradients) {
  if (iterates.size() != gradients.size()) throw BoundError("empirical_lipschitz: length mismatch");
  double best = 0.0;
  for (std::size_t k = 1; k < iterates.size(); ++k) {
    const double dw = (iterates[k] - iterates[k - 1]).norm();
    if (dw == 0.0) continue;
    best = std::max(best, (gradients[k] - gradients[k - 1]).norm() / dw);
  }
  return best;
}

bool bound_violated(double measured, double bound) { return measured > bound + 1e-9 * (1.0 + bound); }

BoundReport check_bounds(const TrainLog& log, const BoundConstants& c) {
  if (c.mode != log.mode) {
    throw BoundError("bound constants are for " + to_string(c.mode) + " but the log ran " +
                     to_string(log.mode));
  }
  if (c.mode == Phase2Mode::last_layer_base) {
    throw BoundError("no convergence bound covers last_layer_base (momentum and weight decay in phase 2)");
  }
  BoundReport report;
  report.constants = c;
  report.diagnostic_only = c.mode == Phase2Mode::lazy_full;
  const std::size_t tau = log.tau;
  // Running partial sums over k = tau..t of the schedule.
  double rate_sum = 0.0;
  double rate_sq_sum = 0.0;
  const auto rate_at = [&](std::size_t k) { return c.sgd_rate / std::sqrt(static_cast<double>(k - tau + 1)); };
  if (c.mode == Phase2Mode::last_layer_sgd) {
    rate_sum = rate_at(tau);
    rate_sq_sum = rate_sum * rate_sum;
  }
  double best = log.loss_at_tau;
  for (const auto& rec : log.records) {
    if (rec.t <= tau) continue;
    best = std::min(best, rec.loss);
    BoundPoint p;
    p.t = rec.t;
    switch (c.mode) {
      case Phase2Mode::last_layer_gd:
        p.bound = gd_bound(c.r_squared, c.lipschitz_last, rec.t, tau);
        p.measured = rec.loss - c.loss_star;
        break;
      case Phase2Mode::last_layer_sgd:
        rate_sum += rate_at(rec.t);
        rate_sq_sum += rate_at(rec.t) * rate_at(rec.t);
        p.bound = (c.r_squared + c.g_squared * rate_sq_sum) / (2.0 * rate_sum);
        p.measured = best - c.loss_star;
        break;
      case Phase2Mode::lazy_full:
        p.bound = lazy_bound(c.lipschitz, c.r_bar, log.loss_at_tau, c.loss_star, c.eta_bar, rec.t, tau);
        p.measured = best - c.loss_star;
        break;
      case Phase2Mode::last_layer_base:
        break;
    }
    p.slack = p.bound - p.measured;
    p.violated = bound_violated(p.measured, p.bound);
    if (p.violated && !report.diagnostic_only) ++report.violations;
    report.points.push_back(p);
  }
  return report;
}

}  // namespace twophase
