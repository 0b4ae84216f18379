#include "twophase/expressivity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "twophase/random.hpp"

namespace twophase {

namespace {

using Index = Eigen::Index;

constexpr int kMaxDoublings = 60;

std::size_t min_inner_width(const NetworkSpec& spec) {
  std::size_t m = std::numeric_limits<std::size_t>::max();
  for (std::size_t l = 1; l < spec.depth(); ++l) m = std::min(m, spec.widths[l]);
  return m;
}

/// psi(z) = sum_{l=0}^{H-2} ln(1 + exp(-s sigma^l(z))) / s, the gap between
/// the (H-1)-fold softplus composition and the identity.
double composition_gap(double z, double s, std::size_t depth) {
  double value = z;
  double gap = 0.0;
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    gap += std::log1p(std::exp(-s * value)) / s;
    value = softplus(value, s);
  }
  return gap;
}

/// Layer 1 separates the samples, layers 2..H sharpen the separation:
/// column i of W^(1) is alphas[0] x_i, W^(l)_ii = alphas[l-1], b^(l)_i = -alphas[l-1].
Params wide_witness(const NetworkSpec& spec, const Matrix& x, double c,
                    const std::vector<double>& alphas) {
  Params p(spec);
  const Index n = x.rows();
  const Index m_x = x.cols();
  auto first = p.weight_bias(1);
  for (Index i = 0; i < n; ++i) {
    first.col(i).head(m_x) = alphas[0] * x.row(i).transpose();
    first(m_x, i) = alphas[0] * (c / 2.0 - x.row(i).squaredNorm());
  }
  for (std::size_t l = 2; l <= spec.depth(); ++l) {
    auto wb = p.weight_bias(l);
    const Index bias_row = wb.rows() - 1;
    for (Index i = 0; i < n; ++i) {
      wb(i, i) = alphas[l - 1];
      wb(bias_row, i) = -alphas[l - 1];
    }
  }
  return p;
}

/// Inner layers must push the diagonal above 1 and the rest below it so the
/// next layer's shift by -1 separates them.
bool inner_layer_separated(const Matrix& block) {
  const Index n = block.rows();
  double diag = std::numeric_limits<double>::infinity();
  double off = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < n; ++k) {
      if (i == k) diag = std::min(diag, block(i, i));
      else off = std::max(off, block(i, k));
    }
  }
  return diag >= 2.0 && off <= 0.5;
}

/// Dominance with room to spare: off-diagonal row sums at most half the
/// diagonal, so the certificate survives rounding.
bool robustly_dominant(const Matrix& block, double dominance) {
  return dominance > 0.0 && dominance >= 0.5 * block.diagonal().cwiseAbs().minCoeff();
}

Params narrow_witness(const NetworkSpec& spec, const Matrix& x, double c, double alpha,
                      double alpha_prime) {
  Params p(spec);
  const Index n = x.rows();
  const Index m_x = x.cols();
  const std::size_t depth = spec.depth();
  for (std::size_t l = 1; l < depth; ++l) {
    auto wb = p.weight_bias(l);
    for (Index i = 0; i < m_x; ++i) wb(i, i) = 1.0;
    if (l == 1) wb.row(wb.rows() - 1).head(m_x).setConstant(alpha);
  }
  auto last = p.weight_bias(depth);
  const Index bias_row = last.rows() - 1;
  for (Index i = 0; i < n; ++i) {
    last.col(i).head(m_x) = alpha_prime * x.row(i).transpose();
    last(bias_row, i) = -alpha_prime * alpha * x.row(i).sum() +
                        alpha_prime * (c / 2.0 - x.row(i).squaredNorm());
  }
  return p;
}

std::string describe_failure(const char* what, double alpha, double alpha_prime,
                             double dominance, double margin) {
  std::ostringstream os;
  os << what << " (alpha=" << alpha << ", alpha'=" << alpha_prime
     << ", dominance margin=" << dominance << ", distinguishability margin=" << margin << ")";
  return os.str();
}

}  // namespace

DistinguishabilityReport check_distinguishability(const Matrix& x, double tolerance) {
  if (x.rows() < 2) throw std::invalid_argument("distinguishability needs at least two samples");
  linalg::require_finite(x, "check_distinguishability");
  DistinguishabilityReport report;
  report.tolerance = tolerance;
  report.margin = std::numeric_limits<double>::infinity();
  const Matrix gram = x * x.transpose();
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.rows(); ++j) {
      if (i == j) continue;
      const double value = gram(i, i) - gram(i, j);
      if (value < report.margin) {
        report.margin = value;
        report.worst_pair = {static_cast<std::size_t>(i), static_cast<std::size_t>(j)};
      }
      if (!(value > tolerance)) {
        report.violations.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      }
    }
  }
  report.passed = report.margin > tolerance;
  return report;
}

std::string to_string(ParamSource source) {
  switch (source) {
    case ParamSource::random:
      return "random";
    case ParamSource::witness:
      return "witness";
    case ParamSource::supplied:
      return "supplied";
  }
  return "supplied";
}

std::string to_string(WitnessCase c) { return c == WitnessCase::wide ? "wide" : "narrow"; }

ExpressivityReport check_expressivity(const NetworkSpec& spec, const Params& params,
                                      const Matrix& x, std::optional<double> tol,
                                      ParamSource source) {
  const ForwardTrace trace = forward_hidden(spec, params, x);
  const Matrix features = linalg::append_ones_column(trace.hidden);
  ExpressivityReport report;
  report.n = static_cast<std::size_t>(x.rows());
  report.source = source;
  const linalg::Vector sv = linalg::singular_values(features);
  const auto rows = static_cast<std::size_t>(features.rows());
  const auto cols = static_cast<std::size_t>(features.cols());
  report.tolerance = tol ? *tol : linalg::default_rank_tolerance(rows, cols, sv(0));
  report.rank = linalg::rank_from_singular_values(sv, rows, cols, report.tolerance);
  report.gram_det = linalg::gram_det(features);
  report.passed = report.rank == report.n;
  return report;
}

double diagonal_dominance_margin(const Matrix& m) {
  const Index n = std::min(m.rows(), m.cols());
  double margin = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < m.rows(); ++i) {
    double off = 0.0;
    for (Index k = 0; k < n; ++k) {
      if (k != i) off += std::abs(m(i, k));
    }
    const double diag = i < n ? std::abs(m(i, i)) : 0.0;
    margin = std::min(margin, diag - off);
  }
  return margin;
}

bool witness_architecture(const NetworkSpec& spec, std::size_t n) {
  if (spec.depth() < 1 || spec.any_batch_norm()) return false;
  if (spec.last_hidden_width() < n) return false;
  if (spec.depth() == 1) return true;
  return min_inner_width(spec) >= std::min(spec.input_dim(), n);
}

Witness construct_witness(const NetworkSpec& spec, const Matrix& x) {
  spec.validate();
  if (spec.any_batch_norm()) {
    throw WitnessError("witness construction applies to networks without batch normalization");
  }
  if (static_cast<std::size_t>(x.cols()) != spec.input_dim()) {
    throw std::invalid_argument("construct_witness: input width does not match the spec");
  }
  const auto n = static_cast<std::size_t>(x.rows());
  if (n == 0) throw std::invalid_argument("construct_witness: no samples");
  if (!witness_architecture(spec, n)) {
    throw WitnessError("architecture does not satisfy min(m_1..m_{H-1}) >= min(m_x, n) and m_H >= n");
  }

  double c = 1.0;
  if (n >= 2) {
    const auto dist = check_distinguishability(x);
    if (!dist.passed) {
      throw WitnessError("inputs are not distinguishable: samples " +
                         std::to_string(dist.worst_pair.first) + " and " +
                         std::to_string(dist.worst_pair.second) + " give margin " +
                         std::to_string(dist.margin));
    }
    c = dist.margin;
  }

  const double s = spec.sharpness;
  const std::size_t depth = spec.depth();
  const bool wide = depth == 1 || min_inner_width(spec) >= n;
  const Index nn = static_cast<Index>(n);

  Witness w{Params(spec), WitnessCase::wide, 0.0, 0.0, {}, 0, 0, 0.0, 0.0, {}};
  w.margin = c;
  w.kind = wide ? WitnessCase::wide : WitnessCase::narrow;

  if (wide) {
    std::vector<double> alphas(depth, 1.0);
    for (std::size_t l = 1; l <= depth; ++l) {
      for (int k = 0;; ++k, alphas[l - 1] *= 2.0) {
        Params p = wide_witness(spec, x, c, alphas);
        const ForwardTrace trace = forward_hidden(spec, p, x);
        const Matrix block = trace.layers[l - 1].post.leftCols(nn);
        if (l < depth) {
          if (inner_layer_separated(block)) {
            w.alpha_doublings = std::max(w.alpha_doublings, k);
            break;
          }
        } else {
          const double dominance = diagonal_dominance_margin(block);
          if (robustly_dominant(block, dominance)) {
            w.params = std::move(p);
            w.alpha = alphas.back();
            w.layer_alphas = alphas;
            w.alpha_doublings = std::max(w.alpha_doublings, k);
            w.dominance = dominance;
            w.report = check_expressivity(spec, w.params, x, std::nullopt, ParamSource::witness);
            return w;
          }
        }
        if (k == kMaxDoublings) {
          throw WitnessError(describe_failure("layer separation not reached before the doubling cap",
                                              alphas[l - 1], 0.0, diagonal_dominance_margin(block), c));
        }
      }
    }
  }

  // Narrow case: shift inputs far enough into the linear regime of the
  // softplus that the composition gap psi perturbs every inner product by at
  // most c/4, then scale the last hidden layer until dominance holds.
  double alpha = 1.0;
  int alpha_doublings = 0;
  for (;; ++alpha_doublings, alpha *= 2.0) {
    double worst = 0.0;
    for (Index i = 0; i < nn; ++i) {
      Eigen::VectorXd psi(x.cols());
      for (Index k = 0; k < x.cols(); ++k) psi(k) = composition_gap(x(i, k) + alpha, s, depth);
      for (Index j = 0; j < nn; ++j) worst = std::max(worst, std::abs(psi.dot(x.row(j))));
    }
    if (worst <= c / 4.0) break;
    if (alpha_doublings == kMaxDoublings) {
      throw WitnessError(describe_failure("input shift did not suppress the softplus gap",
                                          alpha, 0.0, 0.0, c));
    }
  }

  double alpha_prime = 1.0;
  for (int k = 0; k <= kMaxDoublings; ++k, alpha_prime *= 2.0) {
    Params p = narrow_witness(spec, x, c, alpha, alpha_prime);
    const Matrix block = forward_hidden(spec, p, x).hidden.leftCols(nn);
    const double dominance = diagonal_dominance_margin(block);
    if (robustly_dominant(block, dominance)) {
      w.params = std::move(p);
      w.alpha = alpha;
      w.layer_alphas = {alpha, alpha_prime};
      w.alpha_prime = alpha_prime;
      w.alpha_doublings = alpha_doublings;
      w.alpha_prime_doublings = k;
      w.dominance = dominance;
      w.report = check_expressivity(spec, w.params, x, std::nullopt, ParamSource::witness);
      return w;
    }
    if (k == kMaxDoublings) {
      throw WitnessError(describe_failure("dominance not reached before the doubling cap", alpha,
                                          alpha_prime, dominance, c));
    }
  }
  throw WitnessError("unreachable");
}

ProbabilisticExpressivity probabilistic_expressivity(const NetworkSpec& spec, const Matrix& x,
                                                     std::size_t trials, double init_scale,
                                                     std::uint64_t seed,
                                                     std::optional<double> tol) {
  ProbabilisticExpressivity result;
  result.trials = trials;
  for (std::size_t k = 0; k < trials; ++k) {
    std::mt19937_64 rng(derive_seed(seed, k));
    const Params p = gaussian_params(spec, init_scale, rng);
    auto report = check_expressivity(spec, p, x, tol, ParamSource::random);
    if (report.passed) ++result.passed;
    result.reports.push_back(report);
  }
  result.fraction = trials == 0 ? 0.0 : static_cast<double>(result.passed) / static_cast<double>(trials);
  return result;
}

}  // namespace twophase
