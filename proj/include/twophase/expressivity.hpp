#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "twophase/network.hpp"

namespace twophase {

struct DistinguishabilityReport {
  bool passed = false;
  /// min over ordered pairs i != j of ||x_i||^2 - x_i . x_j
  double margin = 0.0;
  /// Pair attaining the margin (always filled for n >= 2).
  std::pair<std::size_t, std::size_t> worst_pair{0, 0};
  /// Every ordered pair at or below the tolerance when the check fails.
  std::vector<std::pair<std::size_t, std::size_t>> violations;
  double tolerance = 1e-9;
};

DistinguishabilityReport check_distinguishability(const Matrix& x, double tolerance = 1e-9);

enum class ParamSource { random, witness, supplied };
std::string to_string(ParamSource source);

struct ExpressivityReport {
  std::size_t rank = 0;
  std::size_t n = 0;
  bool passed = false;
  double gram_det = 0.0;
  double tolerance = 0.0;
  ParamSource source = ParamSource::supplied;
};

/// rank([h_X^(H), 1]) against n for the given hidden parameters.
ExpressivityReport check_expressivity(const NetworkSpec& spec, const Params& params,
                                      const Matrix& x, std::optional<double> tol = std::nullopt,
                                      ParamSource source = ParamSource::supplied);

enum class WitnessCase { wide, narrow };
std::string to_string(WitnessCase c);

struct Witness {
  Params params;
  WitnessCase kind = WitnessCase::wide;
  double alpha = 0.0;        // wide case: last-layer scale; narrow case: input shift
  double alpha_prime = 0.0;  // narrow case only: scale of the last hidden layer
  std::vector<double> layer_alphas;  // wide: one scale per hidden layer
  int alpha_doublings = 0;   // wide: max over layers
  int alpha_prime_doublings = 0;
  double margin = 0.0;       // distinguishability margin used as c
  /// min_i (|h_ii| - sum_{k != i} |h_ik|) over the leading n x n block.
  double dominance = 0.0;
  ExpressivityReport report;
};

class WitnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Explicit hidden weights making the leading n x n block of h_X^(H) strictly
/// diagonally dominant, with off-diagonal row sums at most half the diagonal. Requires distinguishable inputs, no batch norm,
/// min(m_1..m_{H-1}) >= min(m_x, n) and m_H >= n.
Witness construct_witness(const NetworkSpec& spec, const Matrix& x);

/// min_i (|M_ii| - sum_{k != i} |M_ik|) over the leading n x n block of M.
double diagonal_dominance_margin(const Matrix& m);

struct ProbabilisticExpressivity {
  std::size_t trials = 0;
  std::size_t passed = 0;
  double fraction = 0.0;
  std::vector<ExpressivityReport> reports;
};

/// Draws `trials` Gaussian parameter vectors (scale `init_scale`) and checks
/// each one. Trial k uses a generator seeded from (seed, k).
ProbabilisticExpressivity probabilistic_expressivity(const NetworkSpec& spec, const Matrix& x,
                                                     std::size_t trials, double init_scale,
                                                     std::uint64_t seed,
                                                     std::optional<double> tol = std::nullopt);

/// True when the widths admit construct_witness for n samples.
bool witness_architecture(const NetworkSpec& spec, std::size_t n);

}  // namespace twophase
