#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "twophase/data.hpp"
#include "twophase/expressivity.hpp"
#include "twophase/random.hpp"

using namespace twophase;

namespace {

NetworkSpec make_spec(std::vector<std::size_t> widths, double s = 100.0) {
  NetworkSpec spec;
  spec.widths = std::move(widths);
  spec.output_dim = 1;
  spec.sharpness = s;
  return spec;
}

Matrix sphere_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
  SynthOptions opt;
  opt.n = n;
  opt.input_dim = dim;
  opt.seed = seed;
  opt.min_margin = 0.05;
  return synth_gen(opt).x;
}

// Relative Gram determinant of [h, 1] computed by the oracle.
double relative_gram(const Matrix& features) {
  const Matrix g = oracle::matmul(features, features.transpose());
  return oracle::det(g) / g.diagonal().prod();
}

}  // namespace

TEST_CASE("distinguishability examples") {
  const Matrix eye = Matrix::Identity(2, 2);
  const auto ok = check_distinguishability(eye);
  CHECK(ok.passed);
  CHECK(ok.margin == doctest::Approx(1.0));

  Matrix dup(3, 2);
  dup << 1, 0, 0.6, 0.8, 1, 0;
  const auto bad = check_distinguishability(dup);
  CHECK_FALSE(bad.passed);
  CHECK(std::abs(bad.margin) < 1e-15);
  CHECK(((bad.worst_pair.first == 0 && bad.worst_pair.second == 2) ||
         (bad.worst_pair.first == 2 && bad.worst_pair.second == 0)));
  CHECK_FALSE(bad.violations.empty());
  CHECK_THROWS(check_distinguishability(Matrix::Ones(1, 2)));
}

TEST_CASE("distinguishability margin matches the pair-loop oracle") {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix x = oracle::unit_rows(oracle::random_matrix(20, 5, rng));
    const auto report = check_distinguishability(x);
    CHECK(report.passed);
    CHECK(report.margin == doctest::Approx(oracle::pair_margin(x)).epsilon(1e-12));
    // On the unit sphere c is half the smallest squared distance.
    double min_sq = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = i + 1; j < x.rows(); ++j) min_sq = std::min(min_sq, (x.row(i) - x.row(j)).squaredNorm());
    CHECK(std::abs(report.margin - 0.5 * min_sq) < 1e-12);
    // Row order does not matter.
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(20);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 20, rng);
    CHECK(check_distinguishability(perm * x).margin == report.margin);
  }
}

TEST_CASE("dimension bound and duplicated rows defeat expressivity") {
  std::mt19937_64 rng(42);
  const NetworkSpec spec = make_spec({3, 6, 4}, 1.0);
  const Matrix x = sphere_points(6, 3, 1);
  for (int rep = 0; rep < 10; ++rep) {
    const Params p = gaussian_params(spec, 1.0, rng);
    CHECK_FALSE(check_expressivity(spec, p, x).passed);  // n = 6 > m_H + 1 = 5
  }
  const auto frac = probabilistic_expressivity(spec, x, 10, 1.0, 7);
  CHECK(frac.fraction == 0.0);

  const NetworkSpec wide = make_spec({3, 8, 8}, 1.0);
  Matrix dup = sphere_points(4, 3, 2);
  dup.row(3) = dup.row(0);
  for (int rep = 0; rep < 10; ++rep) {
    const auto report = check_expressivity(wide, gaussian_params(wide, 1.0, rng), dup);
    CHECK_FALSE(report.passed);
    CHECK(report.rank < 4);
  }
}

TEST_CASE("witness for two orthonormal inputs") {
  const NetworkSpec spec = make_spec({2, 2, 2});
  const Matrix x = Matrix::Identity(2, 2);
  const Witness w = construct_witness(spec, x);
  CHECK(w.kind == WitnessCase::wide);
  const Matrix h = forward_hidden(spec, w.params, x).hidden;
  for (Eigen::Index i = 0; i < 2; ++i) CHECK(std::abs(h(i, i)) > std::abs(h(i, 1 - i)));
  CHECK(diagonal_dominance_margin(h) > 0.0);
  CHECK(w.report.passed);
}

TEST_CASE("witness for a single sample") {
  const NetworkSpec spec = make_spec({3, 2, 1});
  Matrix x(1, 3);
  x << 0.6, 0.0, 0.8;
  const Witness w = construct_witness(spec, x);
  CHECK(w.alpha_doublings <= 60);
  CHECK(w.report.rank == 1);
  CHECK(w.report.passed);
}

TEST_CASE("witness in the wide case with n = 8, m_x = 3, m_H = 8") {
  const NetworkSpec spec = make_spec({3, 8, 8});
  const Matrix x = sphere_points(8, 3, 3);
  const Witness w = construct_witness(spec, x);
  CHECK(w.kind == WitnessCase::wide);
  CHECK(w.dominance > 0.0);
  const Matrix h = forward_hidden(spec, w.params, x).hidden;
  const Matrix features = linalg::append_ones_column(h);
  CHECK(check_expressivity(spec, w.params, x).passed);
  CHECK(oracle::rank_by_column_subsets(features.transpose(), 1e-12) == 8);
}

TEST_CASE("witness in the narrow case: m_1 = m_x = 3 < n = 6, H = 3") {
  const NetworkSpec spec = make_spec({3, 3, 3, 6});
  const Matrix x = sphere_points(6, 3, 4);
  const Witness w = construct_witness(spec, x);
  CHECK(w.kind == WitnessCase::narrow);
  CHECK(w.dominance > 0.0);
  const Matrix h = forward_hidden(spec, w.params, x).hidden;
  CHECK(diagonal_dominance_margin(h) == doctest::Approx(w.dominance));
  CHECK(w.report.passed);
  CHECK(check_expressivity(spec, w.params, x).rank == 6);
  CHECK(relative_gram(linalg::append_ones_column(h)) > 0.0);
}

TEST_CASE("witness dominance holds across random distinguishable datasets") {
  std::mt19937_64 rng(43);
  for (int rep = 0; rep < 15; ++rep) {
    const std::size_t n = oracle::uniform_int(rng, 2, 8);
    const std::size_t m_x = oracle::uniform_int(rng, 2, 4);
    const std::size_t depth = oracle::uniform_int(rng, 1, 3);
    std::vector<std::size_t> widths{m_x};
    for (std::size_t l = 1; l < depth; ++l) widths.push_back(std::max(n, m_x) + oracle::uniform_int(rng, 0, 2));
    widths.push_back(n + oracle::uniform_int(rng, 0, 2));
    const NetworkSpec spec = make_spec(widths, rep % 2 ? 100.0 : 5.0);
    const Matrix x = sphere_points(n, m_x, 100 + static_cast<std::uint64_t>(rep));
    const Witness w = construct_witness(spec, x);
    const Matrix h = forward_hidden(spec, w.params, x).hidden;
    CHECK(diagonal_dominance_margin(h) > 0.0);
    CHECK(w.report.passed);
  }
}

TEST_CASE("witness errors") {
  Matrix dup(2, 2);
  dup << 1, 0, 1, 0;
  CHECK_THROWS_AS(construct_witness(make_spec({2, 2, 2}), dup), WitnessError);
  CHECK_THROWS_AS(construct_witness(make_spec({2, 2, 1}), Matrix::Identity(2, 2)), WitnessError);
  NetworkSpec bn = make_spec({2, 2, 2});
  bn.batch_norm = {true, false};
  CHECK_THROWS_AS(construct_witness(bn, Matrix::Identity(2, 2)), WitnessError);
  CHECK_FALSE(witness_architecture(make_spec({4, 2, 6}), 6));
  CHECK(witness_architecture(make_spec({4, 4, 6}), 6));
}

TEST_CASE("random draws on a witness-feasible architecture are full rank") {
  const NetworkSpec spec = make_spec({3, 8, 8}, 1.0);
  const Matrix x = sphere_points(8, 3, 5);
  const auto result = probabilistic_expressivity(spec, x, 20, 1.0, 9);
  CHECK(result.fraction == 1.0);
  CHECK(result.reports.size() == 20);
}

TEST_CASE("n = 4 Gaussian data on m = (4, 8): every trial passes and the Gram oracle agrees") {
  std::mt19937_64 rng(44);
  const Matrix x = oracle::random_matrix(4, 4, rng);
  const NetworkSpec spec = make_spec({4, 8});
  const std::uint64_t seed = 77;
  const auto result = probabilistic_expressivity(spec, x, 50, 1.0, seed);
  CHECK(result.fraction == 1.0);
  for (std::size_t k = 0; k < 50; ++k) {
    std::mt19937_64 trial(derive_seed(seed, k));
    const Params p = gaussian_params(spec, 1.0, trial);
    const Matrix features = linalg::append_ones_column(forward_hidden(spec, p, x).hidden);
    CHECK(relative_gram(features) > 1e-14);
    CHECK(result.reports[k].passed);
  }
}

TEST_CASE("reported rank never increases with the tolerance") {
  std::mt19937_64 rng(45);
  for (int rep = 0; rep < 30; ++rep) {
    const NetworkSpec spec = make_spec({3, 6, 5}, oracle::uniform(rng, 1, 100));
    const Matrix x = oracle::random_matrix(oracle::uniform_int(rng, 2, 7), 3, rng);
    const Params p = gaussian_params(spec, 1.0, rng);
    std::size_t last = std::numeric_limits<std::size_t>::max();
    for (double tol = 1e-16; tol < 1e3; tol *= 10) {
      const std::size_t r = check_expressivity(spec, p, x, tol).rank;
      CHECK(r <= last);
      last = r;
    }
  }
}
