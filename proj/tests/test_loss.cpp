#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "twophase/loss.hpp"

using namespace twophase;

namespace {

Matrix random_simplex_rows(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  Matrix y(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.cols(); ++j) y(i, j) = oracle::uniform(rng, 0.0, 1.0);
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

// -sum y log softmax(q) straight from the definition.
double naive_ce(const Matrix& f, const Matrix& y) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    double z = 0.0;
    for (Eigen::Index k = 0; k < f.cols(); ++k) z += std::exp(f(i, k));
    for (Eigen::Index k = 0; k < f.cols(); ++k) total -= y(i, k) * std::log(std::exp(f(i, k)) / z);
  }
  return total / static_cast<double>(f.rows());
}

}  // namespace

TEST_CASE("loss examples") {
  Matrix q(1, 2);
  q << 0, 0;
  Matrix y(1, 2);
  y << 1, 0;
  CHECK(loss_value(LossKind::cross_entropy, q, y) == doctest::Approx(std::log(2.0)));
  const Matrix g = loss_grad(LossKind::cross_entropy, q, y);
  CHECK(g(0, 0) == doctest::Approx(-0.5));
  CHECK(g(0, 1) == doctest::Approx(0.5));

  Matrix f(2, 1);
  f << 1, 0;
  const Matrix t = Matrix::Zero(2, 1);
  CHECK(loss_value(LossKind::squared, f, t) == doctest::Approx(0.5));
  const Matrix gs = loss_grad(LossKind::squared, f, t);
  CHECK(gs(0, 0) == doctest::Approx(1.0));
  CHECK(gs(1, 0) == doctest::Approx(0.0));

  CHECK(lipschitz_constant(LossKind::squared) == 2.0);
  CHECK(lipschitz_constant(LossKind::cross_entropy) == 1.0);
  CHECK(loss_kind_from_string("cross_entropy") == LossKind::cross_entropy);
  CHECK_THROWS(loss_kind_from_string("hinge"));
}

TEST_CASE("cross-entropy is stable for large logits") {
  Matrix q(1, 3);
  q << 1000, 0, -1000;
  Matrix y(1, 3);
  y << 0, 1, 0;
  const double v = loss_value(LossKind::cross_entropy, q, y);
  CHECK(v == doctest::Approx(1000.0));
  CHECK(loss_grad(LossKind::cross_entropy, q, y).allFinite());
}

TEST_CASE("target validation") {
  Matrix q = Matrix::Zero(2, 2);
  Matrix bad(2, 2);
  bad << 0.5, 0.6, 1, 0;
  CHECK_THROWS_AS(loss_value(LossKind::cross_entropy, q, bad), std::invalid_argument);
  bad << -0.5, 1.5, 1, 0;
  CHECK_THROWS_AS(loss_grad(LossKind::cross_entropy, q, bad), std::invalid_argument);
  CHECK_THROWS_AS(loss_value(LossKind::squared, q, Matrix::Zero(3, 2)), std::invalid_argument);
  CHECK_THROWS_AS(loss_value(LossKind::squared, Matrix(0, 1), Matrix(0, 1)), std::invalid_argument);
}

TEST_CASE("values match the naive definitions and gradients match central differences") {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = oracle::uniform_int(rng, 1, 6);
    const std::size_t k = oracle::uniform_int(rng, 1, 4);
    const Matrix f = oracle::random_matrix(n, k, rng, 3.0);
    const Matrix yr = oracle::random_matrix(n, k, rng);
    const Matrix yc = random_simplex_rows(n, k, rng);
    CHECK(loss_value(LossKind::squared, f, yr) ==
          doctest::Approx((f - yr).array().square().sum() / static_cast<double>(n)).epsilon(1e-12));
    CHECK(loss_value(LossKind::cross_entropy, f, yc) == doctest::Approx(naive_ce(f, yc)).epsilon(1e-10));

    for (const auto& [kind, y] : {std::pair{LossKind::squared, yr}, std::pair{LossKind::cross_entropy, yc}}) {
      const auto flat = [&](const oracle::Vector& v) {
        return loss_value(kind, Eigen::Map<const Matrix>(v.data(), f.rows(), f.cols()), y);
      };
      const oracle::Vector w = Eigen::Map<const oracle::Vector>(f.data(), f.size());
      const oracle::Vector ref = oracle::fd_gradient(flat, w);
      const Matrix g = loss_grad(kind, f, y);
      const oracle::Vector gv = Eigen::Map<const oracle::Vector>(g.data(), g.size());
      CHECK((gv - ref).cwiseAbs().maxCoeff() < 1e-7);
    }
  }
}

TEST_CASE("losses are convex along random segments") {
  std::mt19937_64 rng(32);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = oracle::uniform_int(rng, 1, 5);
    const std::size_t k = oracle::uniform_int(rng, 2, 4);
    const Matrix a = oracle::random_matrix(n, k, rng, 4.0);
    const Matrix b = oracle::random_matrix(n, k, rng, 4.0);
    const double t = oracle::uniform(rng, 0, 1);
    const Matrix mid = t * a + (1 - t) * b;
    for (const auto kind : {LossKind::squared, LossKind::cross_entropy}) {
      const Matrix y = kind == LossKind::squared ? oracle::random_matrix(n, k, rng) : random_simplex_rows(n, k, rng);
      const double lhs = loss_value(kind, mid, y);
      const double rhs = t * loss_value(kind, a, y) + (1 - t) * loss_value(kind, b, y);
      CHECK(lhs <= rhs + 1e-12 * (1 + std::abs(rhs)));
    }
  }
}

TEST_CASE("per-sample gradients are Lipschitz with the stated constant") {
  std::mt19937_64 rng(33);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t k = oracle::uniform_int(rng, 1, 5);
    const Matrix a = oracle::random_matrix(1, k, rng, 5.0);
    const Matrix b = a + oracle::random_matrix(1, k, rng, std::pow(10.0, oracle::uniform(rng, -4, 1)));
    for (const auto kind : {LossKind::squared, LossKind::cross_entropy}) {
      const Matrix y = kind == LossKind::squared ? oracle::random_matrix(1, k, rng) : random_simplex_rows(1, k, rng);
      const double lhs = (loss_grad(kind, a, y) - loss_grad(kind, b, y)).norm();
      CHECK(lhs <= lipschitz_constant(kind) * (a - b).norm() * (1 + 1e-9));
    }
  }
}
