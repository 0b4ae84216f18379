#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "twophase/data.hpp"
#include "twophase/expressivity.hpp"

using namespace twophase;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& contents) {
  const fs::path dir = fs::temp_directory_path() / "twophase_test_data";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p) << contents;
  return p;
}

}  // namespace

TEST_CASE("synth_gen examples") {
  SynthOptions opt;
  opt.n = 64;
  opt.input_dim = 8;
  opt.min_margin = 0.05;
  opt.seed = 3;
  const Dataset d = synth_gen(opt);
  CHECK(d.size() == 64);
  CHECK(d.y.cols() == 1);
  CHECK(oracle::pair_margin(d.x) >= 0.05);
  CHECK(check_distinguishability(d.x).margin >= 0.05);
  const Dataset again = synth_gen(opt);
  CHECK(again.x == d.x);
  CHECK(again.y == d.y);
  opt.seed = 4;
  CHECK(synth_gen(opt).x != d.x);
}

TEST_CASE("synth_gen classification targets are one-hot") {
  SynthOptions opt;
  opt.n = 40;
  opt.input_dim = 3;
  opt.output_dim = 4;
  opt.kind = TargetKind::class_index;
  const Dataset d = synth_gen(opt);
  CHECK(d.y.cols() == 4);
  CHECK(d.labels.size() == 40);
  for (Eigen::Index i = 0; i < 40; ++i) {
    CHECK(d.y.row(i).sum() == 1.0);
    CHECK(d.y(i, static_cast<Eigen::Index>(d.labels[static_cast<std::size_t>(i)])) == 1.0);
  }
}

TEST_CASE("synth_gen errors") {
  SynthOptions opt;
  opt.min_margin = 0.0;
  CHECK_THROWS(synth_gen(opt));
  opt.min_margin = 1.0;
  CHECK_THROWS(synth_gen(opt));
  // Two points on the circle cannot be more than distance 2 apart.
  opt.min_margin = 0.9;
  opt.n = 5;
  opt.input_dim = 1;
  opt.max_rejections = 1000;
  CHECK_THROWS(synth_gen(opt));
}

TEST_CASE("synth_gen outputs are distinguishable across a parameter grid") {
  std::mt19937_64 rng(81);
  for (int rep = 0; rep < 200; ++rep) {
    SynthOptions opt;
    opt.input_dim = oracle::uniform_int(rng, 2, 6);
    opt.n = oracle::uniform_int(rng, 1, 4 * opt.input_dim);
    opt.min_margin = std::vector<double>{0.01, 0.05, 0.1}[static_cast<std::size_t>(rep % 3)];
    opt.seed = static_cast<std::uint64_t>(rep);
    const Dataset d = synth_gen(opt);
    CHECK(d.size() == opt.n);
    if (opt.n >= 2) {
      const auto report = check_distinguishability(d.x);
      CHECK(report.passed);
      CHECK(report.margin >= opt.min_margin);
    }
  }
}

TEST_CASE("normalize_inputs examples") {
  Matrix x(1, 2);
  x << 3, 4;
  const Matrix u = normalize_inputs(x);
  CHECK(u(0, 0) == doctest::Approx(0.6));
  CHECK(u(0, 1) == doctest::Approx(0.8));
  CHECK((normalize_inputs(u) - u).cwiseAbs().maxCoeff() <= 1e-15);
  Matrix zero(2, 2);
  zero << 1, 1, 0, 0;
  CHECK_THROWS_WITH(normalize_inputs(zero), doctest::Contains("row 1"));
}

TEST_CASE("normalize_inputs gives unit rows and keeps angular order") {
  std::mt19937_64 rng(82);
  for (int rep = 0; rep < 50; ++rep) {
    const Matrix x = oracle::random_matrix(oracle::uniform_int(rng, 3, 10), oracle::uniform_int(rng, 1, 5), rng, 7.0);
    const Matrix u = normalize_inputs(x);
    for (Eigen::Index i = 0; i < u.rows(); ++i) CHECK(std::abs(u.row(i).norm() - 1.0) <= 1e-12);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.rows(); ++j)
        for (Eigen::Index k = 0; k < x.rows(); ++k) {
          // Cosines of the raw rows against row i, compared through the unit rows.
          const double raw = x.row(i).dot(x.row(j)) / x.row(j).norm() - x.row(i).dot(x.row(k)) / x.row(k).norm();
          const double unit = u.row(i).dot(u.row(j)) - u.row(i).dot(u.row(k));
          if (std::abs(raw) > 1e-9 * x.row(i).norm()) CHECK((raw > 0) == (unit > 0));
        }
  }
}

TEST_CASE("load_csv examples and errors") {
  const fs::path p = temp_file("two.csv", "1,0,1\n0,1,0\n");
  const Dataset d = load_csv(p, 2, TargetKind::class_index);
  CHECK(d.x == Matrix::Identity(2, 2));
  CHECK(d.labels == std::vector<std::size_t>{1, 0});
  CHECK(d.y(0, 1) == 1.0);
  CHECK(d.y(1, 0) == 1.0);

  CHECK_THROWS(load_csv(temp_file("empty.csv", ""), 2, TargetKind::regression));
  CHECK_THROWS_WITH(load_csv(temp_file("bad.csv", "1,2,3\n1,x,3\n"), 2, TargetKind::regression),
                    doctest::Contains("line 2"));
  CHECK_THROWS_WITH(load_csv(temp_file("short.csv", "1,2,3\n1,2\n"), 2, TargetKind::regression),
                    doctest::Contains("line 2"));
  CHECK_THROWS(load_csv(temp_file("inf.csv", "1,inf,3\n"), 2, TargetKind::regression));
  CHECK_THROWS(load_csv(temp_file("nan.csv", "1,nan,3\n"), 2, TargetKind::regression));
  CHECK_THROWS(load_csv(temp_file("frac.csv", "1,2,0.5\n"), 2, TargetKind::class_index));
  CHECK_THROWS(load_csv(fs::temp_directory_path() / "twophase_test_data" / "missing.csv", 2, TargetKind::regression));
}

TEST_CASE("save_csv then load_csv round-trips") {
  std::mt19937_64 rng(83);
  for (const auto kind : {TargetKind::regression, TargetKind::class_index, TargetKind::one_hot}) {
    SynthOptions opt;
    opt.n = 20;
    opt.input_dim = 5;
    opt.output_dim = 3;
    opt.kind = kind;
    opt.seed = 12;
    const Dataset d = synth_gen(opt);
    const fs::path p = temp_file("round_" + to_string(kind) + ".csv", "");
    save_csv(d, p);
    const Dataset back = load_csv(p, 5, kind, kind == TargetKind::class_index ? 3 : 0);
    CHECK(oracle::max_rel_error(back.x, d.x) <= 1e-12);
    CHECK(oracle::max_rel_error(back.y, d.y) <= 1e-12);
    CHECK(back.labels == d.labels);
  }
}

TEST_CASE("one_hot and target kind names") {
  const Matrix y = one_hot({2, 0}, 3);
  CHECK(y(0, 2) == 1.0);
  CHECK(y(1, 0) == 1.0);
  CHECK(y.sum() == 2.0);
  CHECK_THROWS(one_hot({3}, 3));
  CHECK(target_kind_from_string("one_hot") == TargetKind::one_hot);
  CHECK_THROWS(target_kind_from_string("ordinal"));
}
