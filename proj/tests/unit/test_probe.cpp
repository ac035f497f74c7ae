#include "doctest.h"

#include "ematrace/probe.hpp"

#include <cmath>
#include <random>

using namespace ematrace;
using namespace ematrace::probe;

namespace {

// Gaussian clusters around random class centres.
struct Blobs {
  Matrix<double> x;
  std::vector<int> y;
};

Blobs blobs(int n, int d, int classes, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix<double> centres = Matrix<double>::NullaryExpr(classes, d, [&] { return g(rng); });
  Blobs b;
  b.x.resize(n, d);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    b.y.push_back(c);
    for (int j = 0; j < d; ++j) b.x(i, j) = centres(c, j) + noise * g(rng);
  }
  return b;
}

}  // namespace

TEST_CASE("Wilson interval examples") {
  CHECK(wilson_ci(0, 10).low == 0.0);
  const auto mid = wilson_ci(50, 100);
  CHECK(mid.low == doctest::Approx(0.404).epsilon(1e-3 / 0.404));
  CHECK(mid.high == doctest::Approx(0.596).epsilon(1e-3 / 0.596));
  CHECK(wilson_ci(100, 100).high == 1.0);
  CHECK_THROWS(wilson_ci(3, 0));
  CHECK_THROWS(wilson_ci(4, 3));
}

TEST_CASE("Wilson interval against the quadratic it solves") {
  // Endpoints are the roots in q of (p - q)^2 = z^2 q (1 - q) / n.
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 500;
    const std::size_t k = rng() % (n + 1);
    const double p = static_cast<double>(k) / static_cast<double>(n);
    const double z = 1.96;
    const double a = 1.0 + z * z / static_cast<double>(n);
    const double b = -(2.0 * p + z * z / static_cast<double>(n));
    const double c = p * p;
    const double disc = std::sqrt(std::max(0.0, b * b - 4.0 * a * c));
    const auto ci = wilson_ci(k, n, z);
    CHECK(std::abs(ci.low - (-b - disc) / (2.0 * a)) < 1e-3);
    CHECK(std::abs(ci.high - (-b + disc) / (2.0 * a)) < 1e-3);
    CHECK(ci.low <= p);
    CHECK(ci.high >= p);
  }
}

TEST_CASE("Wilson interval shrinks with more trials at a fixed rate") {
  double width = 1.0;
  for (std::size_t n = 10; n <= 10000; n *= 10) {
    const auto ci = wilson_ci(3 * n / 10, n);
    CHECK(ci.high - ci.low < width);
    width = ci.high - ci.low;
  }
}

TEST_CASE("identity features are fitted exactly") {
  const int n = 200;
  std::vector<int> y;
  Matrix<double> x = Matrix<double>::Zero(n, 20);
  for (int i = 0; i < n; ++i) {
    y.push_back(i % 20);
    x(i, i % 20) = 1.0;
  }
  const auto p = fit_ridge(x, y, 20, 1e-6);
  CHECK(accuracy_of(p.predict(x), y).value == 1.0);
  CHECK(p.parameter_count() == 20 * 21);
}

TEST_CASE("all-zero features predict the majority class") {
  Matrix<double> x = Matrix<double>::Zero(10, 3);
  const std::vector<int> y{2, 2, 2, 2, 1, 1, 0, 2, 1, 2};
  const auto p = fit_ridge(x, y, 4);
  for (int c : p.predict(x)) CHECK(c == 2);
}

TEST_CASE("ties go to the lowest class") {
  RidgeProbe p;
  p.weights = Matrix<double>::Zero(3, 2);
  Matrix<double> x = Matrix<double>::Ones(2, 1);
  for (int c : p.predict(x)) CHECK(c == 0);
}

TEST_CASE("closed form matches explicit normal equations") {
  // Hand-sized: 3 points, 2 classes.
  Matrix<double> x(3, 2);
  x << 1.0, 0.5, -0.3, 2.0, 0.7, -1.1;
  const std::vector<int> y{0, 1, 1};
  const double lambda = 0.25;
  const auto p = fit_ridge(x, y, 2, lambda);

  Matrix<double> xa(3, 3);
  xa << x, Matrix<double>::Ones(3, 1);
  Matrix<double> yh = Matrix<double>::Zero(3, 2);
  for (int i = 0; i < 3; ++i) yh(i, y[static_cast<std::size_t>(i)]) = 1.0;
  const Matrix<double> w = yh.transpose() * xa * (xa.transpose() * xa + lambda * Matrix<double>::Identity(3, 3)).inverse();
  CHECK((p.weights - w).cwiseAbs().maxCoeff() < 1e-10);

  // Randomised small instances, float features.
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = blobs(30 + trial, 4, 3, 1.0, rng());
    const auto q = fit_ridge(b.x.cast<float>().eval(), b.y, 3, 0.01);
    Matrix<double> xb(b.x.rows(), 5);
    xb << b.x.cast<float>().cast<double>(), Matrix<double>::Ones(b.x.rows(), 1);
    Matrix<double> yb = Matrix<double>::Zero(b.x.rows(), 3);
    for (Index i = 0; i < b.x.rows(); ++i) yb(i, b.y[static_cast<std::size_t>(i)]) = 1.0;
    const Matrix<double> wb =
        (xb.transpose() * xb + 0.01 * Matrix<double>::Identity(5, 5)).ldlt().solve(xb.transpose() * yb).transpose();
    CHECK((q.weights - wb).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("refitting is bit-identical") {
  const auto b = blobs(500, 10, 5, 0.5, 3);
  CHECK(fit_ridge(b.x, b.y, 5).weights == fit_ridge(b.x, b.y, 5).weights);
}

TEST_CASE("ridge is nearly scale invariant") {
  const auto all = blobs(5000, 12, 20, 1.5, 4);
  const Matrix<double> train = all.x.topRows(3000);
  const Matrix<double> test = all.x.bottomRows(2000);
  const std::vector<int> ytrain(all.y.begin(), all.y.begin() + 3000);
  const std::vector<int> ytest(all.y.begin() + 3000, all.y.end());
  const auto base = evaluate(fit_ridge(train, ytrain), test, ytest, test, ytest);
  for (double c : {0.5, 2.0}) {
    const Matrix<double> xs = c * train;
    const Matrix<double> ts = c * test;
    const auto rep = evaluate(fit_ridge(xs, ytrain), ts, ytest, ts, ytest);
    CHECK(std::abs(rep.within.value - base.within.value) <= 0.005);
  }
}

TEST_CASE("oracle and random predictors") {
  std::vector<int> truth;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20000; ++i) truth.push_back(static_cast<int>(rng() % 20));
  const auto perfect = accuracy_of(truth, truth);
  CHECK(perfect.value == 1.0);
  CHECK(perfect.ci.high == 1.0);

  std::vector<int> guess;
  for (int i = 0; i < 20000; ++i) guess.push_back(static_cast<int>(rng() % 20));
  CHECK(std::abs(accuracy_of(guess, truth).value - 0.05) < 0.01);
}

TEST_CASE("evaluate splits deep roles and per-role rows") {
  // Features = one-hot of the label: a perfect probe.
  std::vector<int> y;
  for (int i = 0; i < 400; ++i) y.push_back(i % grammar::kNumRoles);
  Matrix<double> x = Matrix<double>::Zero(400, grammar::kNumRoles);
  for (int i = 0; i < 400; ++i) x(i, y[static_cast<std::size_t>(i)]) = 1.0;
  const auto p = fit_ridge(x, y, grammar::kNumRoles, 1e-6);
  const auto rep = evaluate(p, x, y, x, y);
  CHECK(rep.within.value == 1.0);
  CHECK(rep.transfer.value == 1.0);
  CHECK(rep.deep.total == 400 / grammar::kNumRoles * 5);
  for (const auto& r : rep.within_roles) {
    CHECK(r.support == 20);
    CHECK(r.ci.high == 1.0);
  }
}

TEST_CASE("random projection") {
  const Matrix<float> f = Matrix<float>::Random(10, 6);
  CHECK(project(f, Matrix<float>::Identity(6, 6)) == f);
  CHECK(projection_matrix(6, 3, 9) == projection_matrix(6, 3, 9));
  CHECK(projection_matrix(6, 3, 9) != projection_matrix(6, 3, 10));

  // Squared row norms are preserved in expectation.
  std::mt19937_64 rng(6);
  std::normal_distribution<float> g(0.0f, 1.0f);
  const Matrix<float> rows = Matrix<float>::NullaryExpr(1000, 2048, [&] { return g(rng); });
  const Matrix<float> out = random_projection(rows, 1024, 7);
  const double ratio = out.rowwise().squaredNorm().cast<double>().sum() / rows.rowwise().squaredNorm().cast<double>().sum();
  CHECK(std::abs(ratio - 1.0) < 0.05);
  CHECK(out.cols() == 1024);
}

TEST_CASE("probes over matched dimensions have equal parameter counts") {
  const auto a = blobs(100, 16, 4, 1.0, 8);
  const auto b = blobs(100, 64, 4, 1.0, 9);
  const Matrix<float> bp = random_projection(b.x.cast<float>(), 16, 1);
  CHECK(fit_ridge(a.x, a.y, 4).parameter_count() == fit_ridge(bp, b.y, 4).parameter_count());
}
