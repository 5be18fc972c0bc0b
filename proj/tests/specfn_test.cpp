#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "oracles.hpp"
#include "ptsr/errors.hpp"
#include "ptsr/rng.hpp"
#include "ptsr/specfn.hpp"

using namespace ptsr;

namespace {
double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}
}  // namespace

TEST_CASE("lgamma anchors") {
  CHECK(std::abs(specfn::lgamma(1.0)) < 1e-13);
  CHECK(std::abs(specfn::lgamma(2.0)) < 1e-13);
  // Gamma(1/2) = sqrt(pi)
  CHECK(specfn::lgamma(0.5) ==
        doctest::Approx(0.5 * std::log(std::numbers::pi)).epsilon(1e-13));
}

TEST_CASE("lgamma recurrence: exp(lgamma(x+1) - lgamma(x)) = x") {
  auto gen = rng::engine(11);
  for (int i = 0; i < 200; ++i) {
    const double x = std::exp(rng::uniform(gen) * std::log(1e6) - 3.0 * std::log(10.0));
    if (x < 1e-3 || x > 1e3) continue;
    const double got = std::exp(specfn::lgamma(x + 1.0) - specfn::lgamma(x));
    CHECK(std::abs(got - x) / x < 1e-9);
  }
}

TEST_CASE("lgamma accuracy across the domain") {
  // relative to max(1, |value|); the series oracle pins digamma, and the
  // recurrence ties lgamma to it, so spot-check wide anchors directly
  for (double x : {1e-3, 0.02, 0.4, 1.5, 3.7, 9.9, 10.1, 157.0, 4096.5, 1e6}) {
    const double got = specfn::lgamma(x);
    const double want = std::lgamma(x);  // libm reference
    CHECK(rel_err(got, want) < 1e-12);
  }
}

TEST_CASE("digamma matches the series oracle") {
  // frozen from digamma_series: psi(1) = -EulerGamma, psi(10)
  CHECK(specfn::digamma(1.0) == doctest::Approx(-0.5772156649015329).epsilon(1e-12));
  CHECK(specfn::digamma(10.0) == doctest::Approx(2.2517525890667211).epsilon(1e-12));
  for (double x : {1e-3, 0.07, 0.5, 1.0, 2.3, 9.7, 10.0, 88.0, 1234.5}) {
    CHECK(std::abs(specfn::digamma(x) - oracles::digamma_series(x)) < 1e-10);
  }
}

TEST_CASE("digamma recurrence psi(x+1) = psi(x) + 1/x") {
  for (double x : {0.3, 1.7, 9.2}) {
    CHECK(std::abs(specfn::digamma(x + 1.0) - specfn::digamma(x) - 1.0 / x) <
          1e-12);
  }
}

TEST_CASE("trigamma matches the series oracle") {
  // psi_1(1) = pi^2/6; psi_1(5) frozen from trigamma_series
  CHECK(specfn::trigamma(1.0) ==
        doctest::Approx(std::numbers::pi * std::numbers::pi / 6.0).epsilon(1e-12));
  CHECK(specfn::trigamma(5.0) == doctest::Approx(0.2213229557371152).epsilon(1e-12));
  for (double x : {1e-3, 0.11, 0.5, 3.0, 9.99, 10.01, 250.0}) {
    CHECK(std::abs(specfn::trigamma(x) - oracles::trigamma_series(x)) < 1e-9);
  }
}

TEST_CASE("trigamma recurrence psi1(x+1) = psi1(x) - 1/x^2") {
  for (double x : {0.5, 3.0}) {
    CHECK(std::abs(specfn::trigamma(x + 1.0) - specfn::trigamma(x) +
                   1.0 / (x * x)) < 1e-12);
  }
}

TEST_CASE("psi functions are derivatives of each other") {
  auto gen = rng::engine(5);
  for (int i = 0; i < 50; ++i) {
    const double x = 0.1 + rng::uniform(gen) * 99.9;
    const double h = 1e-5;
    const double d_lgamma =
        (specfn::lgamma(x + h) - specfn::lgamma(x - h)) / (2.0 * h);
    CHECK(std::abs(d_lgamma - specfn::digamma(x)) < 1e-6);
    const double d_digamma =
        (specfn::digamma(x + h) - specfn::digamma(x - h)) / (2.0 * h);
    CHECK(std::abs(d_digamma - specfn::trigamma(x)) < 1e-6);
  }
}

TEST_CASE("psi functions reject bad input") {
  CHECK_THROWS_AS(specfn::lgamma(0.0), Error);
  CHECK_THROWS_AS(specfn::lgamma(-1.0), Error);
  CHECK_THROWS_AS(specfn::digamma(std::nan("")), Error);
  CHECK_THROWS_AS(specfn::trigamma(-0.5), Error);
  CHECK_THROWS_AS(specfn::lgamma(std::numeric_limits<double>::infinity()), Error);
}

TEST_CASE("softmax basics") {
  const std::vector<double> equal = {2.5, 2.5, 2.5};
  const auto u = specfn::softmax(equal);
  for (double v : u) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  // direct evaluation oracle on the (-0.1, -4.9) pair
  const std::vector<double> pair = {-0.1, -4.9};
  const auto w = specfn::softmax(pair);
  const double expect0 = 1.0 / (1.0 + std::exp(-4.8));
  CHECK(w[0] == doctest::Approx(expect0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(1.0 - expect0).epsilon(1e-12));
  CHECK(w[0] == doctest::Approx(0.99184).epsilon(1e-4));
  CHECK(w[1] == doctest::Approx(0.00816).epsilon(2e-3));
}

TEST_CASE("softmax shift invariance") {
  auto gen = rng::engine(17);
  std::vector<double> v(9);
  for (double& x : v) x = rng::normal(gen) * 3.0;
  const auto base = specfn::softmax(v);
  std::vector<double> shifted = v;
  for (double& x : shifted) x += 123.456;
  const auto moved = specfn::softmax(shifted);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(std::abs(base[i] - moved[i]) < 1e-12);
  }
}

TEST_CASE("softmax is a probability vector for long inputs") {
  auto gen = rng::engine(23);
  std::vector<double> v(10000);
  for (double& x : v) x = rng::normal(gen) * 50.0;
  const auto p = specfn::softmax(v);
  double sum = 0.0;
  for (double x : p) {
    CHECK(x >= 0.0);
    sum += x;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax rejects empty and non-finite input") {
  std::vector<double> empty;
  CHECK_THROWS_AS(specfn::softmax(empty), Error);
  std::vector<double> inf = {1.0, std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(specfn::softmax(inf), Error);
}

TEST_CASE("stable nonlinearities") {
  CHECK(specfn::softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(specfn::sigmoid(0.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(specfn::log_sigmoid(-100.0) == doctest::Approx(-100.0).epsilon(1e-12));
  CHECK(std::isfinite(specfn::softplus(700.0)));
  CHECK(specfn::softplus(700.0) == doctest::Approx(700.0));
  // sigma(-x) = 1 - sigma(x)
  auto gen = rng::engine(3);
  for (int i = 0; i < 100; ++i) {
    const double x = rng::normal(gen) * 20.0;
    CHECK(std::abs(specfn::sigmoid(-x) - (1.0 - specfn::sigmoid(x))) < 1e-15);
  }
}
