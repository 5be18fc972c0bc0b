#include "ptsr/specfn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ptsr/errors.hpp"

namespace ptsr::specfn {
namespace {

constexpr double kAsymptoticCut = 10.0;
constexpr double kHalfLogTwoPi = 0.91893853320467274178;  // ln(2*pi)/2

void require_positive(double x, const char* fn) {
  if (!std::isfinite(x) || x <= 0.0) {
    throw Error(ErrorKind::Numeric,
                std::string(fn) + ": argument must be finite and > 0");
  }
}

}  // namespace

double lgamma(double x) {
  require_positive(x, "lgamma");
  // ln Gamma(x) = ln Gamma(x + m) - ln prod_{j<m} (x + j)
  double shift = 0.0;
  double y = x;
  if (y < kAsymptoticCut) {
    double prod = 1.0;
    while (y < kAsymptoticCut) {
      prod *= y;
      y += 1.0;
    }
    shift = std::log(prod);
  }
  // Stirling series with Bernoulli terms B_2..B_14; first omitted term
  // at y = 10 is ~3e-17 relative to the leading magnitude.
  const double r = 1.0 / (y * y);
  double series = 1.0 / 156.0;                 // B14 / (14*13)
  series = series * r - 691.0 / 360360.0;      // B12 / (12*11)
  series = series * r + 1.0 / 1188.0;          // B10 / (10*9)
  series = series * r - 1.0 / 1680.0;          // B8  / (8*7)
  series = series * r + 1.0 / 1260.0;          // B6  / (6*5)
  series = series * r - 1.0 / 360.0;           // B4  / (4*3)
  series = series * r + 1.0 / 12.0;            // B2  / (2*1)
  const double core =
      (y - 0.5) * std::log(y) - y + kHalfLogTwoPi + series / y;
  return core - shift;
}

double digamma(double x) {
  require_positive(x, "digamma");
  // psi(x) = psi(x + m) - sum_{j<m} 1/(x + j)
  double shift = 0.0;
  double y = x;
  while (y < kAsymptoticCut) {
    shift += 1.0 / y;
    y += 1.0;
  }
  const double r = 1.0 / (y * y);
  double series = 1.0 / 12.0;                  // B14 / 14
  series = series * r - 691.0 / 32760.0;       // B12 / 12
  series = series * r + 1.0 / 132.0;           // B10 / 10
  series = series * r - 1.0 / 240.0;           // B8  / 8
  series = series * r + 1.0 / 252.0;           // B6  / 6
  series = series * r - 1.0 / 120.0;           // B4  / 4
  series = series * r + 1.0 / 12.0;            // B2  / 2
  return std::log(y) - 0.5 / y - series * r - shift;
}

double trigamma(double x) {
  require_positive(x, "trigamma");
  // psi_1(x) = psi_1(x + m) + sum_{j<m} 1/(x + j)^2
  double shift = 0.0;
  double y = x;
  while (y < kAsymptoticCut) {
    shift += 1.0 / (y * y);
    y += 1.0;
  }
  const double r = 1.0 / (y * y);
  double series = 7.0 / 6.0;                   // B14
  series = series * r - 691.0 / 2730.0;        // B12
  series = series * r + 5.0 / 66.0;            // B10
  series = series * r - 1.0 / 30.0;            // B8
  series = series * r + 1.0 / 42.0;            // B6
  series = series * r - 1.0 / 30.0;            // B4
  series = series * r + 1.0 / 6.0;             // B2
  return 1.0 / y + 0.5 * r + series * r / y + shift;
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return -softplus(-x); }

void softmax_inplace(std::span<double> v) {
  if (v.empty()) {
    throw Error(ErrorKind::Numeric, "softmax: empty input");
  }
  double hi = v[0];
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(ErrorKind::Numeric, "softmax: non-finite input");
    }
    hi = std::max(hi, x);
  }
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - hi);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

}  // namespace ptsr::specfn
