#pragma once

#include <span>
#include <vector>

namespace ptsr::specfn {

// Scalar special functions on x > 0. Implemented with upward recurrence to
// shift the argument above 10, followed by the asymptotic (Stirling-type)
// series; accurate to ~1e-14 absolute over [1e-3, 1e6]. Non-positive or
// non-finite arguments raise a numeric domain error.
double lgamma(double x);    // ln Gamma(x)
double digamma(double x);   // psi(x) = d/dx ln Gamma(x)
double trigamma(double x);  // psi_1(x) = d/dx psi(x)

// Overflow-safe nonlinearities, total on finite inputs.
double softplus(double x);     // ln(1 + e^x)
double sigmoid(double x);
double log_sigmoid(double x);  // ln sigmoid(x); ~x for very negative x

// Max-shifted softmax. Input must be non-empty with finite entries.
void softmax_inplace(std::span<double> v);
std::vector<double> softmax(std::span<const double> v);

}  // namespace ptsr::specfn
