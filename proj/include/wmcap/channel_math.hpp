#pragma once

#include <vector>

#include "wmcap/message.hpp"

namespace wmcap {

// H(x) = -x*log2(x) - (1-x)*log2(1-x), with 0*log(0) := 0.
double binary_entropy(double x);

// Bit error rate between two equal-length messages, clamped at 1/2.
double ber(const IdentityMessage& m, const IdentityMessage& m_hat);

// L * (1 - H(eps)): the parallel-BSC capacity bound.
double capacity_bound(double length, double eps);

double normal_cdf(double x);

// Smallest sample value y whose empirical exceedance Pr{eps >= y} is at most
// Phi(-rho/sigma). This is the certified cap on the majority-vote BER when
// verification noise is N(0, sigma^2 I) and attacks are bounded by rho.
double certified_ber_bound(std::vector<double> ber_samples, double rho,
                           double sigma);

struct ClassifierSpec {
  int classes = 2;             // B
  double train_size = 1;       // D
  double identity_bits = 1;    // J
  double max_degradation = 0;  // Delta
};

// Mean Hamming distance from a log2(B)-bit code to a uniformly mistaken one:
// B/(B-1) * log2(B)/2. Requires B to be a power of two.
double avg_lost_bits(int classes);

// F(L) = L / (D * log2 B)
double closed_form_fidelity(double length, const ClassifierSpec& spec);

// min robustness degradation: (B-1)/B * (1 - sqrt(J/L))
double closed_form_delta(double identity_bits, double length, int classes);

// Root of F(L) + delta(J, L) = Delta, L >= J, via the depressed-cubic closed
// form; falls back to the numeric solver when the discriminant is negative.
double closed_form_min_length(const ClassifierSpec& spec);

// Bisection on the same equation, |residual| < 1e-9. Independent cross-check
// for closed_form_min_length.
double solve_min_length_numeric(const ClassifierSpec& spec);

// One measured capacity record. c_hat is always length * (1 - H(ber)).
struct CapacityPoint {
  double delta = 0;
  double ber = 0;
  double c_hat = 0;
};

CapacityPoint make_capacity_point(double delta, double eps, double length);

}  // namespace wmcap
