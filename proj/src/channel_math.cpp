#include "wmcap/channel_math.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "wmcap/errors.hpp"

namespace wmcap {

double binary_entropy(double x) {
  if (!(x >= 0.0 && x <= 1.0))
    throw std::invalid_argument("binary_entropy: argument must be in [0,1]");
  double h = 0.0;
  if (x > 0.0) h -= x * std::log2(x);
  if (x < 1.0) h -= (1.0 - x) * std::log2(1.0 - x);
  return h;
}

double ber(const IdentityMessage& m, const IdentityMessage& m_hat) {
  if (m.length() != m_hat.length())
    throw std::invalid_argument("ber: message lengths differ");
  if (m.length() == 0) throw std::invalid_argument("ber: empty messages");
  std::size_t flips = 0;
  for (std::size_t i = 0; i < m.length(); ++i)
    if (m.bits[i] != m_hat.bits[i]) ++flips;
  return std::min(0.5, static_cast<double>(flips) / static_cast<double>(m.length()));
}

double capacity_bound(double length, double eps) {
  if (length < 0) throw std::invalid_argument("capacity_bound: negative length");
  if (!(eps >= 0.0 && eps <= 0.5))
    throw std::invalid_argument("capacity_bound: eps must be in [0, 0.5]");
  return length * (1.0 - binary_entropy(eps));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double certified_ber_bound(std::vector<double> ber_samples, double rho,
                           double sigma) {
  if (sigma <= 0) throw std::invalid_argument("certified_ber_bound: sigma must be > 0");
  if (rho < 0) throw std::invalid_argument("certified_ber_bound: rho must be >= 0");
  if (ber_samples.empty())
    throw std::invalid_argument("certified_ber_bound: no samples");

  const double tail = normal_cdf(-rho / sigma);
  const std::size_t n = ber_samples.size();
  // Largest exceedance count still within the tail mass; the infimum of
  // admissible thresholds is then the (n - c)-th order statistic.
  const auto c = static_cast<std::size_t>(tail * static_cast<double>(n));
  std::sort(ber_samples.begin(), ber_samples.end());
  const std::size_t idx = n - std::min(c, n - 1) - 1;
  return std::clamp(ber_samples[idx], 0.0, 0.5);
}

namespace {

void validate_dims(const ClassifierSpec& s) {
  if (s.classes < 2) throw std::invalid_argument("spec: classes must be >= 2");
  if (s.train_size < 1) throw std::invalid_argument("spec: train_size must be >= 1");
  if (s.identity_bits < 1) throw std::invalid_argument("spec: identity_bits must be >= 1");
}

void validate(const ClassifierSpec& s) {
  validate_dims(s);
  if (!(s.max_degradation > 0 && s.max_degradation < 1))
    throw std::invalid_argument("spec: max_degradation must be in (0,1)");
}

double residual(const ClassifierSpec& s, double length) {
  return closed_form_fidelity(length, s) +
         closed_form_delta(s.identity_bits, length, s.classes) -
         s.max_degradation;
}

}  // namespace

double avg_lost_bits(int classes) {
  if (classes < 2) throw std::invalid_argument("avg_lost_bits: classes must be >= 2");
  if ((classes & (classes - 1)) != 0)
    throw std::invalid_argument("avg_lost_bits: classes must be a power of two");
  const double b = static_cast<double>(classes);
  return b / (b - 1.0) * std::log2(b) / 2.0;
}

double closed_form_fidelity(double length, const ClassifierSpec& spec) {
  validate_dims(spec);
  if (length < 0) throw std::invalid_argument("closed_form_fidelity: negative length");
  return length / (spec.train_size * std::log2(static_cast<double>(spec.classes)));
}

double closed_form_delta(double identity_bits, double length, int classes) {
  if (classes < 2) throw std::invalid_argument("closed_form_delta: classes must be >= 2");
  if (identity_bits < 1 || length < identity_bits)
    throw std::invalid_argument("closed_form_delta: need L >= J >= 1");
  const double b = static_cast<double>(classes);
  return (b - 1.0) / b * (1.0 - std::sqrt(identity_bits / length));
}

double solve_min_length_numeric(const ClassifierSpec& spec) {
  validate(spec);
  const double j = spec.identity_bits;
  if (residual(spec, j) >= 0) return j;  // already dominated by the fidelity term

  // residual is strictly increasing in L and F alone reaches Delta at
  // Delta * D * log2(B), so the root is bracketed.
  double lo = j;
  double hi = j + spec.max_degradation * spec.train_size *
                      std::log2(static_cast<double>(spec.classes));
  if (residual(spec, hi) < 0)
    throw InfeasibleError("solve_min_length_numeric: no root above J");
  double mid = lo;
  for (int it = 0; it < 200; ++it) {
    mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;  // bracket collapsed to adjacent doubles
    (residual(spec, mid) > 0 ? hi : lo) = mid;
  }
  return mid;
}

double closed_form_min_length(const ClassifierSpec& spec) {
  validate(spec);
  const double j = spec.identity_bits;
  if (residual(spec, j) >= 0) return j;

  const double b = static_cast<double>(spec.classes);
  const double a = spec.train_size * std::log2(b);
  const double k = (b - 1.0) / b;
  // substituting x = sqrt(L) turns the defining equation into
  // x^3 + p*x + q = 0
  const double p = a * (k - spec.max_degradation);
  const double q = -k * a * std::sqrt(j);
  const double disc = 0.25 * q * q + p * p * p / 27.0;
  if (disc < 0) return solve_min_length_numeric(spec);  // three real roots

  const double root = std::sqrt(disc);
  const double x = std::cbrt(-0.5 * q + root) + std::cbrt(-0.5 * q - root);
  if (!(x > 0) || !std::isfinite(x))
    throw InfeasibleError("closed_form_min_length: no real root above J");
  return std::max(x * x, j);
}

CapacityPoint make_capacity_point(double delta, double eps, double length) {
  if (delta < 0) throw std::invalid_argument("capacity point: delta must be >= 0");
  if (!(eps >= 0.0 && eps <= 0.5))
    throw std::invalid_argument("capacity point: ber must be in [0, 0.5]");
  return CapacityPoint{delta, eps, capacity_bound(length, eps)};
}

}  // namespace wmcap
