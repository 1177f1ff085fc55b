#include "wmcap/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "wmcap/errors.hpp"

namespace wmcap {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// sorted (delta, value) support of an enveloped curve; duplicate deltas keep
// the enveloped (max-BER) record
std::vector<std::pair<double, double>> delta_support(const CapacityCurve& curve,
                                                     bool use_ber) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(curve.records.size());
  for (const auto& r : curve.records)
    pts.emplace_back(r.delta, use_ber ? r.ber : r.c_hat);
  std::sort(pts.begin(), pts.end());
  std::vector<std::pair<double, double>> dedup;
  for (const auto& p : pts) {
    if (!dedup.empty() && dedup.back().first == p.first)
      dedup.back().second = use_ber ? std::max(dedup.back().second, p.second)
                                    : std::min(dedup.back().second, p.second);
    else
      dedup.push_back(p);
  }
  return dedup;
}

double interp(const std::vector<std::pair<double, double>>& pts, double x) {
  if (pts.empty()) throw std::invalid_argument("interp: empty support");
  if (x <= pts.front().first) return pts.front().second;
  if (x >= pts.back().first) return pts.back().second;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (x <= pts[i].first) {
      const auto& [x0, y0] = pts[i - 1];
      const auto& [x1, y1] = pts[i];
      const double t = (x - x0) / (x1 - x0);
      return y0 + t * (y1 - y0);
    }
  }
  return pts.back().second;
}

}  // namespace

CapacityCurve estimate_capacity(const Model& watermarked,
                                const OwnershipKey& key,
                                const IdentityMessage& m, AttackRunner& attack,
                                const Dataset& test_set,
                                const EstimateOptions& opts) {
  if (static_cast<int>(m.length()) != message_length(key))
    throw std::invalid_argument("estimate_capacity: message length mismatch");
  if (opts.round_cap < 0)
    throw std::invalid_argument("estimate_capacity: negative round cap");

  const int length = message_length(key);
  CapacityCurve curve;
  curve.length = length;
  curve.scheme = kind_of(key);
  curve.attack = attack.kind();

  const double base_acc = accuracy(watermarked, test_set);
  Model attacked = watermarked;
  double eps = ber(m, verify(attacked, key));
  curve.records.push_back(make_capacity_point(0.0, eps, length));

  int rounds = 0;
  while (eps < 0.5 && rounds < opts.round_cap) {
    attacked = attack.step(attacked);
    ++rounds;
    const double delta = std::max(0.0, base_acc - accuracy(attacked, test_set));
    eps = ber(m, verify(attacked, key));
    curve.records.push_back(make_capacity_point(delta, eps, length));
  }
  curve.truncated = eps < 0.5;
  return curve;
}

CapacityCurve monotone_envelope(const CapacityCurve& curve) {
  CapacityCurve out = curve;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    double worst = 0.0;
    for (const auto& r : curve.records)
      if (r.delta <= out.records[i].delta) worst = std::max(worst, r.ber);
    out.records[i] = make_capacity_point(out.records[i].delta, worst, out.length);
  }
  return out;
}

double curve_c_hat_at(const CapacityCurve& curve, double delta) {
  return interp(delta_support(curve, false), delta);
}

double curve_ber_at(const CapacityCurve& curve, double delta) {
  return interp(delta_support(curve, true), delta);
}

double min_delta_for_capacity(const CapacityCurve& curve, double identity_bits) {
  if (curve.records.empty())
    throw std::invalid_argument("min_delta_for_capacity: empty curve");
  if (identity_bits < 0 || identity_bits > curve.length)
    throw std::invalid_argument("min_delta_for_capacity: need 0 <= J <= L");

  const auto pts = delta_support(curve, false);
  if (pts.front().second <= identity_bits) return pts.front().first;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].second <= identity_bits) {
      const auto& [d0, c0] = pts[i - 1];
      const auto& [d1, c1] = pts[i];
      if (c0 == c1) return d1;
      return d0 + (c0 - identity_bits) * (d1 - d0) / (c0 - c1);
    }
  }
  return std::numeric_limits<double>::infinity();
}

FidelityCurve make_fidelity_curve(std::vector<std::pair<double, double>> points) {
  if (points.empty()) throw std::invalid_argument("fidelity curve: no points");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!std::isfinite(points[i].second))
      throw std::invalid_argument("fidelity curve: non-finite value");
    if (i > 0 && points[i].first <= points[i - 1].first)
      throw std::invalid_argument("fidelity curve: lengths must strictly increase");
  }
  return FidelityCurve{std::move(points)};
}

MinLengthResult min_message_length(
    const FidelityCurve& fidelity,
    const std::vector<std::pair<double, double>>& min_delta_grid,
    double identity_bits, double degradation_budget, double granularity) {
  if (fidelity.points.empty() || min_delta_grid.empty())
    throw std::invalid_argument("min_message_length: empty inputs");
  if (granularity <= 0)
    throw std::invalid_argument("min_message_length: bad granularity");
  if (degradation_budget < 0)
    throw std::invalid_argument("min_message_length: negative budget");

  auto grid = min_delta_grid;
  std::sort(grid.begin(), grid.end());
  const double lo = std::max(fidelity.points.front().first, grid.front().first);
  const double hi = std::min(fidelity.points.back().first, grid.back().first);
  if (identity_bits < lo || identity_bits > hi)
    throw std::invalid_argument("min_message_length: grids must cover [J, L_max]");

  // A bracketing segment with an infinite endpoint means the attack never
  // pushed the capacity down to J; such lengths trivially qualify.
  auto delta_at = [&grid](double length) {
    if (length <= grid.front().first) return grid.front().second;
    for (std::size_t i = 1; i < grid.size(); ++i) {
      if (length <= grid[i].first) {
        const auto& [l0, d0] = grid[i - 1];
        const auto& [l1, d1] = grid[i];
        if (std::isinf(d0) || std::isinf(d1))
          return std::numeric_limits<double>::infinity();
        return d0 + (length - l0) * (d1 - d0) / (l1 - l0);
      }
    }
    return grid.back().second;
  };

  std::vector<std::pair<double, double>> fid = fidelity.points;
  for (double length = identity_bits; length - granularity < hi;
       length += granularity) {
    const double l = std::min(length, hi);
    const double total = interp(fid, l) + delta_at(l);
    if (total >= degradation_budget) return {l, interp(fid, l)};
  }
  throw InfeasibleError("min_message_length: no admissible length up to " + fmt(hi));
}

MinLengthResult min_message_length(const FidelityCurve& fidelity,
                                   const std::vector<CapacityCurve>& curves,
                                   double identity_bits,
                                   double degradation_budget,
                                   double granularity) {
  std::vector<std::pair<double, double>> grid;
  grid.reserve(curves.size());
  for (const auto& c : curves) {
    const auto env = monotone_envelope(c);
    grid.emplace_back(static_cast<double>(c.length),
                      min_delta_for_capacity(env, identity_bits));
  }
  return min_message_length(fidelity, grid, identity_bits, degradation_budget,
                            granularity);
}

AggregatedCurve aggregate_curves(const std::vector<CapacityCurve>& per_seed,
                                 int grid_points) {
  if (per_seed.empty()) throw std::invalid_argument("aggregate_curves: no curves");
  if (grid_points < 2) throw std::invalid_argument("aggregate_curves: bad grid");

  AggregatedCurve agg;
  agg.length = per_seed.front().length;
  agg.attack = per_seed.front().attack;
  double max_delta = std::numeric_limits<double>::infinity();
  for (const auto& c : per_seed) {
    if (c.length != agg.length || c.attack != agg.attack)
      throw std::invalid_argument("aggregate_curves: mixed cells");
    double local = 0.0;
    for (const auto& r : c.records) local = std::max(local, r.delta);
    max_delta = std::min(max_delta, local);
    for (auto s : c.seeds) agg.seeds.push_back(s);
  }

  std::vector<CapacityCurve> envs;
  envs.reserve(per_seed.size());
  for (const auto& c : per_seed) envs.push_back(monotone_envelope(c));

  for (int g = 0; g < grid_points; ++g) {
    const double d = max_delta * static_cast<double>(g) / (grid_points - 1);
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& c : envs) {
      const double v = curve_c_hat_at(c, d);
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    agg.delta_grid.push_back(d);
    agg.mean_c_hat.push_back(sum / static_cast<double>(envs.size()));
    agg.lo_c_hat.push_back(lo);
    agg.hi_c_hat.push_back(hi);
  }
  return agg;
}

std::string curve_csv_string(const CapacityCurve& curve,
                             const std::vector<std::string>& provenance) {
  std::string out = "# wmcap-v1\n";
  for (const auto& p : provenance) out += "# " + p + "\n";
  out += "round,delta,ber,c_hat\n";
  for (std::size_t i = 0; i < curve.records.size(); ++i) {
    const auto& r = curve.records[i];
    out += std::to_string(i) + "," + fmt(r.delta) + "," + fmt(r.ber) + "," +
           fmt(r.c_hat) + "\n";
  }
  return out;
}

void save_curve_csv(const CapacityCurve& curve, const std::filesystem::path& path,
                    const std::vector<std::string>& provenance) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << curve_csv_string(curve, provenance);
}

}  // namespace wmcap
