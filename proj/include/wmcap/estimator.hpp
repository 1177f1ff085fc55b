#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wmcap/attacks.hpp"
#include "wmcap/channel_math.hpp"
#include "wmcap/watermark.hpp"

namespace wmcap {

struct CapacityCurve {
  int length = 0;  // L
  SchemeKind scheme = SchemeKind::WhiteBox;
  AttackKind attack = AttackKind::FineTune;
  std::vector<CapacityPoint> records;  // ordered by attack round; records[0] has delta 0
  std::vector<std::uint64_t> seeds;
  bool truncated = false;  // round cap hit before the BER clamp bound
};

struct EstimateOptions {
  int round_cap = 200;
};

// Drives the attack round by round, recording <delta, ber, c_hat> until the
// BER clamp binds or the round cap is reached. delta is measured against the
// watermarked model's test accuracy and clamped at zero.
CapacityCurve estimate_capacity(const Model& watermarked,
                                const OwnershipKey& key,
                                const IdentityMessage& m, AttackRunner& attack,
                                const Dataset& test_set,
                                const EstimateOptions& opts = {});

// Running max of BER over all records with smaller-or-equal delta, with c_hat
// recomputed. The result is nonincreasing in delta and idempotent.
CapacityCurve monotone_envelope(const CapacityCurve& curve);

// min{delta : C_hat(delta) <= J} by linear interpolation over an enveloped
// curve; +infinity when the curve never falls to J.
double min_delta_for_capacity(const CapacityCurve& curve, double identity_bits);

// Piecewise-linear interpolants of an enveloped curve.
double curve_c_hat_at(const CapacityCurve& curve, double delta);
double curve_ber_at(const CapacityCurve& curve, double delta);

struct FidelityCurve {
  std::vector<std::pair<double, double>> points;  // (L, F(L)), L strictly increasing
};

FidelityCurve make_fidelity_curve(std::vector<std::pair<double, double>> points);

struct MinLengthResult {
  double length = 0;    // L~
  double fidelity = 0;  // F(L~)
};

// Smallest grid length (default 50-bit granularity, anchored at J) whose
// interpolated F(L) + min_delta(L) reaches Delta. Throws InfeasibleError when
// no length below the measured maximum qualifies.
MinLengthResult min_message_length(
    const FidelityCurve& fidelity,
    const std::vector<std::pair<double, double>>& min_delta_grid,
    double identity_bits, double degradation_budget, double granularity = 50.0);

MinLengthResult min_message_length(const FidelityCurve& fidelity,
                                   const std::vector<CapacityCurve>& curves,
                                   double identity_bits,
                                   double degradation_budget,
                                   double granularity = 50.0);

// Mean curve with a min/max band over per-seed curves, resampled on a common
// delta grid.
struct AggregatedCurve {
  int length = 0;
  AttackKind attack = AttackKind::FineTune;
  std::vector<double> delta_grid;
  std::vector<double> mean_c_hat;
  std::vector<double> lo_c_hat;
  std::vector<double> hi_c_hat;
  std::vector<std::uint64_t> seeds;
};

AggregatedCurve aggregate_curves(const std::vector<CapacityCurve>& per_seed,
                                 int grid_points = 21);

// CSV schema: "# wmcap-v1" comment, optional provenance comments, then
// round,delta,ber,c_hat.
void save_curve_csv(const CapacityCurve& curve, const std::filesystem::path& path,
                    const std::vector<std::string>& provenance = {});
std::string curve_csv_string(const CapacityCurve& curve,
                             const std::vector<std::string>& provenance = {});

}  // namespace wmcap
