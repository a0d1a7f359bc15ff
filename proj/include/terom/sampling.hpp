#pragma once

#include "terom/types.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace terom::sampling {

/// One draw from the experiment design. Bounds follow the sampling table:
/// tol [15,30] mm, lambda_crit [1.0,1.2], v_final [100,700] mL,
/// mu [0.05,0.25] MPa, kg1 [0.96,2.4] 1/day, kg2 [0.24,1.2] 1/day,
/// kappa [0,1/3], k1 [1,10] MPa.
struct SimulationParams {
    double tol = 22.5;         // boundary radius margin, mm
    double lambda_crit = 1.1;  // critical elastic stretch
    double v_final = 400.0;    // final expander volume, mL
    double mu = 0.15;          // shear modulus, MPa
    double kg1 = 1.68;         // growth rate constant, fiber 1, 1/day
    double kg2 = 0.72;         // growth rate constant, fiber 2, 1/day
    double kappa = 1.0 / 6.0;  // fiber dispersion
    double k1 = 5.5;           // fiber stiffness, MPa

    std::array<double, 8> as_array() const {
        return {tol, lambda_crit, v_final, mu, kg1, kg2, kappa, k1};
    }
    static SimulationParams from_array(const std::array<double, 8>& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]};
    }
};

struct ParamBounds {
    double lo, hi;
};

/// Bound table in CSV column order: tol, lambda_crit, v_final, mu, kg1, kg2, kappa, k1.
const std::array<ParamBounds, 8>& param_bounds();
const std::array<std::string, 8>& param_names();

bool within_bounds(const SimulationParams& p);

/// Staged inflation profile sampled on the snapshot grid t_k = k * 1.4 days.
/// All schedules share one 100 mL staircase (a step every 14 days) and cap it
/// at the rounded final volume, so profiles coincide until they fan out.
struct VolumeSchedule {
    std::vector<double> times;     // days, multiples of 1.4
    std::vector<double> setpoints; // mL
    Index n_steps = 0;             // == times.size()

    double duration_days() const { return times.empty() ? 0.0 : times.back(); }
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    Index n_requested = 0;
    Index n_converged = 0;
    std::vector<Index> train_ids;
    std::vector<Index> val_ids;
    double dt = kSnapshotDtDays;
};

/// Latin hypercube design over the bound table. Each of the n equal bins of
/// every parameter range receives exactly one sample. Deterministic in seed.
std::vector<SimulationParams> lhs_sample(Index n, std::uint64_t seed);

/// Number of 100 mL stages after rounding v_final up to the nearest 100.
Index stage_count(double v_final);

VolumeSchedule build_volume_schedule(const SimulationParams& params);

DatasetManifest split_dataset(const std::vector<Index>& ids, double val_fraction,
                              std::uint64_t seed);

/// Parameter table as CSV with one header row, columns in bound-table order.
std::string params_to_csv(const std::vector<SimulationParams>& params);
std::vector<SimulationParams> params_from_csv(const std::string& csv);

} // namespace terom::sampling
