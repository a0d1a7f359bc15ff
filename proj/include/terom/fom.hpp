#pragma once

#include "terom/growth.hpp"
#include "terom/sampling.hpp"
#include "terom/types.hpp"

#include <filesystem>
#include <vector>

namespace terom::fom {

/// Equilibrium iteration budget exhausted.
struct ConvergenceError : NumericError {
    explicit ConvergenceError(const std::string& msg) : NumericError(msg) {}
};

/// Gasser-Ogden-Holzapfel constants for the plane-stress membrane adaptation.
/// k2 and nu are fixed; the bulk-like modulus follows from mu and nu.
struct MaterialParams {
    double mu = 0.15;   // MPa
    double k1 = 5.5;    // MPa
    double k2 = 2.88;
    double kappa = 1.0 / 6.0;
    double nu = 0.45;
    double bulk_like = 0.0; // K, MPa

    static MaterialParams from_simulation(const sampling::SimulationParams& p);
};

/// PI volume controller. Gains are fixed at 1; `scale` converts the mL-unit
/// control effort into MPa.
struct ControllerState {
    double kp = 1.0;
    double ki = 1.0;
    double integral = 0.0;   // mL * day
    double last_error = 0.0; // mL
};

constexpr double kPressureScale = 5e-4; // MPa per mL of control effort

struct ControllerOutput {
    double pressure = 0.0; // MPa
    ControllerState state;
};

ControllerOutput controller_step(const ControllerState& state, double setpoint_ml,
                                 double achieved_ml, double dt_days);

/// One full-order trajectory, snapshots every 1.4 days.
struct SimulationRecord {
    sampling::SimulationParams params;
    std::vector<double> times;   // days
    std::vector<double> volumes; // mL
    Matrix displacements;        // T x 3G^2
    Matrix growth1;              // T x E
    Matrix growth2;              // T x E
    bool converged = true;

    Index n_steps() const { return static_cast<Index>(times.size()); }
};

struct EnergyResult {
    double energy = 0.0; // mJ
    Vector gradient;     // d energy / d displacement
};

/// Strain energy of the grown membrane plus exact analytic gradient with
/// respect to nodal displacements. Throws NumericError when the energy is
/// not finite (solver-state error).
EnergyResult membrane_energy(const growth::GridGeometry& geometry, const Vector& displacement,
                             const growth::GrowthState& growth_state,
                             const MaterialParams& material);

/// Elements whose centroid lies inside the expander footprint (radius D/2).
std::vector<Index> footprint_elements(const growth::GridGeometry& geometry);

/// Displaced volume under the expander footprint, mm^3: per-element triangle
/// quadrature of the deformed surface, so the conjugate pressure load follows
/// the surface (in-plane force components appear at finite deflection).
double cavity_volume_mm3(const growth::GridGeometry& geometry, const Vector& displacement,
                         const std::vector<Index>& footprint);

inline double mm3_to_ml(double v) { return v / 1000.0; }

/// Per-node pin mask: true fixes all three dofs of the node at zero.
std::vector<char> make_fixed_mask(const growth::GridGeometry& geometry, double tol_mm);

struct SolveOptions {
    Index max_iterations = 5000;
    double grad_tol_per_dof = 1e-6;
};

/// Quasi-static equilibrium: minimizes membrane energy minus pressure times
/// cavity volume over the free dofs (damped Newton with an exact sparse
/// Hessian and backtracking line search).
Vector equilibrium_solve(const growth::GridGeometry& geometry,
                         const growth::GrowthState& growth_state,
                         const MaterialParams& material, double pressure_mpa,
                         const std::vector<char>& fixed_mask, const Vector& warm_start,
                         const SolveOptions& options = {});

/// Full staged-inflation run: PI control, equilibrium solve, snapshot, growth
/// update per step. A convergence failure truncates the record and clears the
/// converged flag.
SimulationRecord simulate(const sampling::SimulationParams& params,
                          const growth::GridGeometry& geometry,
                          const sampling::VolumeSchedule& schedule,
                          const SolveOptions& options = {});

void save_record(const std::filesystem::path& path, const SimulationRecord& record,
                 const growth::GridGeometry& geometry);

struct LoadedRecord {
    SimulationRecord record;
    growth::GridGeometry geometry;
};

LoadedRecord load_record(const std::filesystem::path& path);

} // namespace terom::fom
