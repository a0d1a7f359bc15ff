#pragma once

#include "terom/sampling.hpp"
#include "terom/types.hpp"

#include <vector>

namespace terom::growth {

/// Uniform G x G node grid on [0, L]^2 with (G-1)^2 quad elements.
/// Displacement fields are stacked component blocks [u_x; u_y; u_z], each of
/// length G^2, node index n = j*G + i at (x, y) = (i, j) * dx.
struct GridGeometry {
    double side_length = 300.0;     // mm
    Index nodes_per_side = 31;      // G
    double thickness = 3.0;         // mm
    double expander_diameter = 130.0; // mm

    Index node_count() const { return nodes_per_side * nodes_per_side; }
    Index dof_count() const { return 3 * node_count(); }
    Index elements_per_side() const { return nodes_per_side - 1; }
    Index element_count() const { return elements_per_side() * elements_per_side(); }
    double dx() const { return side_length / static_cast<double>(nodes_per_side - 1); }
    double element_area() const { return dx() * dx(); }

    double node_x(Index n) const { return static_cast<double>(n % nodes_per_side) * dx(); }
    double node_y(Index n) const { return static_cast<double>(n / nodes_per_side) * dx(); }

    /// Counter-clockwise corner nodes of element e.
    std::array<Index, 4> element_nodes(Index e) const {
        const Index es = elements_per_side();
        const Index ei = e % es;
        const Index ej = e / es;
        const Index n0 = ej * nodes_per_side + ei;
        return {n0, n0 + 1, n0 + nodes_per_side + 1, n0 + nodes_per_side};
    }

    /// Distance of node n from the patch center, reference configuration.
    double node_radius(Index n) const {
        const double c = side_length / 2.0;
        const double dxr = node_x(n) - c;
        const double dyr = node_y(n) - c;
        return std::sqrt(dxr * dxr + dyr * dyr);
    }
};

GridGeometry make_grid(Index nodes_per_side = 31, double side_length = 300.0,
                       double thickness = 3.0, double expander_diameter = 130.0);

/// Per-element principal growth stretches along the two fiber axes.
struct GrowthState {
    Vector lambda1_g;
    Vector lambda2_g;

    static GrowthState unit(Index n_elements) {
        return {Vector::Ones(n_elements), Vector::Ones(n_elements)};
    }
};

/// Per-element total stretches along the coordinate axes.
struct StretchField {
    Vector lambda1;
    Vector lambda2;
};

/// Midsurface tangent columns c_i = F_s e_i of one element, evaluated at the
/// element centroid from bilinear shape-function derivatives.
struct ElementTangents {
    Eigen::Vector3d c1, c2;
};

ElementTangents element_tangents(const GridGeometry& geometry,
                                 const Vector& displacement, Index element);

/// Total axis stretches lambda_i = |F_s e_i| per element. Throws NumericError
/// naming the element when its in-plane map is degenerate or inverted.
StretchField compute_stretches(const GridGeometry& geometry, const Vector& displacement);

/// lambda_i^e = lambda_i / lambda_i^g, elementwise.
StretchField elastic_stretch(const StretchField& total, const GrowthState& growth);

/// Forward-Euler update of the growth ODEs
/// d(lambda_i^g)/dt = kg_i * (lambda_i^e - lambda_crit), no rate clamping.
GrowthState growth_step(const GrowthState& growth, const StretchField& elastic,
                        const sampling::SimulationParams& params, double dt);

/// Explicit-Euler sub-step size used to integrate the growth ODEs across one
/// snapshot window. The single 1.4-day step is outside the stability region
/// of the growth rate law for the upper end of the kg bounds, so the window
/// is resolved at 0.1 days with the total stretches held fixed.
constexpr double kGrowthSubstepDays = 0.1;

Index growth_substep_count(double window_days);

/// Integrate the growth state across a snapshot window at fixed total
/// stretches (elastic stretches are re-derived each sub-step).
GrowthState advance_growth(const GrowthState& growth, const StretchField& total,
                           const sampling::SimulationParams& params, double window_days);

/// Net integrated area gain sum_e (l1g * l2g - 1) * A_e, in cm^2.
double area_gain(const GridGeometry& geometry, const GrowthState& growth);

} // namespace terom::growth
