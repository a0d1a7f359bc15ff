#include "terom/growth.hpp"

#include <cmath>
#include <string>

namespace terom::growth {

GridGeometry make_grid(Index nodes_per_side, double side_length, double thickness,
                       double expander_diameter) {
    if (nodes_per_side < 2) throw ConfigError("make_grid: need at least 2 nodes per side");
    GridGeometry g;
    g.nodes_per_side = nodes_per_side;
    g.side_length = side_length;
    g.thickness = thickness;
    g.expander_diameter = expander_diameter;
    return g;
}

ElementTangents element_tangents(const GridGeometry& geometry, const Vector& displacement,
                                 Index element) {
    const Index n_nodes = geometry.node_count();
    const auto nodes = geometry.element_nodes(element);
    // Centroid shape-function gradients for corners (0,0),(1,0),(1,1),(0,1).
    static constexpr double dN_dx[4] = {-1.0, 1.0, 1.0, -1.0};
    static constexpr double dN_dy[4] = {-1.0, -1.0, 1.0, 1.0};

    ElementTangents t{Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()};
    for (int a = 0; a < 4; ++a) {
        const Index n = nodes[static_cast<std::size_t>(a)];
        const Eigen::Vector3d pos(geometry.node_x(n) + displacement[n],
                                  geometry.node_y(n) + displacement[n_nodes + n],
                                  displacement[2 * n_nodes + n]);
        t.c1 += pos * dN_dx[a];
        t.c2 += pos * dN_dy[a];
    }
    // Divide once so the reference configuration maps to the exact identity.
    t.c1 /= 2.0 * geometry.dx();
    t.c2 /= 2.0 * geometry.dx();
    return t;
}

StretchField compute_stretches(const GridGeometry& geometry, const Vector& displacement) {
    if (displacement.size() != geometry.dof_count())
        throw std::invalid_argument("compute_stretches: displacement must have 3*G^2 entries");

    const Index n_el = geometry.element_count();
    StretchField f{Vector(n_el), Vector(n_el)};
    for (Index e = 0; e < n_el; ++e) {
        const ElementTangents t = element_tangents(geometry, displacement, e);
        const double l1 = t.c1.norm();
        const double l2 = t.c2.norm();
        // Degenerate = a collapsed axis or a collapsed surface area (the
        // tangent pair folding onto one line inverts the element map).
        const double area = t.c1.cross(t.c2).norm();
        if (!(l1 > 1e-10) || !(l2 > 1e-10) || !(area > 1e-10))
            throw NumericError("compute_stretches: degenerate element " + std::to_string(e));
        f.lambda1[e] = l1;
        f.lambda2[e] = l2;
    }
    return f;
}

StretchField elastic_stretch(const StretchField& total, const GrowthState& growth) {
    if (total.lambda1.size() != growth.lambda1_g.size() ||
        total.lambda2.size() != growth.lambda2_g.size())
        throw std::invalid_argument("elastic_stretch: element count mismatch");
    if ((growth.lambda1_g.array() <= 0.0).any() || (growth.lambda2_g.array() <= 0.0).any())
        throw NumericError("elastic_stretch: non-positive growth stretch");

    return {total.lambda1.cwiseQuotient(growth.lambda1_g),
            total.lambda2.cwiseQuotient(growth.lambda2_g)};
}

GrowthState growth_step(const GrowthState& growth, const StretchField& elastic,
                        const sampling::SimulationParams& params, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("growth_step: dt must be positive");
    if (growth.lambda1_g.size() != elastic.lambda1.size())
        throw std::invalid_argument("growth_step: element count mismatch");

    GrowthState next;
    next.lambda1_g =
        growth.lambda1_g.array() + params.kg1 * (elastic.lambda1.array() - params.lambda_crit) * dt;
    next.lambda2_g =
        growth.lambda2_g.array() + params.kg2 * (elastic.lambda2.array() - params.lambda_crit) * dt;
    if ((next.lambda1_g.array() <= 0.0).any() || (next.lambda2_g.array() <= 0.0).any())
        throw NumericError("growth_step: growth stretch collapsed to <= 0 (dt too large)");
    return next;
}

Index growth_substep_count(double window_days) {
    return std::max<Index>(1, static_cast<Index>(std::ceil(window_days / kGrowthSubstepDays - 1e-9)));
}

GrowthState advance_growth(const GrowthState& growth, const StretchField& total,
                           const sampling::SimulationParams& params, double window_days) {
    const Index n = growth_substep_count(window_days);
    const double h = window_days / static_cast<double>(n);
    GrowthState state = growth;
    for (Index j = 0; j < n; ++j) {
        const StretchField elastic = elastic_stretch(total, state);
        state = growth_step(state, elastic, params, h);
    }
    return state;
}

double area_gain(const GridGeometry& geometry, const GrowthState& growth) {
    const double a_mm2 =
        ((growth.lambda1_g.array() * growth.lambda2_g.array() - 1.0) * geometry.element_area())
            .sum();
    return a_mm2 / 100.0; // mm^2 -> cm^2
}

} // namespace terom::growth
