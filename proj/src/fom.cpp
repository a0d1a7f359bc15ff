#include "terom/fom.hpp"

#include "terom/io.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <limits>

namespace terom::fom {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Plane-stress GOH density in the elastic axis stretches l1, l2 and the
/// elastic area ratio J (the surface Jacobian handles sheared elements; for
/// shear-free states J = l1 l2). Isochoric part uses
/// I1 = l1^2 + l2^2 + J^-2 (incompressible thickness), volumetric part acts
/// on J, tension-only fiber families along the two coordinate axes. First and
/// second partials with respect to (l1, l2, J).
struct Density {
    double psi;
    double d1, d2, dj;
    double d11, d12, d22, d1j, d2j, djj;
};

inline Density goh_density(double l1e, double l2e, double je, const MaterialParams& m) {
    const double inv_j = 1.0 / je;
    const double inv_j2 = inv_j * inv_j;
    const double inv_j3 = inv_j2 * inv_j;
    const double inv_j4 = inv_j2 * inv_j2;
    const double i1 = l1e * l1e + l2e * l2e + inv_j2;

    // I1 partials in (l1, l2, J).
    const double i1_1 = 2.0 * l1e;
    const double i1_2 = 2.0 * l2e;
    const double i1_j = -2.0 * inv_j3;
    const double i1_jj = 6.0 * inv_j4;

    Density out{};
    out.psi = 0.25 * m.bulk_like * (je * je - 1.0 - 2.0 * std::log(je)) +
              0.5 * m.mu * (i1 - 3.0);
    out.dj = 0.5 * m.bulk_like * (je - inv_j) + 0.5 * m.mu * i1_j;
    out.djj = 0.5 * m.bulk_like * (1.0 + inv_j2) + 0.5 * m.mu * i1_jj;
    out.d1 = 0.5 * m.mu * i1_1;
    out.d2 = 0.5 * m.mu * i1_2;
    out.d11 = m.mu;
    out.d22 = m.mu;

    const double fiber_scale = m.k1 / (2.0 * m.k2);
    const double lam2[2] = {l1e * l1e, l2e * l2e};
    for (int i = 0; i < 2; ++i) {
        const double e = m.kappa * (i1 - 3.0) + (1.0 - 3.0 * m.kappa) * (lam2[i] - 1.0);
        if (e <= 0.0) continue;
        const double expo = std::exp(m.k2 * e * e);
        out.psi += fiber_scale * (expo - 1.0);
        const double de = m.k1 * e * expo;
        const double dee = m.k1 * expo * (1.0 + 2.0 * m.k2 * e * e);
        const double e_1 = m.kappa * i1_1 + (i == 0 ? (1.0 - 3.0 * m.kappa) * 2.0 * l1e : 0.0);
        const double e_2 = m.kappa * i1_2 + (i == 1 ? (1.0 - 3.0 * m.kappa) * 2.0 * l2e : 0.0);
        const double e_j = m.kappa * i1_j;
        const double e_11 = 2.0 * m.kappa + (i == 0 ? (1.0 - 3.0 * m.kappa) * 2.0 : 0.0);
        const double e_22 = 2.0 * m.kappa + (i == 1 ? (1.0 - 3.0 * m.kappa) * 2.0 : 0.0);
        const double e_jj = m.kappa * i1_jj;
        out.d1 += de * e_1;
        out.d2 += de * e_2;
        out.dj += de * e_j;
        out.d11 += dee * e_1 * e_1 + de * e_11;
        out.d22 += dee * e_2 * e_2 + de * e_22;
        out.d12 += dee * e_1 * e_2;
        out.d1j += dee * e_1 * e_j;
        out.d2j += dee * e_2 * e_j;
        out.djj += dee * e_j * e_j + de * e_jj;
    }
    return out;
}

/// Shape-function gradient sign patterns at the element centroid,
/// corners ordered (0,0),(1,0),(1,1),(0,1).
constexpr double kDnDx[4] = {-1.0, 1.0, 1.0, -1.0};
constexpr double kDnDy[4] = {-1.0, -1.0, 1.0, 1.0};

/// Hourglass stabilization of the one-point-quadrature quad: the checkerboard
/// corner pattern carries no centroid deformation gradient, so the membrane
/// energy leaves it free. A small quadratic penalty pins it.
constexpr double kHourglassCoeff = 5.0; // times mu * thickness
constexpr double kHourglassSign[4] = {1.0, -1.0, 1.0, -1.0};

/// Midsurface kinematics of one element at its centroid.
struct ElementKinematics {
    Index nodes[4];
    Eigen::Vector3d c1, c2; // tangent columns
    double l1, l2;          // axis stretches |c_i|
    Eigen::Vector3d normal; // c1 x c2
    double area_ratio;      // |c1 x c2|
};

bool element_kinematics(const growth::GridGeometry& geo, const Vector& u, Index e,
                        ElementKinematics& out) {
    const Index n_nodes = geo.node_count();
    const Index es = geo.elements_per_side();
    const Index n0 = (e / es) * geo.nodes_per_side + (e % es);
    out.nodes[0] = n0;
    out.nodes[1] = n0 + 1;
    out.nodes[2] = n0 + geo.nodes_per_side + 1;
    out.nodes[3] = n0 + geo.nodes_per_side;

    out.c1.setZero();
    out.c2.setZero();
    for (int a = 0; a < 4; ++a) {
        const Index n = out.nodes[a];
        const Eigen::Vector3d pos(geo.node_x(n) + u[n], geo.node_y(n) + u[n_nodes + n],
                                  u[2 * n_nodes + n]);
        out.c1 += pos * kDnDx[a];
        out.c2 += pos * kDnDy[a];
    }
    out.c1 /= 2.0 * geo.dx();
    out.c2 /= 2.0 * geo.dx();
    out.l1 = out.c1.norm();
    out.l2 = out.c2.norm();
    out.normal = out.c1.cross(out.c2);
    out.area_ratio = out.normal.norm();
    return out.l1 > 1e-12 && out.l2 > 1e-12 && out.area_ratio > 1e-12;
}

/// Energy (optionally with gradient accumulation). Returns +inf instead of
/// throwing so the line search can reject wild trial states.
double membrane_energy_raw(const growth::GridGeometry& geo, const Vector& u,
                           const growth::GrowthState& gs, const MaterialParams& m,
                           Vector* grad) {
    const Index n_nodes = geo.node_count();
    const Index n_el = geo.element_count();
    const double inv2dx = 1.0 / (2.0 * geo.dx());
    const double w_el = geo.element_area() * geo.thickness; // mm^3

    if (grad) grad->setZero(geo.dof_count());

    double energy = 0.0;
    ElementKinematics kin;
    for (Index e = 0; e < n_el; ++e) {
        if (!element_kinematics(geo, u, e, kin)) return kInf;
        const double g1 = gs.lambda1_g[e];
        const double g2 = gs.lambda2_g[e];
        const Density d = goh_density(kin.l1 / g1, kin.l2 / g2, kin.area_ratio / (g1 * g2), m);
        if (!std::isfinite(d.psi)) return kInf;
        energy += d.psi * w_el;

        // Hourglass stabilization (per displacement component).
        const double k_hg = kHourglassCoeff * m.mu * geo.thickness;
        double q[3] = {0.0, 0.0, 0.0};
        for (int a = 0; a < 4; ++a) {
            const Index n = kin.nodes[a];
            q[0] += kHourglassSign[a] * u[n];
            q[1] += kHourglassSign[a] * u[n_nodes + n];
            q[2] += kHourglassSign[a] * u[2 * n_nodes + n];
        }
        energy += 0.5 * k_hg * (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);

        if (grad) {
            const Eigen::Vector3d dl1 = kin.c1 / kin.l1;
            const Eigen::Vector3d dl2 = kin.c2 / kin.l2;
            const Eigen::Vector3d w_hat = kin.normal / kin.area_ratio;
            const Eigen::Vector3d da_dc1 = kin.c2.cross(w_hat);
            const Eigen::Vector3d da_dc2 = w_hat.cross(kin.c1);
            const double f1 = w_el * d.d1 / g1;
            const double f2 = w_el * d.d2 / g2;
            const double fj = w_el * d.dj / (g1 * g2);
            for (int a = 0; a < 4; ++a) {
                const Index n = kin.nodes[a];
                const double sx = kDnDx[a] * inv2dx;
                const double sy = kDnDy[a] * inv2dx;
                const Eigen::Vector3d gnode =
                    f1 * sx * dl1 + f2 * sy * dl2 + fj * (sx * da_dc1 + sy * da_dc2);
                (*grad)[n] += gnode.x() + k_hg * q[0] * kHourglassSign[a];
                (*grad)[n_nodes + n] += gnode.y() + k_hg * q[1] * kHourglassSign[a];
                (*grad)[2 * n_nodes + n] += gnode.z() + k_hg * q[2] * kHourglassSign[a];
            }
        }
    }
    return energy;
}

void apply_mask(const growth::GridGeometry& geo, const std::vector<char>& fixed_mask,
                Vector& v) {
    const Index n_nodes = geo.node_count();
    for (Index n = 0; n < n_nodes; ++n) {
        if (fixed_mask[static_cast<std::size_t>(n)]) {
            v[n] = 0.0;
            v[n_nodes + n] = 0.0;
            v[2 * n_nodes + n] = 0.0;
        }
    }
}

using SparseMat = Eigen::SparseMatrix<double>;

/// d2(A_proj)/dx_i dy_j of a triangle: constant +-1/2 pattern.
constexpr double kAreaCross[3][3] = {
    {0.0, 0.5, -0.5},
    {-0.5, 0.0, 0.5},
    {0.5, -0.5, 0.0},
};

/// Displaced volume of one quad element, integrated as a fan of four
/// triangles around the corner centroid: V = sum A_proj * mean(z). The fan is
/// symmetric in the corners, so the checkerboard (hourglass) mode moves no
/// volume and the conjugate pressure load cannot excite it. Corner-level
/// gradient (12: corner-major x,y,z) and Hessian are exact.
struct QuadVolume {
    double volume = 0.0;
    Eigen::Matrix<double, 12, 1> grad = Eigen::Matrix<double, 12, 1>::Zero();
    Eigen::Matrix<double, 12, 12> hess = Eigen::Matrix<double, 12, 12>::Zero();
};

QuadVolume quad_displaced_volume(const Eigen::Matrix<double, 4, 3>& corners, bool want_grad,
                                 bool want_hess) {
    QuadVolume out;
    const Eigen::RowVector3d centroid = corners.colwise().mean();

    for (int t = 0; t < 4; ++t) {
        const int a = t;
        const int b = (t + 1) % 4;
        // Vertex weights over the four corners: A = corner a, B = corner b,
        // C = centroid.
        double w[3][4] = {};
        w[0][a] = 1.0;
        w[1][b] = 1.0;
        for (int c = 0; c < 4; ++c) w[2][c] = 0.25;

        const double x[3] = {corners(a, 0), corners(b, 0), centroid.x()};
        const double y[3] = {corners(a, 1), corners(b, 1), centroid.y()};
        const double z[3] = {corners(a, 2), corners(b, 2), centroid.z()};

        const double area = 0.5 * ((x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0]));
        const double zbar = (z[0] + z[1] + z[2]) / 3.0;
        out.volume += area * zbar;
        if (!want_grad) continue;

        const double dax[3] = {0.5 * (y[1] - y[2]), 0.5 * (y[2] - y[0]), 0.5 * (y[0] - y[1])};
        const double day[3] = {0.5 * (x[2] - x[1]), 0.5 * (x[0] - x[2]), 0.5 * (x[1] - x[0])};

        for (int i = 0; i < 3; ++i) {
            for (int c = 0; c < 4; ++c) {
                if (w[i][c] == 0.0) continue;
                out.grad[3 * c + 0] += w[i][c] * zbar * dax[i];
                out.grad[3 * c + 1] += w[i][c] * zbar * day[i];
                out.grad[3 * c + 2] += w[i][c] * area / 3.0;
            }
        }
        if (!want_hess) continue;

        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                // Vertex-level second partials of A * zbar.
                const double vxz = dax[i] / 3.0;
                const double vyz = day[i] / 3.0;
                const double vxy = zbar * kAreaCross[i][j];
                for (int ci = 0; ci < 4; ++ci) {
                    if (w[i][ci] == 0.0) continue;
                    for (int cj = 0; cj < 4; ++cj) {
                        if (w[j][cj] == 0.0) continue;
                        const double ww = w[i][ci] * w[j][cj];
                        out.hess(3 * ci + 0, 3 * cj + 2) += ww * vxz;
                        out.hess(3 * cj + 2, 3 * ci + 0) += ww * vxz;
                        out.hess(3 * ci + 1, 3 * cj + 2) += ww * vyz;
                        out.hess(3 * cj + 2, 3 * ci + 1) += ww * vyz;
                        out.hess(3 * ci + 0, 3 * cj + 1) += ww * vxy;
                        out.hess(3 * cj + 1, 3 * ci + 0) += ww * vxy;
                    }
                }
            }
        }
    }
    return out;
}

Eigen::Matrix<double, 4, 3> gather_corners(const growth::GridGeometry& geo, const Vector& u,
                                           const Index nodes[4]) {
    const Index nn = geo.node_count();
    Eigen::Matrix<double, 4, 3> corners;
    for (int a = 0; a < 4; ++a) {
        const Index n = nodes[a];
        corners(a, 0) = geo.node_x(n) + u[n];
        corners(a, 1) = geo.node_y(n) + u[nn + n];
        corners(a, 2) = u[2 * nn + n];
    }
    return corners;
}

void element_node_ids(const growth::GridGeometry& geo, Index e, Index nodes[4]) {
    const Index es = geo.elements_per_side();
    const Index n0 = (e / es) * geo.nodes_per_side + (e % es);
    nodes[0] = n0;
    nodes[1] = n0 + 1;
    nodes[2] = n0 + geo.nodes_per_side + 1;
    nodes[3] = n0 + geo.nodes_per_side;
}


/// Exact Hessian of the total potential: membrane energy plus the follower
/// pressure term. Fixed dofs get identity rows/columns.
SparseMat assemble_hessian(const growth::GridGeometry& geo, const Vector& u,
                           const growth::GrowthState& gs, const MaterialParams& m,
                           const std::vector<char>& fixed_mask, double pressure,
                           const std::vector<Index>& footprint) {
    const Index n_nodes = geo.node_count();
    const Index n_dofs = geo.dof_count();
    const double w_el = geo.element_area() * geo.thickness;
    const double inv2dx = 1.0 / (2.0 * geo.dx());

    auto dof_fixed = [&](Index n) { return fixed_mask[static_cast<std::size_t>(n)] != 0; };

    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(static_cast<std::size_t>(geo.element_count() * 144 + n_dofs));

    auto skew = [](const Eigen::Vector3d& v) {
        Eigen::Matrix3d s;
        s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
        return s;
    };

    ElementKinematics kin;
    for (Index e = 0; e < geo.element_count(); ++e) {
        if (!element_kinematics(geo, u, e, kin))
            throw NumericError("assemble_hessian: degenerate element " + std::to_string(e));
        const double g1 = gs.lambda1_g[e];
        const double g2 = gs.lambda2_g[e];
        const double ga = g1 * g2;
        const Density d = goh_density(kin.l1 / g1, kin.l2 / g2, kin.area_ratio / ga, m);

        const Eigen::Vector3d u1 = kin.c1 / kin.l1;
        const Eigen::Vector3d u2 = kin.c2 / kin.l2;
        const Eigen::Vector3d w_hat = kin.normal / kin.area_ratio;
        const Eigen::Vector3d b1 = kin.c2.cross(w_hat); // da / dc1
        const Eigen::Vector3d b2 = w_hat.cross(kin.c1); // da / dc2
        const Eigen::Matrix3d p1 = Eigen::Matrix3d::Identity() - u1 * u1.transpose();
        const Eigen::Matrix3d p2 = Eigen::Matrix3d::Identity() - u2 * u2.transpose();
        const Eigen::Matrix3d pw = Eigen::Matrix3d::Identity() - w_hat * w_hat.transpose();
        const Eigen::Matrix3d sc1 = skew(kin.c1);
        const Eigen::Matrix3d sc2 = skew(kin.c2);
        const Eigen::Matrix3d sw = skew(w_hat);

        // Second derivatives of the area ratio a = |c1 x c2|.
        const Eigen::Matrix3d a11 = -sc2 * pw * sc2 / kin.area_ratio;
        const Eigen::Matrix3d a22 = -sc1 * pw * sc1 / kin.area_ratio;
        const Eigen::Matrix3d a12 = -sw + sc2 * pw * sc1 / kin.area_ratio;
        const Eigen::Matrix3d a21 = a12.transpose();

        // Density-weighted directional blocks (c-space, growth scales folded in).
        const double f1 = d.d1 / g1;
        const double f2 = d.d2 / g2;
        const double fj = d.dj / ga;
        const Eigen::Matrix3d m11 = (d.d11 / (g1 * g1)) * (u1 * u1.transpose()) +
                                    (f1 / kin.l1) * p1 +
                                    (d.d1j / (g1 * ga)) * (u1 * b1.transpose() + b1 * u1.transpose()) +
                                    (d.djj / (ga * ga)) * (b1 * b1.transpose()) + fj * a11;
        const Eigen::Matrix3d m22 = (d.d22 / (g2 * g2)) * (u2 * u2.transpose()) +
                                    (f2 / kin.l2) * p2 +
                                    (d.d2j / (g2 * ga)) * (u2 * b2.transpose() + b2 * u2.transpose()) +
                                    (d.djj / (ga * ga)) * (b2 * b2.transpose()) + fj * a22;
        const Eigen::Matrix3d m12 = (d.d12 / (g1 * g2)) * (u1 * u2.transpose()) +
                                    (d.d1j / (g1 * ga)) * (u1 * b2.transpose()) +
                                    (d.d2j / (g2 * ga)) * (b1 * u2.transpose()) +
                                    (d.djj / (ga * ga)) * (b1 * b2.transpose()) + fj * a12;
        const Eigen::Matrix3d m21 = (d.d12 / (g1 * g2)) * (u2 * u1.transpose()) +
                                    (d.d1j / (g1 * ga)) * (b2 * u1.transpose()) +
                                    (d.d2j / (g2 * ga)) * (u2 * b1.transpose()) +
                                    (d.djj / (ga * ga)) * (b2 * b1.transpose()) + fj * a21;

        const double k_hg = kHourglassCoeff * m.mu * geo.thickness;
        for (int a = 0; a < 4; ++a) {
            if (dof_fixed(kin.nodes[a])) continue;
            const double sxa = kDnDx[a] * inv2dx;
            const double sya = kDnDy[a] * inv2dx;
            for (int b = 0; b < 4; ++b) {
                if (dof_fixed(kin.nodes[b])) continue;
                const double sxb = kDnDx[b] * inv2dx;
                const double syb = kDnDy[b] * inv2dx;
                Eigen::Matrix3d block =
                    w_el * (sxa * sxb * m11 + sya * syb * m22 + sxa * syb * m12 + sya * sxb * m21);
                block += k_hg * kHourglassSign[a] * kHourglassSign[b] * Eigen::Matrix3d::Identity();
                const Index ia[3] = {kin.nodes[a], n_nodes + kin.nodes[a],
                                     2 * n_nodes + kin.nodes[a]};
                const Index ib[3] = {kin.nodes[b], n_nodes + kin.nodes[b],
                                     2 * n_nodes + kin.nodes[b]};
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c)
                        triplets.emplace_back(static_cast<int>(ia[r]), static_cast<int>(ib[c]),
                                              block(r, c));
            }
        }
    }
    // Follower pressure: -p * d2V/du2 over footprint elements.
    if (pressure != 0.0) {
        Index nodes[4];
        for (Index e : footprint) {
            element_node_ids(geo, e, nodes);
            const auto qv = quad_displaced_volume(gather_corners(geo, u, nodes), true, true);
            for (int a = 0; a < 4; ++a) {
                if (dof_fixed(nodes[a])) continue;
                const Index ia[3] = {nodes[a], n_nodes + nodes[a], 2 * n_nodes + nodes[a]};
                for (int b = 0; b < 4; ++b) {
                    if (dof_fixed(nodes[b])) continue;
                    const Index ib[3] = {nodes[b], n_nodes + nodes[b], 2 * n_nodes + nodes[b]};
                    for (int r = 0; r < 3; ++r)
                        for (int c = 0; c < 3; ++c) {
                            const double v = -pressure * qv.hess(3 * a + r, 3 * b + c);
                            if (v != 0.0)
                                triplets.emplace_back(static_cast<int>(ia[r]),
                                                      static_cast<int>(ib[c]), v);
                        }
                }
            }
        }
    }

    for (Index n = 0; n < n_nodes; ++n) {
        if (dof_fixed(n)) {
            triplets.emplace_back(static_cast<int>(n), static_cast<int>(n), 1.0);
            triplets.emplace_back(static_cast<int>(n_nodes + n), static_cast<int>(n_nodes + n), 1.0);
            triplets.emplace_back(static_cast<int>(2 * n_nodes + n),
                                  static_cast<int>(2 * n_nodes + n), 1.0);
        }
    }

    SparseMat h(n_dofs, n_dofs);
    h.setFromTriplets(triplets.begin(), triplets.end());
    return h;
}

} // namespace

MaterialParams MaterialParams::from_simulation(const sampling::SimulationParams& p) {
    MaterialParams m;
    m.mu = p.mu;
    m.k1 = p.k1;
    m.kappa = p.kappa;
    m.k2 = 2.88;
    m.nu = 0.45;
    m.bulk_like = 2.0 * m.mu * (1.0 + m.nu) / (3.0 * (1.0 - 2.0 * m.nu));
    return m;
}

ControllerOutput controller_step(const ControllerState& state, double setpoint_ml,
                                 double achieved_ml, double dt_days) {
    if (!(dt_days > 0.0)) throw std::invalid_argument("controller_step: dt must be positive");
    ControllerOutput out;
    out.state = state;
    const double err = setpoint_ml - achieved_ml;
    out.state.integral += err * dt_days;
    out.state.last_error = err;
    out.pressure =
        std::max(0.0, kPressureScale * (state.kp * err + state.ki * out.state.integral));
    return out;
}

EnergyResult membrane_energy(const growth::GridGeometry& geometry, const Vector& displacement,
                             const growth::GrowthState& growth_state,
                             const MaterialParams& material) {
    if (displacement.size() != geometry.dof_count())
        throw std::invalid_argument("membrane_energy: displacement must have 3*G^2 entries");
    EnergyResult r;
    r.energy = membrane_energy_raw(geometry, displacement, growth_state, material, &r.gradient);
    if (!std::isfinite(r.energy))
        throw NumericError("membrane_energy: non-finite energy (solver state)");
    return r;
}

std::vector<Index> footprint_elements(const growth::GridGeometry& geometry) {
    std::vector<Index> elements;
    const double r_max = geometry.expander_diameter / 2.0;
    const double c = geometry.side_length / 2.0;
    const Index es = geometry.elements_per_side();
    for (Index e = 0; e < geometry.element_count(); ++e) {
        const double ex = (static_cast<double>(e % es) + 0.5) * geometry.dx() - c;
        const double ey = (static_cast<double>(e / es) + 0.5) * geometry.dx() - c;
        if (std::sqrt(ex * ex + ey * ey) <= r_max) elements.push_back(e);
    }
    return elements;
}

double cavity_volume_mm3(const growth::GridGeometry& geometry, const Vector& displacement,
                         const std::vector<Index>& footprint) {
    double v = 0.0;
    Index nodes[4];
    for (Index e : footprint) {
        element_node_ids(geometry, e, nodes);
        v += quad_displaced_volume(gather_corners(geometry, displacement, nodes), false, false)
                 .volume;
    }
    return v;
}

std::vector<char> make_fixed_mask(const growth::GridGeometry& geometry, double tol_mm) {
    std::vector<char> mask(static_cast<std::size_t>(geometry.node_count()), 0);
    const double r_pin = geometry.expander_diameter / 2.0 + tol_mm;
    for (Index n = 0; n < geometry.node_count(); ++n)
        if (geometry.node_radius(n) > r_pin) mask[static_cast<std::size_t>(n)] = 1;
    return mask;
}

Vector equilibrium_solve(const growth::GridGeometry& geometry,
                         const growth::GrowthState& growth_state,
                         const MaterialParams& material, double pressure_mpa,
                         const std::vector<char>& fixed_mask, const Vector& warm_start,
                         const SolveOptions& options) {
    if (warm_start.size() != geometry.dof_count())
        throw std::invalid_argument("equilibrium_solve: warm_start has wrong dimension");
    const Index n_nodes = geometry.node_count();
    const auto footprint = footprint_elements(geometry);

    Index n_free_nodes = 0;
    for (char f : fixed_mask)
        if (!f) ++n_free_nodes;
    const double grad_tol = options.grad_tol_per_dof * 3.0 * static_cast<double>(n_free_nodes);

    // Potential = strain energy - pressure * displaced volume (follower load).
    auto eval = [&](const Vector& u, Vector* grad) -> double {
        double e = membrane_energy_raw(geometry, u, growth_state, material, grad);
        if (!std::isfinite(e)) return kInf;
        Index nodes[4];
        for (Index fe : footprint) {
            element_node_ids(geometry, fe, nodes);
            const auto qv =
                quad_displaced_volume(gather_corners(geometry, u, nodes), grad != nullptr, false);
            e -= pressure_mpa * qv.volume;
            if (grad) {
                for (int a = 0; a < 4; ++a) {
                    (*grad)[nodes[a]] -= pressure_mpa * qv.grad[3 * a + 0];
                    (*grad)[n_nodes + nodes[a]] -= pressure_mpa * qv.grad[3 * a + 1];
                    (*grad)[2 * n_nodes + nodes[a]] -= pressure_mpa * qv.grad[3 * a + 2];
                }
            }
        }
        if (grad) apply_mask(geometry, fixed_mask, *grad);
        return e;
    };

    Vector u = warm_start;
    apply_mask(geometry, fixed_mask, u);

    Vector grad(u.size());
    double f = eval(u, &grad);
    if (!std::isfinite(f)) throw NumericError("equilibrium_solve: non-finite warm-start energy");

    // Damped Newton with Levenberg regularization; falls back toward scaled
    // gradient steps when the Hessian is indefinite (unstressed membranes have
    // zero out-of-plane stiffness at the flat state).
    Eigen::SimplicialLDLT<SparseMat> ldlt;
    double tau = 0.0;

    for (Index it = 0; it < options.max_iterations; ++it) {
        if (grad.norm() <= grad_tol) return u;

        SparseMat hess =
            assemble_hessian(geometry, u, growth_state, material, fixed_mask, pressure_mpa, footprint);
        const double diag_scale =
            std::max(1e-12, hess.diagonal().cwiseAbs().sum() / static_cast<double>(hess.rows()));

        Vector dir;
        bool have_direction = false;
        for (int attempt = 0; attempt < 40 && !have_direction; ++attempt) {
            SparseMat damped = hess;
            if (tau > 0.0) {
                SparseMat eye(hess.rows(), hess.cols());
                eye.setIdentity();
                damped += (tau * diag_scale) * eye;
            }
            ldlt.compute(damped);
            if (ldlt.info() == Eigen::Success) {
                dir = ldlt.solve(-grad);
                if (dir.allFinite() && grad.dot(dir) < 0.0) {
                    have_direction = true;
                    break;
                }
            }
            tau = tau == 0.0 ? 1e-6 : tau * 10.0;
            if (tau > 1e12) break;
        }
        if (!have_direction)
            throw ConvergenceError("equilibrium_solve: no descent direction (singular Hessian)");

        const double slope = grad.dot(dir);
        double step = 1.0;
        Vector u_new;
        double f_new = kInf;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            u_new = u + step * dir;
            f_new = eval(u_new, nullptr);
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (tau < 1e12) {
                tau = tau == 0.0 ? 1e-6 : tau * 100.0;
                continue;
            }
            // Flat to rounding in every direction we can build.
            if (grad.norm() <= grad_tol * 1e4) return u;
            throw ConvergenceError("equilibrium_solve: line search stalled, |g| = " +
                                   std::to_string(grad.norm()) + " vs tol " +
                                   std::to_string(grad_tol));
        }

        u = std::move(u_new);
        f = f_new;
        f = eval(u, &grad);
        // Relax the damping once full Newton steps start landing.
        tau = (step == 1.0) ? tau * 0.25 : tau;
        if (tau < 1e-9) tau = 0.0;
    }
    if (grad.norm() <= grad_tol) return u;
    throw ConvergenceError("equilibrium_solve: iteration budget exhausted");
}

SimulationRecord simulate(const sampling::SimulationParams& params,
                          const growth::GridGeometry& geometry,
                          const sampling::VolumeSchedule& schedule,
                          const SolveOptions& options) {
    const Index t_total = schedule.n_steps;
    const Index n_el = geometry.element_count();
    const MaterialParams material = MaterialParams::from_simulation(params);
    const auto fixed_mask = make_fixed_mask(geometry, params.tol);
    const auto footprint = footprint_elements(geometry);

    SimulationRecord rec;
    rec.params = params;
    rec.displacements.resize(t_total, geometry.dof_count());
    rec.growth1.resize(t_total, n_el);
    rec.growth2.resize(t_total, n_el);

    growth::GrowthState gs = growth::GrowthState::unit(n_el);
    Vector u = Vector::Zero(geometry.dof_count());
    ControllerState cs;
    double achieved_ml = 0.0;
    double p_prev = 0.0;

    // The PI law is applied implicitly: each snapshot lands on the pressure
    // that is self-consistent with the volume it produces. The explicit
    // one-solve-per-step coupling rings for compliant parameter draws (the
    // proportional path flips sign each step once the loop gain passes one);
    // the implicit fixed point is monotone and stable for any gain.
    auto pi_rhs = [&](double err) {
        return std::max(0.0, kPressureScale *
                                 (cs.kp * err + cs.ki * (cs.integral + err * kSnapshotDtDays)));
    };
    auto volume_at = [&](double pressure) {
        u = equilibrium_solve(geometry, gs, material, pressure, fixed_mask, u, options);
        return mm3_to_ml(cavity_volume_mm3(geometry, u, footprint));
    };

    Index done = 0;
    try {
        for (Index k = 0; k < t_total; ++k) {
            const double setpoint = schedule.setpoints[static_cast<std::size_t>(k)];
            // Residual t(p) = pi(e(p)) - p is strictly decreasing in p.
            double p = p_prev;
            double v = volume_at(p);
            double t_val = pi_rhs(setpoint - v) - p;

            double p_lo = p, t_lo = t_val;
            double p_hi = p, t_hi = t_val;
            if (t_val > 1e-10) {
                for (int it = 0; it < 60 && t_hi > 0.0; ++it) {
                    p_lo = p_hi;
                    t_lo = t_hi;
                    p_hi = p_hi * 2.0 + 1e-6;
                    v = volume_at(p_hi);
                    t_hi = pi_rhs(setpoint - v) - p_hi;
                }
            } else if (t_val < -1e-10) {
                for (int it = 0; it < 60 && t_lo < 0.0 && p_lo > 0.0; ++it) {
                    p_hi = p_lo;
                    t_hi = t_lo;
                    p_lo = p_lo > 1e-6 ? p_lo * 0.5 : 0.0;
                    v = volume_at(p_lo);
                    t_lo = pi_rhs(setpoint - v) - p_lo;
                }
                if (t_lo < 0.0 && p_lo == 0.0) {
                    // Floored: the law asks for non-positive pressure.
                    p = 0.0;
                    t_val = 0.0;
                }
            }
            if (t_lo >= 0.0 && t_hi <= 0.0) {
                // Illinois regula falsi on the bracket.
                for (int it = 0; it < 60; ++it) {
                    const double denom = t_lo - t_hi;
                    double p_mid = denom != 0.0 ? p_lo + (p_hi - p_lo) * t_lo / denom
                                                : 0.5 * (p_lo + p_hi);
                    p_mid = std::clamp(p_mid, p_lo, p_hi);
                    v = volume_at(p_mid);
                    const double t_mid = pi_rhs(setpoint - v) - p_mid;
                    if (std::abs(t_mid) <= 1e-10 + 1e-7 * p_mid || p_hi - p_lo < 1e-14) {
                        p = p_mid;
                        break;
                    }
                    if (t_mid > 0.0) {
                        p_lo = p_mid;
                        t_lo = t_mid;
                        t_hi *= 0.5; // Illinois damping
                    } else {
                        p_hi = p_mid;
                        t_hi = t_mid;
                        t_lo *= 0.5;
                    }
                    p = p_mid;
                }
            }
            p_prev = p;
            achieved_ml = v;
            cs = controller_step(cs, setpoint, achieved_ml, kSnapshotDtDays).state;

            rec.times.push_back(schedule.times[static_cast<std::size_t>(k)]);
            rec.volumes.push_back(achieved_ml);
            rec.displacements.row(k) = u.transpose();
            rec.growth1.row(k) = gs.lambda1_g.transpose();
            rec.growth2.row(k) = gs.lambda2_g.transpose();
            done = k + 1;

            const auto stretches = growth::compute_stretches(geometry, u);
            gs = growth::advance_growth(gs, stretches, params, kSnapshotDtDays);
        }
    } catch (const NumericError&) {
        rec.converged = false;
        rec.displacements.conservativeResize(done, Eigen::NoChange);
        rec.growth1.conservativeResize(done, Eigen::NoChange);
        rec.growth2.conservativeResize(done, Eigen::NoChange);
    }
    return rec;
}

void save_record(const std::filesystem::path& path, const SimulationRecord& record,
                 const growth::GridGeometry& geometry) {
    io::json meta;
    const auto names = sampling::param_names();
    const auto values = record.params.as_array();
    for (std::size_t i = 0; i < names.size(); ++i) meta["params"][names[i]] = values[i];
    meta["dt"] = kSnapshotDtDays;
    meta["converged"] = record.converged;
    meta["grid"] = {{"nodes_per_side", geometry.nodes_per_side},
                    {"side_length", geometry.side_length},
                    {"thickness", geometry.thickness},
                    {"expander_diameter", geometry.expander_diameter}};

    std::vector<io::NamedArray> arrays;
    const Vector times = Eigen::Map<const Vector>(record.times.data(),
                                                  static_cast<Index>(record.times.size()));
    const Vector volumes = Eigen::Map<const Vector>(record.volumes.data(),
                                                    static_cast<Index>(record.volumes.size()));
    arrays.push_back(io::make_array("times", times));
    arrays.push_back(io::make_array("volumes", volumes));
    arrays.push_back(io::make_array("displacements", record.displacements));
    arrays.push_back(io::make_array("growth1", record.growth1));
    arrays.push_back(io::make_array("growth2", record.growth2));
    io::write_container(path, meta, arrays);
}

LoadedRecord load_record(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    LoadedRecord out;
    const auto& grid = c.meta.at("grid");
    out.geometry = growth::make_grid(grid.at("nodes_per_side").get<Index>(),
                                     grid.at("side_length").get<double>(),
                                     grid.at("thickness").get<double>(),
                                     grid.at("expander_diameter").get<double>());

    std::array<double, 8> pa{};
    const auto names = sampling::param_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        pa[i] = c.meta.at("params").at(names[i]).get<double>();
    out.record.params = sampling::SimulationParams::from_array(pa);
    out.record.converged = c.meta.at("converged").get<bool>();

    const auto& times = c.get("times").data;
    const auto& volumes = c.get("volumes").data;
    out.record.times.assign(times.data(), times.data() + times.size());
    out.record.volumes.assign(volumes.data(), volumes.data() + volumes.size());
    out.record.displacements = c.get("displacements").as_matrix();
    out.record.growth1 = c.get("growth1").as_matrix();
    out.record.growth2 = c.get("growth2").as_matrix();
    return out;
}

} // namespace terom::fom
