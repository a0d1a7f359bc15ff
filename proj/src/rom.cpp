#include "terom/rom.hpp"

#include "terom/io.hpp"

#include <cmath>

namespace terom::rom {

namespace {

Vector floored(const Vector& std) {
    return std.unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
}

/// CNN input field for variant D: channel 0 = lambda1_g, channel 1 = lambda2_g
/// on the element grid.
Vector growth_field_image(const growth::GrowthState& gs) {
    Vector field(2 * gs.lambda1_g.size());
    field.head(gs.lambda1_g.size()) = gs.lambda1_g;
    field.tail(gs.lambda2_g.size()) = gs.lambda2_g;
    return field;
}

/// Scatter per-element stretch gradients back to nodal displacement dofs.
/// Mirrors the centroid shape-function derivatives used by compute_stretches.
void accumulate_stretch_gradient(const growth::GridGeometry& geo, const Matrix& tangents,
                                 const Vector& dl1, const Vector& dl2, Vector& du) {
    static constexpr double kDnDx[4] = {-1.0, 1.0, 1.0, -1.0};
    static constexpr double kDnDy[4] = {-1.0, -1.0, 1.0, 1.0};
    const double inv2dx = 1.0 / (2.0 * geo.dx());
    const Index n_nodes = geo.node_count();
    const Index es = geo.elements_per_side();

    for (Index e = 0; e < geo.element_count(); ++e) {
        if (dl1[e] == 0.0 && dl2[e] == 0.0) continue;
        const Eigen::Vector3d c1 = tangents.row(e).head(3);
        const Eigen::Vector3d c2 = tangents.row(e).tail(3);
        const Eigen::Vector3d g1 = c1.normalized() * dl1[e];
        const Eigen::Vector3d g2 = c2.normalized() * dl2[e];
        const Index n0 = (e / es) * geo.nodes_per_side + (e % es);
        const Index nodes[4] = {n0, n0 + 1, n0 + geo.nodes_per_side + 1,
                                n0 + geo.nodes_per_side};
        for (int a = 0; a < 4; ++a) {
            const Index n = nodes[a];
            const Eigen::Vector3d gn = g1 * (kDnDx[a] * inv2dx) + g2 * (kDnDy[a] * inv2dx);
            du[n] += gn.x();
            du[n_nodes + n] += gn.y();
            du[2 * n_nodes + n] += gn.z();
        }
    }
}

} // namespace

Variant variant_from_string(const std::string& s) {
    if (s == "A") return Variant::A;
    if (s == "B") return Variant::B;
    if (s == "C") return Variant::C;
    if (s == "D") return Variant::D;
    throw ConfigError("unknown model variant '" + s + "' (expected A, B, C or D)");
}

std::string variant_to_string(Variant v) {
    switch (v) {
        case Variant::A: return "A";
        case Variant::B: return "B";
        case Variant::C: return "C";
        case Variant::D: return "D";
    }
    return "?";
}

NormStats NormStats::identity(Index latent_dim, Index d_g) {
    NormStats s;
    s.z_mean = Vector::Zero(latent_dim);
    s.z_std = Vector::Ones(latent_dim);
    s.cond_mean = Vector::Zero(kConditionDim);
    s.cond_std = Vector::Ones(kConditionDim);
    s.ctrl_mean = Vector::Zero(kControllerDim);
    s.ctrl_std = Vector::Ones(kControllerDim);
    s.g_mean = Vector::Zero(d_g);
    s.g_std = Vector::Ones(d_g);
    return s;
}

Vector conditioning_vector(const sampling::SimulationParams& p) {
    Vector c(kConditionDim);
    c << p.tol, p.lambda_crit, p.mu, p.kg1, p.kg2, p.kappa, p.k1;
    return c;
}

NodeModel make_node_model(Variant variant, Index latent_coeffs,
                          const growth::GridGeometry& geometry, std::uint64_t seed,
                          Index hidden1, Index hidden2, const pod::PodBasis* growth_basis1,
                          const pod::PodBasis* growth_basis2) {
    NodeModel m;
    m.variant = variant;
    m.latent_dim = latent_coeffs + 1;
    switch (variant) {
        case Variant::A: m.d_g = 0; break;
        case Variant::B: m.d_g = 1; break;
        case Variant::C: {
            if (!growth_basis1 || !growth_basis2)
                throw ConfigError("variant C needs the two growth POD bases");
            m.growth_basis1 = *growth_basis1;
            m.growth_basis2 = *growth_basis2;
            m.d_g = growth_basis1->retained + growth_basis2->retained;
            break;
        }
        case Variant::D: {
            m.cnn_spec.height = geometry.elements_per_side();
            m.cnn_spec.width = geometry.elements_per_side();
            m.d_g = m.cnn_spec.embed_dim;
            m.cnn_params = nn::cnn_init(m.cnn_spec, seed + 1);
            break;
        }
    }
    m.mlp_spec = nn::MlpSpec{m.latent_dim + kConditionDim + kControllerDim + m.d_g, hidden1,
                             hidden2, m.latent_dim};
    m.mlp_params = nn::mlp_init(m.mlp_spec, seed);
    m.stats = NormStats::identity(m.latent_dim, m.d_g);
    return m;
}

Vector encode_feedback(const NodeModel& model, const growth::GridGeometry& geometry,
                       const growth::GrowthState& growth_state) {
    switch (model.variant) {
        case Variant::A:
            throw ConfigError("encode_feedback: variant A has no feedback path");
        case Variant::B: {
            Vector g(1);
            g[0] = (growth::area_gain(geometry, growth_state) - model.stats.g_mean[0]) /
                   floored(model.stats.g_std)[0];
            return g;
        }
        case Variant::C: {
            Vector g(model.d_g);
            g.head(model.growth_basis1.retained) =
                pod::project(model.growth_basis1, growth_state.lambda1_g);
            g.tail(model.growth_basis2.retained) =
                pod::project(model.growth_basis2, growth_state.lambda2_g);
            return (g - model.stats.g_mean).cwiseQuotient(floored(model.stats.g_std));
        }
        case Variant::D:
            return nn::cnn_forward(model.cnn_spec, model.cnn_params,
                                   growth_field_image(growth_state), nullptr);
    }
    throw ConfigError("encode_feedback: bad variant");
}

Vector assemble_node_input(const NodeModel& model, const Vector& state_raw, const Vector& cond_raw,
                           const ControllerInputs& ctrl, const Vector& g) {
    if (g.size() != model.d_g)
        throw ConfigError("node input: feedback dimension mismatch for variant " +
                          variant_to_string(model.variant));
    Vector x(model.input_dim());
    x.head(model.latent_dim) =
        (state_raw - model.stats.z_mean).cwiseQuotient(floored(model.stats.z_std));
    x.segment(model.latent_dim, kConditionDim) =
        (cond_raw - model.stats.cond_mean).cwiseQuotient(floored(model.stats.cond_std));
    Vector c(3);
    c << ctrl.setpoint, ctrl.error, ctrl.error_integral;
    x.segment(model.latent_dim + kConditionDim, kControllerDim) =
        (c - model.stats.ctrl_mean).cwiseQuotient(floored(model.stats.ctrl_std));
    if (model.d_g > 0) x.tail(model.d_g) = g;
    return x;
}

Vector node_rhs(const NodeModel& model, const AugmentedLatentState& state,
                const sampling::SimulationParams& params, const ControllerInputs& ctrl,
                const Vector& g) {
    if (state.z.size() + 1 != model.latent_dim)
        throw ConfigError("node_rhs: latent dimension mismatch");
    const Vector x =
        assemble_node_input(model, state.to_vector(), conditioning_vector(params), ctrl, g);
    return nn::mlp_forward(model.mlp_spec, model.mlp_params, x, nullptr).col(0);
}

Vector euler_step(const Vector& state, const Vector& velocity, double dt) {
    if (state.size() != velocity.size())
        throw std::invalid_argument("euler_step: dimension mismatch");
    return state + velocity * dt;
}

AugmentedLatentState initial_state(const pod::PodBasis& basis, const Vector& u0) {
    AugmentedLatentState s;
    s.z = pod::project(basis, u0);
    s.volume = 0.0;
    return s;
}

namespace {

TracedRollout run_rollout(const NodeModel& model, const pod::PodBasis& basis,
                          const growth::GridGeometry& geometry,
                          const sampling::SimulationParams& params,
                          const sampling::VolumeSchedule& schedule,
                          const AugmentedLatentState& initial, bool with_trace, bool full_graph) {
    const Index latent_total = model.latent_dim;
    const Index r = latent_total - 1;
    if (initial.z.size() != r) throw ConfigError("rollout: initial state dimension mismatch");
    if (basis.retained != r) throw ConfigError("rollout: basis mode count mismatch");
    const Index t_total = schedule.n_steps;
    const Index n_el = geometry.element_count();

    TracedRollout out;
    RolloutResult& res = out.result;
    res.latent.resize(t_total, latent_total);
    res.displacements.resize(t_total, geometry.dof_count());
    res.growth1.resize(t_total, n_el);
    res.growth2.resize(t_total, n_el);
    out.trace.full_graph = full_graph;
    if (with_trace) {
        out.trace.mlp_tapes.resize(static_cast<std::size_t>(t_total - 1));
        if (model.variant == Variant::D)
            out.trace.cnn_tapes.resize(static_cast<std::size_t>(t_total - 1));
        if (full_graph) {
            out.trace.tangents.resize(static_cast<std::size_t>(t_total - 1));
            out.trace.stretch1.resize(n_el, t_total - 1);
            out.trace.stretch2.resize(n_el, t_total - 1);
        }
    }

    const Vector cond = conditioning_vector(params);
    const Vector z_std = floored(model.stats.z_std);

    Vector s = initial.to_vector();
    growth::GrowthState gs = growth::GrowthState::unit(n_el);
    double err_integral = 0.0;
    Vector u(geometry.dof_count());

    Index k = 0;
    for (; k < t_total; ++k) {
        res.latent.row(k) = s.transpose();
        u.noalias() = basis.mean + basis.modes * s.head(r);
        res.displacements.row(k) = u.transpose();
        res.growth1.row(k) = gs.lambda1_g.transpose();
        res.growth2.row(k) = gs.lambda2_g.transpose();
        if (k == t_total - 1) {
            ++k;
            break;
        }

        // Physics-side growth update from the decoded field.
        try {
            const auto stretches = growth::compute_stretches(geometry, u);
            if (with_trace && full_graph) {
                const auto ki = static_cast<std::size_t>(k);
                out.trace.stretch1.col(k) = stretches.lambda1;
                out.trace.stretch2.col(k) = stretches.lambda2;
                out.trace.tangents[ki].resize(n_el, 6);
                for (Index e = 0; e < n_el; ++e) {
                    const auto t = growth::element_tangents(geometry, u, e);
                    out.trace.tangents[ki].row(e) << t.c1.transpose(), t.c2.transpose();
                }
            }
            gs = growth::advance_growth(gs, stretches, params, kSnapshotDtDays);
        } catch (const NumericError&) {
            res.diverged = true;
            ++k;
            break;
        }

        // Feedback from the just-updated growth state.
        Vector g(0);
        if (model.variant == Variant::B || model.variant == Variant::C) {
            g = encode_feedback(model, geometry, gs);
        } else if (model.variant == Variant::D) {
            nn::CnnTape* tape =
                with_trace ? &out.trace.cnn_tapes[static_cast<std::size_t>(k)] : nullptr;
            g = nn::cnn_forward(model.cnn_spec, model.cnn_params, growth_field_image(gs), tape);
        }

        // The setpoint driving this transition: the implicitly coupled
        // controller lands snapshot k+1 on S(t_{k+1}), so that value (known
        // from the current time) is what keeps the latent dynamics Markovian.
        ControllerInputs ctrl;
        ctrl.setpoint = schedule.setpoints[static_cast<std::size_t>(k + 1)];
        ctrl.error = ctrl.setpoint - s[r];
        ctrl.error_integral = err_integral;

        const Vector x = assemble_node_input(model, s, cond, ctrl, g);
        nn::MlpTape* tape = with_trace ? &out.trace.mlp_tapes[static_cast<std::size_t>(k)] : nullptr;
        const Vector f = nn::mlp_forward(model.mlp_spec, model.mlp_params, x, tape).col(0);

        s += f.cwiseProduct(z_std) * kSnapshotDtDays;
        err_integral += ctrl.error * kSnapshotDtDays;
        if (!s.allFinite()) {
            res.diverged = true;
            ++k;
            break;
        }
    }

    res.steps_completed = k;
    if (k < t_total) {
        res.latent.conservativeResize(k, Eigen::NoChange);
        res.displacements.conservativeResize(k, Eigen::NoChange);
        res.growth1.conservativeResize(k, Eigen::NoChange);
        res.growth2.conservativeResize(k, Eigen::NoChange);
    }
    if (k > 0) {
        growth::GrowthState last{res.growth1.row(k - 1).transpose(),
                                 res.growth2.row(k - 1).transpose()};
        res.final_area_gain = growth::area_gain(geometry, last);
    }
    return out;
}

} // namespace

RolloutResult rollout(const NodeModel& model, const pod::PodBasis& basis,
                      const growth::GridGeometry& geometry,
                      const sampling::SimulationParams& params,
                      const sampling::VolumeSchedule& schedule,
                      const AugmentedLatentState& initial) {
    return run_rollout(model, basis, geometry, params, schedule, initial, false, false).result;
}

TracedRollout rollout_traced(const NodeModel& model, const pod::PodBasis& basis,
                             const growth::GridGeometry& geometry,
                             const sampling::SimulationParams& params,
                             const sampling::VolumeSchedule& schedule,
                             const AugmentedLatentState& initial, bool full_graph) {
    return run_rollout(model, basis, geometry, params, schedule, initial, true, full_graph);
}

RolloutGradients rollout_backward(const NodeModel& model, const pod::PodBasis& basis,
                                  const growth::GridGeometry& geometry,
                                  const sampling::SimulationParams& params,
                                  const sampling::VolumeSchedule& schedule,
                                  const TracedRollout& rollout, const Matrix& dlatent_norm,
                                  double d_area_gain) {
    (void)schedule;
    const RolloutResult& res = rollout.result;
    const Index latent_total = model.latent_dim;
    const Index r = latent_total - 1;
    const Index t_done = res.steps_completed;
    const Index n_el = geometry.element_count();
    const bool full_graph = rollout.trace.full_graph;

    RolloutGradients grads;
    grads.mlp = Vector::Zero(model.mlp_params.size());
    grads.cnn = Vector::Zero(model.cnn_params.size());
    if (t_done < 2) return grads;
    if (dlatent_norm.rows() != latent_total || dlatent_norm.cols() < t_done)
        throw std::invalid_argument("rollout_backward: dlatent_norm shape mismatch");

    const Vector z_std = floored(model.stats.z_std);
    const Vector ctrl_std = floored(model.stats.ctrl_std);
    const Vector g_std = floored(model.stats.g_std);
    const Index ctrl_off = latent_total + kConditionDim;

    // Growth adjoints carry d loss / d growth state; only live in full-graph
    // mode. At entry to the loop body for transition k they refer to the
    // post-update state G^(k+1).
    Vector a1 = Vector::Zero(n_el);
    Vector a2 = Vector::Zero(n_el);
    if (full_graph && d_area_gain != 0.0) {
        const double w = geometry.element_area() / 100.0;
        a1 = d_area_gain * w * res.growth2.row(t_done - 1).transpose();
        a2 = d_area_gain * w * res.growth1.row(t_done - 1).transpose();
    }

    Vector d_state = Vector::Zero(latent_total);
    double int_acc = 0.0;

    for (Index k = t_done - 2; k >= 0; --k) {
        const auto ki = static_cast<std::size_t>(k);
        d_state += dlatent_norm.col(k + 1).cwiseQuotient(z_std);

        const Matrix d_out = (d_state.cwiseProduct(z_std) * kSnapshotDtDays);
        const Matrix dx = nn::mlp_backward(model.mlp_spec, model.mlp_params,
                                           rollout.trace.mlp_tapes[ki], d_out, grads.mlp);
        const Vector dxv = dx.col(0);

        // Feedback path: encoder parameter gradients always flow; the growth
        // input itself is gradient-stopped unless full_graph.
        if (model.d_g > 0) {
            const Vector dg = dxv.tail(model.d_g);
            Vector din;
            if (model.variant == Variant::D) {
                din = nn::cnn_backward(model.cnn_spec, model.cnn_params,
                                       rollout.trace.cnn_tapes[ki], dg, grads.cnn);
            }
            if (full_graph) {
                if (model.variant == Variant::B) {
                    const double d_ag = dg[0] / g_std[0];
                    const double w = geometry.element_area() / 100.0;
                    a1 += d_ag * w * res.growth2.row(k + 1).transpose();
                    a2 += d_ag * w * res.growth1.row(k + 1).transpose();
                } else if (model.variant == Variant::C) {
                    const Index r1 = model.growth_basis1.retained;
                    const Index r2 = model.growth_basis2.retained;
                    a1 += model.growth_basis1.modes *
                          dg.head(r1).cwiseQuotient(g_std.head(r1));
                    a2 += model.growth_basis2.modes *
                          dg.tail(r2).cwiseQuotient(g_std.tail(r2));
                } else if (model.variant == Variant::D) {
                    a1 += din.head(n_el);
                    a2 += din.tail(n_el);
                }
            }
        }

        // State chain: identity + MLP z-input path.
        Vector d_prev = d_state + dxv.head(latent_total).cwiseQuotient(z_std);
        // Controller error and integral paths into the volume component.
        const double derr = dxv[ctrl_off + 1] / ctrl_std[1];
        const double dint = dxv[ctrl_off + 2] / ctrl_std[2];
        d_prev[r] += -derr - kSnapshotDtDays * int_acc;
        int_acc += dint;

        if (full_graph) {
            // Growth window backward: replay the sub-step chain
            // G_{j+1} = G_j + kg (L_k / G_j - lc) h from the stored pre-window
            // state, then run the adjoint through it (total stretches fixed).
            const Index n_sub = growth::growth_substep_count(kSnapshotDtDays);
            const double h = kSnapshotDtDays / static_cast<double>(n_sub);
            Vector dl1 = Vector::Zero(n_el);
            Vector dl2 = Vector::Zero(n_el);
            auto window_backward = [&](const Vector& g0, const Vector& stretch, double kg,
                                       Vector& adjoint, Vector& dl) {
                Matrix chain(n_el, n_sub + 1);
                chain.col(0) = g0;
                for (Index j = 0; j < n_sub; ++j)
                    chain.col(j + 1) =
                        chain.col(j).array() +
                        kg * h * (stretch.array() / chain.col(j).array() - params.lambda_crit);
                for (Index j = n_sub - 1; j >= 0; --j) {
                    dl += adjoint.cwiseProduct((kg * h) * chain.col(j).cwiseInverse());
                    adjoint = adjoint.cwiseProduct(
                        Vector::Ones(n_el) -
                        kg * h * stretch.cwiseQuotient(chain.col(j).cwiseProduct(chain.col(j))));
                }
            };
            window_backward(res.growth1.row(k).transpose(), rollout.trace.stretch1.col(k),
                            params.kg1, a1, dl1);
            window_backward(res.growth2.row(k).transpose(), rollout.trace.stretch2.col(k),
                            params.kg2, a2, dl2);

            Vector du = Vector::Zero(geometry.dof_count());
            accumulate_stretch_gradient(geometry, rollout.trace.tangents[ki], dl1, dl2, du);
            d_prev.head(r) += basis.modes.transpose() * du;
        }

        d_state = std::move(d_prev);
    }
    return grads;
}

Matrix normalize_latent(const NodeModel& model, const Matrix& latent_cols) {
    const Vector z_std = floored(model.stats.z_std);
    return (latent_cols.colwise() - model.stats.z_mean).array().colwise() / z_std.array();
}

fom::SimulationRecord rollout_to_record(const RolloutResult& result,
                                        const sampling::SimulationParams& params,
                                        const sampling::VolumeSchedule& schedule) {
    fom::SimulationRecord rec;
    rec.params = params;
    const Index t_done = result.steps_completed;
    rec.times.assign(schedule.times.begin(), schedule.times.begin() + t_done);
    rec.volumes.resize(static_cast<std::size_t>(t_done));
    for (Index k = 0; k < t_done; ++k)
        rec.volumes[static_cast<std::size_t>(k)] = result.latent(k, result.latent.cols() - 1);
    rec.displacements = result.displacements;
    rec.growth1 = result.growth1;
    rec.growth2 = result.growth2;
    rec.converged = !result.diverged;
    return rec;
}

void save_model(const std::filesystem::path& path, const NodeModel& model,
                const CheckpointInfo& info) {
    io::json meta;
    meta["variant"] = variant_to_string(model.variant);
    meta["latent_dim"] = model.latent_dim;
    meta["d_g"] = model.d_g;
    meta["hidden1"] = model.mlp_spec.hidden1;
    meta["hidden2"] = model.mlp_spec.hidden2;
    meta["cnn_height"] = model.cnn_spec.height;
    meta["cnn_width"] = model.cnn_spec.width;
    meta["seed"] = info.seed;
    meta["epoch"] = info.epoch;
    meta["val_loss"] = info.val_loss;

    std::vector<io::NamedArray> arrays;
    arrays.push_back(io::make_array("mlp_params", model.mlp_params));
    arrays.push_back(io::make_array("z_mean", model.stats.z_mean));
    arrays.push_back(io::make_array("z_std", model.stats.z_std));
    arrays.push_back(io::make_array("cond_mean", model.stats.cond_mean));
    arrays.push_back(io::make_array("cond_std", model.stats.cond_std));
    arrays.push_back(io::make_array("ctrl_mean", model.stats.ctrl_mean));
    arrays.push_back(io::make_array("ctrl_std", model.stats.ctrl_std));
    arrays.push_back(io::make_array("g_mean", model.stats.g_mean));
    arrays.push_back(io::make_array("g_std", model.stats.g_std));
    if (model.variant == Variant::D)
        arrays.push_back(io::make_array("cnn_params", model.cnn_params));
    if (model.variant == Variant::C) {
        arrays.push_back(io::make_array("gb1_mean", model.growth_basis1.mean));
        arrays.push_back(io::make_array("gb1_modes", model.growth_basis1.modes));
        arrays.push_back(io::make_array("gb1_singular", model.growth_basis1.singular_values));
        arrays.push_back(io::make_array("gb2_mean", model.growth_basis2.mean));
        arrays.push_back(io::make_array("gb2_modes", model.growth_basis2.modes));
        arrays.push_back(io::make_array("gb2_singular", model.growth_basis2.singular_values));
    }
    io::write_container(path, meta, arrays);
}

LoadedModel load_model(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    LoadedModel out;
    NodeModel& m = out.model;
    m.variant = variant_from_string(c.meta.at("variant").get<std::string>());
    m.latent_dim = c.meta.at("latent_dim").get<Index>();
    m.d_g = c.meta.at("d_g").get<Index>();
    m.mlp_spec = nn::MlpSpec{m.latent_dim + kConditionDim + kControllerDim + m.d_g,
                             c.meta.at("hidden1").get<Index>(), c.meta.at("hidden2").get<Index>(),
                             m.latent_dim};
    m.mlp_params = c.get("mlp_params").data;
    m.stats.z_mean = c.get("z_mean").data;
    m.stats.z_std = c.get("z_std").data;
    m.stats.cond_mean = c.get("cond_mean").data;
    m.stats.cond_std = c.get("cond_std").data;
    m.stats.ctrl_mean = c.get("ctrl_mean").data;
    m.stats.ctrl_std = c.get("ctrl_std").data;
    m.stats.g_mean = c.get("g_mean").data;
    m.stats.g_std = c.get("g_std").data;
    if (m.variant == Variant::D) {
        m.cnn_spec.height = c.meta.at("cnn_height").get<Index>();
        m.cnn_spec.width = c.meta.at("cnn_width").get<Index>();
        m.cnn_params = c.get("cnn_params").data;
    }
    if (m.variant == Variant::C) {
        auto load_basis = [&](const std::string& tag) {
            pod::PodBasis b;
            b.mean = c.get(tag + "_mean").data;
            b.modes = c.get(tag + "_modes").as_matrix();
            b.singular_values = c.get(tag + "_singular").data;
            b.retained = b.modes.cols();
            return b;
        };
        m.growth_basis1 = load_basis("gb1");
        m.growth_basis2 = load_basis("gb2");
    }
    out.info.seed = c.meta.at("seed").get<std::uint64_t>();
    out.info.epoch = c.meta.at("epoch").get<Index>();
    out.info.val_loss = c.meta.at("val_loss").get<double>();

    if (m.mlp_params.size() != nn::mlp_param_count(m.mlp_spec))
        throw DataError("load_model: parameter vector does not match architecture");
    return out;
}

} // namespace terom::rom
