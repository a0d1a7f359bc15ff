#include "terom/training.hpp"

#include "terom/io.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace terom::training {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
    return mix64(seed * 0x100000001b3ULL + tag);
}

void run_parallel(Index n, Index jobs, const std::function<void(Index)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> workers;
    const Index n_workers = std::min<Index>(jobs, n);
    workers.reserve(static_cast<std::size_t>(n_workers));
    for (Index w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
            for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

double smooth_l1(double delta, double beta) {
    const double a = std::abs(delta);
    return a < beta ? 0.5 * delta * delta / beta : a - 0.5 * beta;
}

double smooth_l1_deriv(double delta, double beta) {
    return std::abs(delta) < beta ? delta / beta : (delta > 0.0 ? 1.0 : -1.0);
}

/// Post-update teacher-forced growth states, one column per transition
/// (k = 0..T-2). Displacements pass through the POD decode so feedback
/// features match closed-loop rollout conditions.
std::pair<Matrix, Matrix> teacher_forced_growth(const growth::GridGeometry& geometry,
                                                const pod::PodBasis& basis,
                                                const fom::SimulationRecord& record) {
    const Index t_total = record.n_steps();
    const Index n_el = geometry.element_count();
    Matrix g1(n_el, t_total - 1), g2(n_el, t_total - 1);
    growth::GrowthState gs = growth::GrowthState::unit(n_el);
    for (Index k = 0; k + 1 < t_total; ++k) {
        const Vector u = pod::reconstruct(basis, pod::project(basis, record.displacements.row(k).transpose()));
        const auto stretches = growth::compute_stretches(geometry, u);
        gs = growth::advance_growth(gs, stretches, record.params, kSnapshotDtDays);
        g1.col(k) = gs.lambda1_g;
        g2.col(k) = gs.lambda2_g;
    }
    return {std::move(g1), std::move(g2)};
}

/// Controller terms at every transition of a record, from the stored volume
/// history. The setpoint is the one driving the transition (S at t_{k+1},
/// which the implicitly coupled controller realizes at snapshot k+1);
/// err_k = S - V_k and the integral is the left-Riemann sum of err.
Matrix controller_inputs_for_record(const fom::SimulationRecord& record,
                                    const sampling::VolumeSchedule& schedule) {
    const Index t_total = record.n_steps();
    Matrix ctrl(3, t_total - 1);
    double integral = 0.0;
    for (Index k = 0; k + 1 < t_total; ++k) {
        const double setpoint = schedule.setpoints[static_cast<std::size_t>(k + 1)];
        const double err = setpoint - record.volumes[static_cast<std::size_t>(k)];
        ctrl(0, k) = setpoint;
        ctrl(1, k) = err;
        ctrl(2, k) = integral;
        integral += err * kSnapshotDtDays;
    }
    return ctrl;
}

struct MeanStd {
    Vector mean, std;
};

MeanStd column_stats(const Matrix& cols) {
    MeanStd out;
    out.mean = cols.rowwise().mean();
    const Matrix centered = cols.colwise() - out.mean;
    out.std = (centered.cwiseProduct(centered).rowwise().mean()).cwiseSqrt();
    return out;
}

constexpr Index kCnnChunk = 64;

struct BatchGrads {
    Vector mlp, cnn;
    double loss_sum = 0.0;
};

/// Forward (and optionally backward) of one contiguous pair chunk. Gradient
/// is of the summed squared error; the caller divides by the batch size.
double one_step_chunk(const rom::NodeModel& model, const PairSet& pairs,
                      const std::vector<Index>& order, Index begin, Index end, double inv_batch,
                      BatchGrads* grads) {
    const Index n = end - begin;
    const Index in_dim = model.input_dim();
    const Index out_dim = model.latent_dim;

    Matrix x(in_dim, n), s(out_dim, n), y(out_dim, n);
    for (Index i = 0; i < n; ++i) {
        const Index p = order[static_cast<std::size_t>(begin + i)];
        x.col(i) = pairs.inputs.col(p);
        s.col(i) = pairs.state_norm.col(p);
        y.col(i) = pairs.target_norm.col(p);
    }

    std::vector<nn::CnnTape> cnn_tapes;
    if (model.variant == rom::Variant::D) {
        cnn_tapes.resize(grads ? static_cast<std::size_t>(n) : 0);
        for (Index i = 0; i < n; ++i) {
            const Index p = order[static_cast<std::size_t>(begin + i)];
            nn::CnnTape* tape = grads ? &cnn_tapes[static_cast<std::size_t>(i)] : nullptr;
            x.col(i).tail(model.d_g) = nn::cnn_forward(model.cnn_spec, model.cnn_params,
                                                       pairs.growth_images.col(p), tape);
        }
    }

    nn::MlpTape tape;
    const Matrix f = nn::mlp_forward(model.mlp_spec, model.mlp_params, x, grads ? &tape : nullptr);
    const Matrix pred = s + f * kSnapshotDtDays;
    const Matrix diff = pred - y;
    const double loss_sum = diff.squaredNorm();

    if (grads) {
        const Matrix d_out = (2.0 * inv_batch * kSnapshotDtDays) * diff;
        const Matrix dx = nn::mlp_backward(model.mlp_spec, model.mlp_params, tape, d_out, grads->mlp);
        if (model.variant == rom::Variant::D) {
            for (Index i = 0; i < n; ++i) {
                nn::cnn_backward(model.cnn_spec, model.cnn_params, cnn_tapes[static_cast<std::size_t>(i)],
                                 dx.col(i).tail(model.d_g), grads->cnn);
            }
        }
        grads->loss_sum += loss_sum;
    }
    return loss_sum;
}

} // namespace

std::vector<CurriculumStage> canonical_curriculum() {
    return {
        {200.0, 1.00, false, 40}, {300.0, 0.45, false, 40}, {400.0, 0.40, false, 40},
        {500.0, 0.35, false, 40}, {600.0, 0.35, false, 40}, {700.0, 0.30, false, 60},
        {700.0, 0.00, true, 60},
    };
}

Index EpochPlan::total() const {
    Index n = warmup;
    for (const auto& s : stages) n += s.n_epochs;
    return n;
}

const CurriculumStage& EpochPlan::stage_for_epoch(Index epoch) const {
    Index at = warmup;
    for (const auto& s : stages) {
        at += s.n_epochs;
        if (epoch < at && s.n_epochs > 0) return s;
    }
    for (auto it = stages.rbegin(); it != stages.rend(); ++it)
        if (it->n_epochs > 0) return *it;
    throw ConfigError("epoch plan has no curriculum stages");
}

EpochPlan plan_epochs(Index total_epochs, Index warmup) {
    if (total_epochs < 1) throw ConfigError("plan_epochs: need at least one epoch");
    EpochPlan plan;
    plan.stages = canonical_curriculum();
    if (total_epochs == 360 && (warmup < 0 || warmup == 40)) {
        plan.warmup = 40;
        return plan;
    }
    plan.warmup = warmup >= 0
                      ? warmup
                      : static_cast<Index>(std::llround(static_cast<double>(total_epochs) * 40.0 / 360.0));
    plan.warmup = std::min(plan.warmup, total_epochs);
    const Index curriculum_total = total_epochs - plan.warmup;

    // Largest-remainder apportionment against the canonical stage weights.
    const double canon_total = 320.0;
    std::vector<double> exact(plan.stages.size());
    Index assigned = 0;
    for (std::size_t i = 0; i < plan.stages.size(); ++i) {
        exact[i] = static_cast<double>(curriculum_total) *
                   static_cast<double>(plan.stages[i].n_epochs) / canon_total;
        plan.stages[i].n_epochs = static_cast<Index>(std::floor(exact[i]));
        assigned += plan.stages[i].n_epochs;
    }
    std::vector<std::size_t> by_frac(plan.stages.size());
    std::iota(by_frac.begin(), by_frac.end(), 0);
    std::stable_sort(by_frac.begin(), by_frac.end(), [&](std::size_t a, std::size_t b) {
        return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
    });
    for (std::size_t j = 0; assigned < curriculum_total; ++j, ++assigned)
        plan.stages[by_frac[j % plan.stages.size()]].n_epochs += 1;
    return plan;
}

double one_step_loss(const rom::NodeModel& model, const PairSet& pairs) {
    const Index n = pairs.count();
    if (n == 0) throw std::invalid_argument("one_step_loss: empty batch");
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    double sum = 0.0;
    for (Index at = 0; at < n; at += kCnnChunk)
        sum += one_step_chunk(model, pairs, order, at, std::min(n, at + kCnnChunk), 0.0, nullptr);
    return sum / static_cast<double>(n);
}

Index tail_start(Index t_total, const LossConfig& cfg) {
    return static_cast<Index>(
        std::ceil((1.0 - cfg.tail_fraction) * static_cast<double>(t_total - 1) - 1e-12));
}

double tail_loss(const Matrix& pred_z_norm, const Matrix& true_z_norm, const LossConfig& cfg) {
    if (pred_z_norm.rows() != true_z_norm.rows() || pred_z_norm.cols() != true_z_norm.cols())
        throw std::invalid_argument("tail_loss: trajectory shape mismatch");
    const Index t_total = pred_z_norm.cols();
    if (t_total < 4) throw std::invalid_argument("tail_loss: need at least 4 steps");
    const Index t0 = tail_start(t_total, cfg);
    const auto r = static_cast<double>(pred_z_norm.rows());

    double acc = 0.0;
    for (Index k = t0; k < t_total; ++k) {
        double step = 0.0;
        for (Index d = 0; d < pred_z_norm.rows(); ++d)
            step += smooth_l1(pred_z_norm(d, k) - true_z_norm(d, k), cfg.huber_beta);
        acc += step / r;
    }
    return acc / (std::sqrt(static_cast<double>(t_total)) * static_cast<double>(t_total - t0));
}

double ag_loss(double pred_final_cm2, double true_final_cm2, const LossConfig& cfg) {
    const double rel = (pred_final_cm2 - true_final_cm2) / (true_final_cm2 + cfg.ag_offset);
    return rel * rel;
}

double cap_scale(double combined_loss, double cap) {
    return combined_loss > cap ? cap / combined_loss : 1.0;
}

double capped_rollout_loss(const std::vector<std::pair<double, double>>& per_sim_tail_ag,
                           const LossConfig& cfg) {
    if (per_sim_tail_ag.empty())
        throw std::invalid_argument("capped_rollout_loss: empty batch");
    double acc = 0.0;
    for (const auto& [tail, ag] : per_sim_tail_ag)
        acc += std::min(tail + cfg.lambda_ag * ag, cfg.cap);
    return acc / static_cast<double>(per_sim_tail_ag.size());
}

CurriculumSampler::CurriculumSampler(const std::vector<double>& v_final_per_sim,
                                     std::uint64_t seed)
    : rng_(seed) {
    for (std::size_t i = 0; i < v_final_per_sim.size(); ++i) {
        const Index bin = sampling::stage_count(v_final_per_sim[i]) - 1;
        if (bin < 0 || bin >= kBinCount)
            throw DataError("curriculum sampler: v_final outside the 100..700 bins");
        bins_[static_cast<std::size_t>(bin)].push_back(static_cast<Index>(i));
    }
}

Index CurriculumSampler::pop_bin(Index bin) {
    auto& queue = queues_[static_cast<std::size_t>(bin)];
    if (queue.empty()) {
        queue = bins_[static_cast<std::size_t>(bin)];
        rng_.shuffle(queue);
    }
    const Index id = queue.back();
    queue.pop_back();
    return id;
}

std::vector<Index> CurriculumSampler::sample(const CurriculumStage& stage, Index batch) {
    const Index cap_bin = sampling::stage_count(stage.v_cap) - 1;
    std::vector<Index> eligible;
    for (Index b = 0; b <= cap_bin; ++b)
        if (!bins_[static_cast<std::size_t>(b)].empty()) eligible.push_back(b);
    if (eligible.empty()) throw DataError("curriculum sampler: no eligible simulations");

    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(batch));

    if (stage.uniform) {
        // Final stage: cycle the populated bins so each contributes equally.
        for (Index i = 0; i < batch; ++i)
            out.push_back(pop_bin(eligible[static_cast<std::size_t>(
                i % static_cast<Index>(eligible.size()))]));
        return out;
    }

    const bool has_new = !bins_[static_cast<std::size_t>(cap_bin)].empty();
    std::vector<Index> lower;
    for (Index b : eligible)
        if (b < cap_bin) lower.push_back(b);

    Index n_new = static_cast<Index>(std::llround(stage.frac_new * static_cast<double>(batch)));
    if (lower.empty()) n_new = batch;
    if (!has_new) n_new = 0;

    for (Index i = 0; i < n_new; ++i) out.push_back(pop_bin(cap_bin));

    // Remaining draws: uniform over the not-yet-seen sims across lower bins.
    for (Index i = n_new; i < batch; ++i) {
        Index total_remaining = 0;
        for (Index b : lower) {
            if (queues_[static_cast<std::size_t>(b)].empty())
                queues_[static_cast<std::size_t>(b)] = bins_[static_cast<std::size_t>(b)];
            total_remaining += static_cast<Index>(queues_[static_cast<std::size_t>(b)].size());
        }
        Index pick = static_cast<Index>(rng_.integer(static_cast<std::uint64_t>(total_remaining)));
        for (Index b : lower) {
            const auto sz = static_cast<Index>(queues_[static_cast<std::size_t>(b)].size());
            if (pick < sz) {
                // Queue was shuffled on refill; swap-remove the picked slot.
                auto& q = queues_[static_cast<std::size_t>(b)];
                std::swap(q[static_cast<std::size_t>(pick)], q.back());
                out.push_back(q.back());
                q.pop_back();
                break;
            }
            pick -= sz;
        }
    }
    return out;
}

Matrix latent_trajectory(const pod::PodBasis& basis, const fom::SimulationRecord& record) {
    const Index t_total = record.n_steps();
    Matrix traj(t_total, basis.retained + 1);
    const Matrix z = pod::project_all(basis, record.displacements.transpose());
    traj.leftCols(basis.retained) = z.transpose();
    for (Index k = 0; k < t_total; ++k)
        traj(k, basis.retained) = record.volumes[static_cast<std::size_t>(k)];
    return traj;
}

void fit_normalization(rom::NodeModel& model, const Dataset& dataset, const pod::PodBasis& basis) {
    const Index r1 = model.latent_dim;
    std::vector<Vector> z_cols, ctrl_cols, cond_cols, g_cols;

    for (Index idx : dataset.train_indices) {
        const auto& rec = dataset.records[static_cast<std::size_t>(idx)];
        const auto schedule = sampling::build_volume_schedule(rec.params);
        const Matrix traj = latent_trajectory(basis, rec);
        for (Index k = 0; k < traj.rows(); ++k) z_cols.push_back(traj.row(k).transpose());
        const Matrix ctrl = controller_inputs_for_record(rec, schedule);
        for (Index k = 0; k < ctrl.cols(); ++k) ctrl_cols.push_back(ctrl.col(k));
        cond_cols.push_back(rom::conditioning_vector(rec.params));

        if (model.variant == rom::Variant::B || model.variant == rom::Variant::C) {
            Matrix g1, g2;
            try {
                std::tie(g1, g2) = teacher_forced_growth(dataset.geometry, basis, rec);
            } catch (const NumericError&) {
                continue; // not replayable through the basis; see build_pairs
            }
            for (Index k = 0; k < g1.cols(); ++k) {
                growth::GrowthState gs{g1.col(k), g2.col(k)};
                if (model.variant == rom::Variant::B) {
                    Vector g(1);
                    g[0] = growth::area_gain(dataset.geometry, gs);
                    g_cols.push_back(g);
                } else {
                    Vector g(model.d_g);
                    g.head(model.growth_basis1.retained) =
                        pod::project(model.growth_basis1, gs.lambda1_g);
                    g.tail(model.growth_basis2.retained) =
                        pod::project(model.growth_basis2, gs.lambda2_g);
                    g_cols.push_back(g);
                }
            }
        }
    }
    if (z_cols.empty()) throw DataError("fit_normalization: no training records");

    auto stack = [](const std::vector<Vector>& cols) {
        Matrix m(cols.front().size(), static_cast<Index>(cols.size()));
        for (std::size_t i = 0; i < cols.size(); ++i) m.col(static_cast<Index>(i)) = cols[i];
        return m;
    };

    const MeanStd zs = column_stats(stack(z_cols));
    model.stats.z_mean = zs.mean;
    model.stats.z_std = zs.std;
    if (model.stats.z_mean.size() != r1)
        throw DataError("fit_normalization: latent dimension mismatch");
    const MeanStd cs = column_stats(stack(ctrl_cols));
    model.stats.ctrl_mean = cs.mean;
    model.stats.ctrl_std = cs.std;
    const MeanStd ps = column_stats(stack(cond_cols));
    model.stats.cond_mean = ps.mean;
    model.stats.cond_std = ps.std;
    if (!g_cols.empty()) {
        const MeanStd gs = column_stats(stack(g_cols));
        model.stats.g_mean = gs.mean;
        model.stats.g_std = gs.std;
    }
}

PairSet build_pairs(const rom::NodeModel& model, const Dataset& dataset,
                    const pod::PodBasis& basis, const std::vector<Index>& record_indices) {
    const Index r = basis.retained;
    Index n_pairs = 0;
    for (Index idx : record_indices)
        n_pairs += dataset.records[static_cast<std::size_t>(idx)].n_steps() - 1;

    PairSet set;
    set.inputs.resize(model.input_dim(), n_pairs);
    set.state_norm.resize(model.latent_dim, n_pairs);
    set.target_norm.resize(model.latent_dim, n_pairs);
    if (model.variant == rom::Variant::D)
        set.growth_images.resize(2 * dataset.geometry.element_count(), n_pairs);

    const Vector zero_g = Vector::Zero(model.d_g);
    Index at = 0;
    for (Index idx : record_indices) {
        const auto& rec = dataset.records[static_cast<std::size_t>(idx)];
        const auto schedule = sampling::build_volume_schedule(rec.params);
        const Matrix traj = latent_trajectory(basis, rec);
        const Matrix ctrl = controller_inputs_for_record(rec, schedule);
        const Vector cond = rom::conditioning_vector(rec.params);

        Matrix tf1, tf2;
        if (model.variant != rom::Variant::A) {
            try {
                auto tf = teacher_forced_growth(dataset.geometry, basis, rec);
                tf1 = std::move(tf.first);
                tf2 = std::move(tf.second);
            } catch (const NumericError&) {
                // The growth replay through the truncated basis collapsed:
                // the record cannot be teacher-forced, so it contributes no
                // one-step pairs (rollout evaluation still covers it).
                continue;
            }
        }

        const Matrix traj_norm =
            rom::normalize_latent(model, traj.transpose());
        for (Index k = 0; k + 1 < rec.n_steps(); ++k, ++at) {
            Vector g = zero_g;
            if (model.variant == rom::Variant::B || model.variant == rom::Variant::C) {
                growth::GrowthState gs{tf1.col(k), tf2.col(k)};
                g = rom::encode_feedback(model, dataset.geometry, gs);
            } else if (model.variant == rom::Variant::D) {
                set.growth_images.col(at).head(tf1.rows()) = tf1.col(k);
                set.growth_images.col(at).tail(tf2.rows()) = tf2.col(k);
            }
            rom::ControllerInputs ci{ctrl(0, k), ctrl(1, k), ctrl(2, k)};
            set.inputs.col(at) =
                rom::assemble_node_input(model, traj.row(k).transpose(), cond, ci, g);
            set.state_norm.col(at) = traj_norm.col(k);
            set.target_norm.col(at) = traj_norm.col(k + 1);
        }
    }
    if (at < n_pairs) {
        set.inputs.conservativeResize(Eigen::NoChange, at);
        set.state_norm.conservativeResize(Eigen::NoChange, at);
        set.target_norm.conservativeResize(Eigen::NoChange, at);
        if (model.variant == rom::Variant::D)
            set.growth_images.conservativeResize(Eigen::NoChange, at);
    }
    return set;
}

namespace {

struct RolloutOutcome {
    double tail = std::numeric_limits<double>::quiet_NaN();
    double ag = std::numeric_limits<double>::quiet_NaN();
    double combined = 0.0;
    bool diverged = false;
    rom::RolloutGradients grads;
};

RolloutOutcome rollout_pass(const rom::NodeModel& model, const Dataset& dataset,
                            const pod::PodBasis& basis, const fom::SimulationRecord& rec,
                            const LossConfig& loss_cfg, double lambda_roll, Index batch,
                            bool full_graph) {
    RolloutOutcome out;
    const auto schedule = sampling::build_volume_schedule(rec.params);
    const Index t_total = rec.n_steps();
    const Index r = basis.retained;

    rom::AugmentedLatentState init;
    init.z = pod::project(basis, rec.displacements.row(0).transpose());
    init.volume = rec.volumes[0];

    auto traced = rom::rollout_traced(model, basis, dataset.geometry, rec.params, schedule, init,
                                      full_graph);
    if (traced.result.diverged || traced.result.steps_completed != t_total) {
        // A diverged rollout exceeded any cap; it contributes the cap value
        // with zero gradient (attenuation scale c / inf).
        out.diverged = true;
        out.combined = loss_cfg.cap;
        out.grads.mlp = Vector::Zero(model.mlp_params.size());
        out.grads.cnn = Vector::Zero(model.cnn_params.size());
        return out;
    }

    const Matrix true_norm =
        rom::normalize_latent(model, latent_trajectory(basis, rec).transpose());
    const Matrix pred_norm = rom::normalize_latent(model, traced.result.latent.transpose());

    out.tail = tail_loss(pred_norm.topRows(r), true_norm.topRows(r), loss_cfg);
    growth::GrowthState true_final{rec.growth1.row(t_total - 1).transpose(),
                                   rec.growth2.row(t_total - 1).transpose()};
    const double ag_true = growth::area_gain(dataset.geometry, true_final);
    const double ag_pred = traced.result.final_area_gain;
    out.ag = ag_loss(ag_pred, ag_true, loss_cfg);
    out.combined = out.tail + loss_cfg.lambda_ag * out.ag;

    const double scale = cap_scale(out.combined, loss_cfg.cap);
    const double weight = lambda_roll * scale / static_cast<double>(batch);

    // Tail-loss gradient in normalized latent coordinates (z dims only).
    Matrix dlatent = Matrix::Zero(model.latent_dim, t_total);
    const Index t0 = tail_start(t_total, loss_cfg);
    const double tail_norm = 1.0 / (std::sqrt(static_cast<double>(t_total)) *
                                    static_cast<double>(t_total - t0) * static_cast<double>(r));
    for (Index k = t0; k < t_total; ++k)
        for (Index d = 0; d < r; ++d)
            dlatent(d, k) = weight * tail_norm *
                            smooth_l1_deriv(pred_norm(d, k) - true_norm(d, k), loss_cfg.huber_beta);

    double d_ag = 0.0;
    if (full_graph) {
        d_ag = weight * loss_cfg.lambda_ag * 2.0 * (ag_pred - ag_true) /
               ((ag_true + loss_cfg.ag_offset) * (ag_true + loss_cfg.ag_offset));
    }

    out.grads = rom::rollout_backward(model, basis, dataset.geometry, rec.params, schedule, traced,
                                      dlatent, d_ag);
    return out;
}

} // namespace

TrainResult train(rom::NodeModel model, const Dataset& dataset, const pod::PodBasis& basis,
                  const TrainConfig& cfg) {
    if (dataset.train_indices.empty() || dataset.val_indices.empty())
        throw DataError("train: dataset must provide train and validation records");

    const EpochPlan plan = plan_epochs(cfg.epochs, cfg.warmup);
    fit_normalization(model, dataset, basis);
    const PairSet train_pairs = build_pairs(model, dataset, basis, dataset.train_indices);
    const PairSet val_pairs = build_pairs(model, dataset, basis, dataset.val_indices);

    std::vector<double> train_v_finals;
    for (Index idx : dataset.train_indices)
        train_v_finals.push_back(dataset.records[static_cast<std::size_t>(idx)].params.v_final);
    CurriculumSampler sampler(train_v_finals, stream_seed(cfg.seed, 0xCU));

    nn::AdamState mlp_opt, cnn_opt;
    nn::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

    TrainResult result;
    result.best.seed = cfg.seed;
    result.best.val_loss = std::numeric_limits<double>::infinity();
    Vector best_mlp = model.mlp_params;
    Vector best_cnn = model.cnn_params;

    const Index n_pairs = train_pairs.count();
    std::vector<Index> order(static_cast<std::size_t>(n_pairs));
    std::iota(order.begin(), order.end(), Index{0});

    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;

        // Stage 1: one-step pass over every training pair.
        Rng shuffle_rng(stream_seed(cfg.seed, 0x51ULL * static_cast<std::uint64_t>(epoch + 1)));
        shuffle_rng.shuffle(order);

        double epoch_loss_sum = 0.0;
        for (Index begin = 0; begin < n_pairs; begin += cfg.one_step_batch) {
            const Index end = std::min(n_pairs, begin + cfg.one_step_batch);
            const double inv_batch = 1.0 / static_cast<double>(end - begin);

            const Index n_chunks = (end - begin + kCnnChunk - 1) / kCnnChunk;
            std::vector<BatchGrads> chunk_grads(static_cast<std::size_t>(n_chunks));
            run_parallel(n_chunks, cfg.jobs, [&](Index c) {
                auto& bg = chunk_grads[static_cast<std::size_t>(c)];
                bg.mlp = Vector::Zero(model.mlp_params.size());
                bg.cnn = Vector::Zero(model.cnn_params.size());
                const Index c_begin = begin + c * kCnnChunk;
                const Index c_end = std::min(end, c_begin + kCnnChunk);
                one_step_chunk(model, train_pairs, order, c_begin, c_end, inv_batch, &bg);
            });

            Vector g_mlp = Vector::Zero(model.mlp_params.size());
            Vector g_cnn = Vector::Zero(model.cnn_params.size());
            double batch_loss = 0.0;
            for (const auto& bg : chunk_grads) {
                g_mlp += bg.mlp;
                g_cnn += bg.cnn;
                batch_loss += bg.loss_sum;
            }
            epoch_loss_sum += batch_loss;
            nn::adam_step(model.mlp_params, g_mlp, mlp_opt, adam);
            if (model.variant == rom::Variant::D) nn::adam_step(model.cnn_params, g_cnn, cnn_opt, adam);
        }
        stats.one_step_train = epoch_loss_sum / static_cast<double>(n_pairs);
        if (!std::isfinite(stats.one_step_train))
            throw NumericError("train: non-finite one-step loss at epoch " + std::to_string(epoch));

        // Stage 2: curriculum rollouts with the capped objective.
        if (epoch >= plan.warmup) {
            const CurriculumStage& stage = plan.stage_for_epoch(epoch);
            const auto picks = sampler.sample(stage, cfg.rollout_batch);
            std::vector<RolloutOutcome> outcomes(picks.size());
            run_parallel(static_cast<Index>(picks.size()), cfg.jobs, [&](Index i) {
                const Index rec_idx =
                    dataset.train_indices[static_cast<std::size_t>(picks[static_cast<std::size_t>(i)])];
                outcomes[static_cast<std::size_t>(i)] = rollout_pass(
                    model, dataset, basis, dataset.records[static_cast<std::size_t>(rec_idx)],
                    cfg.loss, cfg.loss.lambda_roll, static_cast<Index>(picks.size()),
                    cfg.full_graph);
            });

            Vector g_mlp = Vector::Zero(model.mlp_params.size());
            Vector g_cnn = Vector::Zero(model.cnn_params.size());
            double tail_sum = 0.0, pre_sum = 0.0, post_sum = 0.0;
            Index tail_count = 0;
            for (const auto& oc : outcomes) {
                g_mlp += oc.grads.mlp;
                g_cnn += oc.grads.cnn;
                if (!oc.diverged) {
                    tail_sum += oc.tail;
                    ++tail_count;
                }
                pre_sum += oc.combined;
                post_sum += std::min(oc.combined, cfg.loss.cap);
            }
            stats.tail = tail_count > 0 ? tail_sum / static_cast<double>(tail_count)
                                        : std::numeric_limits<double>::quiet_NaN();
            stats.rollout_pre_cap = pre_sum / static_cast<double>(outcomes.size());
            stats.rollout_post_cap = post_sum / static_cast<double>(outcomes.size());
            nn::adam_step(model.mlp_params, g_mlp, mlp_opt, adam);
            if (model.variant == rom::Variant::D) nn::adam_step(model.cnn_params, g_cnn, cnn_opt, adam);
        } else {
            stats.tail = std::numeric_limits<double>::quiet_NaN();
            stats.rollout_pre_cap = std::numeric_limits<double>::quiet_NaN();
            stats.rollout_post_cap = std::numeric_limits<double>::quiet_NaN();
        }

        stats.one_step_val = one_step_loss(model, val_pairs);
        if (!std::isfinite(stats.one_step_val))
            throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
        if (stats.one_step_val < result.best.val_loss) {
            result.best.val_loss = stats.one_step_val;
            result.best.epoch = epoch;
            best_mlp = model.mlp_params;
            best_cnn = model.cnn_params;
        }
        result.history.push_back(stats);
    }

    model.mlp_params = best_mlp;
    model.cnn_params = best_cnn;
    result.model = std::move(model);
    return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochStats>& history) {
    std::vector<std::vector<double>> rows;
    rows.reserve(history.size());
    for (const auto& h : history)
        rows.push_back({static_cast<double>(h.epoch), h.one_step_train, h.one_step_val, h.tail,
                        h.rollout_pre_cap, h.rollout_post_cap});
    io::write_csv(path,
                  {"epoch", "one_step_train", "one_step_val", "tail", "rollout_pre_cap",
                   "rollout_post_cap"},
                  rows);
}

} // namespace terom::training
