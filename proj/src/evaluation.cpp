#include "terom/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

namespace terom::eval {

namespace {

double wall_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void run_parallel(Index n, Index jobs, const std::function<void(Index)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> workers;
    const Index n_workers = std::min<Index>(jobs, n);
    for (Index w = 0; w < n_workers; ++w)
        workers.emplace_back([&] {
            for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : workers) t.join();
}

} // namespace

double displacement_rmse(const Vector& pred, const Vector& truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("displacement_rmse: dimension mismatch");
    return std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size()));
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = h - std::floor(h);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

RmseCurve rmse_curves(const std::vector<rom::RolloutResult>& rollouts,
                      const std::vector<const fom::SimulationRecord*>& records) {
    if (rollouts.size() != records.size() || rollouts.empty())
        throw std::invalid_argument("rmse_curves: rollouts and records must match");

    Index t_max = 0;
    for (const auto* r : records) t_max = std::max(t_max, r->n_steps());

    RmseCurve curve;
    for (Index k = 0; k < t_max; ++k) {
        std::vector<double> samples;
        for (std::size_t i = 0; i < rollouts.size(); ++i) {
            if (records[i]->n_steps() <= k || rollouts[i].steps_completed <= k) continue;
            samples.push_back(displacement_rmse(rollouts[i].displacements.row(k).transpose(),
                                                records[i]->displacements.row(k).transpose()));
        }
        if (samples.empty()) {
            if (k == 0) throw DataError("rmse_curves: no simulation alive at t = 0");
            break;
        }
        curve.times.push_back(static_cast<double>(k) * kSnapshotDtDays);
        curve.median.push_back(quantile(samples, 0.5));
        curve.q10.push_back(quantile(samples, 0.1));
        curve.q90.push_back(quantile(samples, 0.9));
        curve.alive.push_back(static_cast<Index>(samples.size()));
    }
    return curve;
}

double tolerance_envelope(double ag_true_cm2) {
    return std::max(5.0, std::sqrt(std::max(0.0, ag_true_cm2)));
}

EnvelopeReport envelope_report(const std::vector<std::pair<double, double>>& true_pred_pairs) {
    if (true_pred_pairs.empty()) throw std::invalid_argument("envelope_report: empty input");
    EnvelopeReport report;
    Index n_within = 0;
    for (const auto& [ag_true, ag_pred] : true_pred_pairs) {
        EnvelopePair p;
        p.ag_true = ag_true;
        p.ag_pred = ag_pred;
        p.tolerance = tolerance_envelope(ag_true);
        p.within = std::abs(ag_pred - ag_true) <= p.tolerance;
        if (p.within) ++n_within;
        report.pairs.push_back(p);
    }
    report.fraction_within =
        static_cast<double>(n_within) / static_cast<double>(true_pred_pairs.size());
    return report;
}

BenchmarkReport benchmark(const rom::NodeModel& model, const pod::PodBasis& basis,
                          const growth::GridGeometry& geometry,
                          const std::vector<sampling::SimulationParams>& params_set,
                          const fom::SolveOptions& fom_options) {
    if (params_set.empty()) throw std::invalid_argument("benchmark: empty parameter set");
    BenchmarkReport report;
    report.n_rollouts = static_cast<Index>(params_set.size());

    // ROM side: schedule construction, initial projection, and the full
    // decoded rollout all count toward the per-simulation time.
    const Vector u0 = Vector::Zero(geometry.dof_count());
    std::vector<double> rom_times;
    for (const auto& p : params_set) {
        const double t0 = wall_seconds();
        const auto schedule = sampling::build_volume_schedule(p);
        const auto init = rom::initial_state(basis, u0);
        const auto result = rom::rollout(model, basis, geometry, p, schedule, init);
        (void)result;
        rom_times.push_back(wall_seconds() - t0);
    }
    double mean = 0.0;
    for (double t : rom_times) mean += t;
    mean /= static_cast<double>(rom_times.size());
    double var = 0.0;
    for (double t : rom_times) var += (t - mean) * (t - mean);
    var /= static_cast<double>(rom_times.size());
    report.rom_mean_s = mean;
    report.rom_std_s = std::sqrt(var);

    double fom_total = 0.0;
    for (const auto& p : params_set) {
        const double t0 = wall_seconds();
        const auto schedule = sampling::build_volume_schedule(p);
        const auto rec = fom::simulate(p, geometry, schedule, fom_options);
        (void)rec;
        fom_total += wall_seconds() - t0;
    }
    report.fom_mean_s = fom_total / static_cast<double>(params_set.size());
    report.speedup = report.fom_mean_s / report.rom_mean_s;
    return report;
}

EvaluationReport evaluate_records(const rom::NodeModel& model, const pod::PodBasis& basis,
                                  const training::Dataset& dataset,
                                  const std::vector<Index>& record_indices, Index jobs) {
    if (record_indices.empty()) throw DataError("evaluate_records: nothing to evaluate");

    const auto n = static_cast<Index>(record_indices.size());
    std::vector<rom::RolloutResult> rollouts(static_cast<std::size_t>(n));
    std::vector<const fom::SimulationRecord*> records(static_cast<std::size_t>(n));

    run_parallel(n, jobs, [&](Index i) {
        const auto& rec =
            dataset.records[static_cast<std::size_t>(record_indices[static_cast<std::size_t>(i)])];
        records[static_cast<std::size_t>(i)] = &rec;
        const auto schedule = sampling::build_volume_schedule(rec.params);
        rom::AugmentedLatentState init;
        init.z = pod::project(basis, rec.displacements.row(0).transpose());
        init.volume = rec.volumes[0];
        rollouts[static_cast<std::size_t>(i)] =
            rom::rollout(model, basis, dataset.geometry, rec.params, schedule, init);
    });

    EvaluationReport report;
    std::vector<double> final_rmse;
    std::vector<std::pair<double, double>> ag_pairs;
    for (Index i = 0; i < n; ++i) {
        const auto& rec = *records[static_cast<std::size_t>(i)];
        const auto& roll = rollouts[static_cast<std::size_t>(i)];
        const Index t_total = rec.n_steps();

        EvaluationRow row;
        row.record_id = record_indices[static_cast<std::size_t>(i)];
        row.v_final = rec.params.v_final;
        row.n_steps = t_total;
        row.diverged = roll.diverged || roll.steps_completed != t_total;

        const Index t_last = std::min(roll.steps_completed, t_total) - 1;
        row.final_rmse =
            t_last >= 0 ? displacement_rmse(roll.displacements.row(t_last).transpose(),
                                            rec.displacements.row(t_last).transpose())
                        : std::numeric_limits<double>::quiet_NaN();

        growth::GrowthState true_final{rec.growth1.row(t_total - 1).transpose(),
                                       rec.growth2.row(t_total - 1).transpose()};
        row.ag_true = growth::area_gain(dataset.geometry, true_final);
        row.ag_pred = roll.final_area_gain;
        row.tolerance = tolerance_envelope(row.ag_true);
        row.within = std::abs(row.ag_pred - row.ag_true) <= row.tolerance;

        final_rmse.push_back(row.final_rmse);
        ag_pairs.emplace_back(row.ag_true, row.ag_pred);
        report.rows.push_back(row);
    }

    report.curve = rmse_curves(rollouts, records);
    report.median_final_rmse = quantile(final_rmse, 0.5);
    report.fraction_within = envelope_report(ag_pairs).fraction_within;
    return report;
}

} // namespace terom::eval
