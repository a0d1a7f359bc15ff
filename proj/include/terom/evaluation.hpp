#pragma once

#include "terom/pod.hpp"
#include "terom/rom.hpp"
#include "terom/training.hpp"
#include "terom/types.hpp"

#include <vector>

namespace terom::eval {

/// Root-mean-square displacement error over all 3G^2 components, mm.
double displacement_rmse(const Vector& pred, const Vector& truth);

/// Linear-interpolation quantile of a sample set (numpy convention).
double quantile(std::vector<double> values, double q);

struct RmseCurve {
    std::vector<double> times;  // days
    std::vector<double> median; // mm
    std::vector<double> q10;
    std::vector<double> q90;
    std::vector<Index> alive;   // simulations contributing at each time
};

/// Per-time-step RMSE quantiles over the simulations whose schedule reaches
/// that time. Rollouts and records are matched by position.
RmseCurve rmse_curves(const std::vector<rom::RolloutResult>& rollouts,
                      const std::vector<const fom::SimulationRecord*>& records);

/// Clinical tolerance on the final area gain: max(5 cm^2, sqrt(true gain)),
/// negative true gains floored at zero inside the root.
double tolerance_envelope(double ag_true_cm2);

struct EnvelopePair {
    double ag_true = 0.0;
    double ag_pred = 0.0;
    double tolerance = 0.0;
    bool within = false;
};

struct EnvelopeReport {
    std::vector<EnvelopePair> pairs;
    double fraction_within = 0.0;
};

EnvelopeReport envelope_report(const std::vector<std::pair<double, double>>& true_pred_pairs);

struct BenchmarkReport {
    double rom_mean_s = 0.0;
    double rom_std_s = 0.0;
    double fom_mean_s = 0.0;
    double speedup = 0.0;
    Index n_rollouts = 0;
};

/// Wall-clock per-rollout timing (setup included, fields formed in memory,
/// no disk writes) against full-order simulation on the same parameter sets.
BenchmarkReport benchmark(const rom::NodeModel& model, const pod::PodBasis& basis,
                          const growth::GridGeometry& geometry,
                          const std::vector<sampling::SimulationParams>& params_set,
                          const fom::SolveOptions& fom_options = {});

struct EvaluationRow {
    Index record_id = 0;
    double v_final = 0.0;
    Index n_steps = 0;
    double final_rmse = 0.0;
    double ag_true = 0.0;
    double ag_pred = 0.0;
    double tolerance = 0.0;
    bool within = false;
    bool diverged = false;
};

struct EvaluationReport {
    std::vector<EvaluationRow> rows;
    RmseCurve curve;
    double median_final_rmse = 0.0;
    double fraction_within = 0.0;
};

/// Roll the model out on every listed record and aggregate accuracy metrics.
EvaluationReport evaluate_records(const rom::NodeModel& model, const pod::PodBasis& basis,
                                  const training::Dataset& dataset,
                                  const std::vector<Index>& record_indices, Index jobs = 1);

} // namespace terom::eval
