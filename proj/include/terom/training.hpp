#pragma once

#include "terom/fom.hpp"
#include "terom/pod.hpp"
#include "terom/rom.hpp"
#include "terom/types.hpp"

#include <array>
#include <optional>
#include <vector>

namespace terom::training {

struct LossConfig {
    double lambda_roll = 1.8e-3;
    double lambda_ag = 0.082;
    double cap = 0.033;
    double tail_fraction = 0.30;
    double ag_offset = 10.0; // cm^2
    double huber_beta = 1.0;
};

struct CurriculumStage {
    double v_cap = 700.0; // mL
    double frac_new = 0.0;
    bool uniform = false; // final stage samples equally from all bins
    Index n_epochs = 0;
};

/// Canonical rollout curriculum: caps 200..700 then a uniform stage,
/// frac-new (-,0.45,0.40,0.35,0.35,0.30,uniform), epochs (40x5,60,60).
std::vector<CurriculumStage> canonical_curriculum();

struct EpochPlan {
    Index warmup = 0;
    std::vector<CurriculumStage> stages;

    Index total() const;
    /// Stage owning this post-warmup epoch (0-based over all epochs).
    const CurriculumStage& stage_for_epoch(Index epoch) const;
};

/// Scales the canonical 40 + 320 schedule to a configured total epoch count
/// (largest-remainder rounding, stage order preserved). warmup < 0 derives
/// the warmup share proportionally.
EpochPlan plan_epochs(Index total_epochs, Index warmup = -1);

/// In-memory dataset view used by training and evaluation.
struct Dataset {
    growth::GridGeometry geometry;
    std::vector<fom::SimulationRecord> records;
    std::vector<Index> train_indices; // into records
    std::vector<Index> val_indices;
};

/// Teacher-forced one-step pairs in the MLP input layout. For variant D the
/// feedback block is filled from `growth_images` at evaluation time so the
/// encoder trains jointly.
struct PairSet {
    Matrix inputs;        // in_dim x N (g block zeroed for variant D)
    Matrix state_norm;    // (r+1) x N
    Matrix target_norm;   // (r+1) x N
    Matrix growth_images; // 2E x N, variant D only
    Index count() const { return inputs.cols(); }
};

/// Mean squared one-step error over a pair set (Euler prediction in
/// normalized latent units). No parameter updates.
double one_step_loss(const rom::NodeModel& model, const PairSet& pairs);

/// Tail loss over the normalized latent displacement coefficients (volume
/// excluded): (1/sqrt(T)) * mean smooth-L1 over the last tail fraction.
/// Trajectories are r x T with one column per step.
double tail_loss(const Matrix& pred_z_norm, const Matrix& true_z_norm, const LossConfig& cfg);

/// Start index of the tail window: ceil(0.70 * (T-1)) for tail fraction 0.30.
Index tail_start(Index t_total, const LossConfig& cfg);

/// Relative-error guardrail on the final integrated area gain.
double ag_loss(double pred_final_cm2, double true_final_cm2, const LossConfig& cfg);

/// Cap attenuation factor min(1, c / L) applied to the per-simulation
/// gradient; preserves direction.
double cap_scale(double combined_loss, double cap);

/// Mean over simulations of min(tail + lambda_ag * ag, cap).
double capped_rollout_loss(const std::vector<std::pair<double, double>>& per_sim_tail_ag,
                           const LossConfig& cfg);

/// Volume-binned sampler with per-bin without-replacement queues.
class CurriculumSampler {
public:
    CurriculumSampler(const std::vector<double>& v_final_per_sim, std::uint64_t seed);

    /// Sample `batch` simulation indices for the stage. Draws frac_new from
    /// the cap bin and the rest from lower bins (uniform over remaining
    /// unseen sims); the uniform stage cycles bins equally. Falls back to any
    /// eligible bin when one side is absent; throws DataError when no
    /// eligible simulation exists.
    std::vector<Index> sample(const CurriculumStage& stage, Index batch);

    static constexpr Index kBinCount = 7;
    const std::array<std::vector<Index>, 7>& bins() const { return bins_; }

private:
    Index pop_bin(Index bin);
    std::array<std::vector<Index>, 7> bins_;
    std::array<std::vector<Index>, 7> queues_;
    Rng rng_;
};

struct TrainConfig {
    Index epochs = 360;
    Index warmup = -1; // auto-scale
    double lr = 1e-3;
    Index one_step_batch = 512;
    Index rollout_batch = 40;
    LossConfig loss;
    bool full_graph = false; // differentiate through the growth integrator
    Index jobs = 1;
    std::uint64_t seed = 0;
};

/// Per-epoch diagnostics: one-step losses plus the rollout-loss trio.
/// Rollout fields are NaN during warmup epochs.
struct EpochStats {
    Index epoch = 0;
    double one_step_train = 0.0;
    double one_step_val = 0.0;
    double tail = 0.0;
    double rollout_pre_cap = 0.0;
    double rollout_post_cap = 0.0;
};

struct TrainResult {
    rom::NodeModel model; // best validation one-step checkpoint
    rom::CheckpointInfo best;
    std::vector<EpochStats> history;
};

/// Two-stage training: a one-step pass over all pairs every epoch, then
/// (after warmup) curriculum-sampled closed-loop rollouts optimizing the
/// capped rollout loss. Checkpoints on the best validation one-step loss.
TrainResult train(rom::NodeModel model, const Dataset& dataset, const pod::PodBasis& basis,
                  const TrainConfig& cfg);

/// Normalization statistics and teacher-forced pair construction, exposed for
/// tests. Growth trajectories are regenerated through the POD decode so the
/// feedback features match what rollouts will see.
void fit_normalization(rom::NodeModel& model, const Dataset& dataset, const pod::PodBasis& basis);

PairSet build_pairs(const rom::NodeModel& model, const Dataset& dataset,
                    const pod::PodBasis& basis, const std::vector<Index>& record_indices);

/// Latent trajectory of one record: rows are steps, columns z then volume.
Matrix latent_trajectory(const pod::PodBasis& basis, const fom::SimulationRecord& record);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochStats>& history);

} // namespace terom::training
