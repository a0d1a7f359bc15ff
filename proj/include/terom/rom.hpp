#pragma once

#include "terom/fom.hpp"
#include "terom/growth.hpp"
#include "terom/nn.hpp"
#include "terom/pod.hpp"
#include "terom/sampling.hpp"
#include "terom/types.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace terom::rom {

enum class Variant { A, B, C, D };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

/// Reduced state: POD displacement coefficients plus cavity volume.
struct AugmentedLatentState {
    Vector z;            // r
    double volume = 0.0; // mL

    Vector to_vector() const {
        Vector out(z.size() + 1);
        out.head(z.size()) = z;
        out[z.size()] = volume;
        return out;
    }
    static AugmentedLatentState from_vector(const Vector& v) {
        AugmentedLatentState s;
        s.z = v.head(v.size() - 1);
        s.volume = v[v.size() - 1];
        return s;
    }
};

/// Volume-controller terms passed to the latent dynamics, recomputed each
/// step from the stored volume history: err = S_V - V and the left-Riemann
/// integral of err from t = 0 (zero at the first step).
struct ControllerInputs {
    double setpoint = 0.0;       // mL
    double error = 0.0;          // mL
    double error_integral = 0.0; // mL * day
};

/// Per-block normalization statistics from training data. Feedback stats are
/// identity for variant D (the CNN is trained jointly).
struct NormStats {
    Vector z_mean, z_std;       // r+1
    Vector cond_mean, cond_std; // 7
    Vector ctrl_mean, ctrl_std; // 3
    Vector g_mean, g_std;       // d_g

    static NormStats identity(Index latent_dim, Index d_g);
};

/// Conditioning inputs in fixed order: tol, lambda_crit, mu, kg1, kg2, kappa, k1.
Vector conditioning_vector(const sampling::SimulationParams& params);
constexpr Index kConditionDim = 7;
constexpr Index kControllerDim = 3;

struct NodeModel {
    Variant variant = Variant::A;
    Index latent_dim = 0; // r+1
    Index d_g = 0;
    nn::MlpSpec mlp_spec;
    Vector mlp_params;
    nn::CnnSpec cnn_spec; // variant D
    Vector cnn_params;    // variant D
    pod::PodBasis growth_basis1, growth_basis2; // variant C
    NormStats stats;

    Index input_dim() const { return latent_dim + kConditionDim + kControllerDim + d_g; }
};

/// Fresh model with identity normalization stats. For variant C pass the two
/// growth bases; for variant D the geometry fixes the CNN input extent.
NodeModel make_node_model(Variant variant, Index latent_coeffs, const growth::GridGeometry& geometry,
                          std::uint64_t seed, Index hidden1 = 128, Index hidden2 = 128,
                          const pod::PodBasis* growth_basis1 = nullptr,
                          const pod::PodBasis* growth_basis2 = nullptr);

/// Normalized feedback vector for variants B-D; throws ConfigError for A.
Vector encode_feedback(const NodeModel& model, const growth::GridGeometry& geometry,
                       const growth::GrowthState& growth_state);

/// Normalized MLP input block [state | conditioning | controller | g].
/// g is appended as-is (encode_feedback already normalized it).
Vector assemble_node_input(const NodeModel& model, const Vector& state_raw,
                           const Vector& cond_raw, const ControllerInputs& ctrl, const Vector& g);

/// Latent velocity in normalized units per day. The state, conditioning, and
/// controller inputs are normalized internally; g comes from encode_feedback
/// (already normalized).
Vector node_rhs(const NodeModel& model, const AugmentedLatentState& state,
                const sampling::SimulationParams& params, const ControllerInputs& ctrl,
                const Vector& g);

/// Single Forward-Euler update.
Vector euler_step(const Vector& state, const Vector& velocity, double dt);

struct RolloutResult {
    Matrix latent;        // T x (r+1), raw units
    Matrix displacements; // T x 3G^2, decoded
    Matrix growth1;       // T x E
    Matrix growth2;       // T x E
    double final_area_gain = 0.0; // cm^2
    bool diverged = false;
    Index steps_completed = 0;
};

/// Closed-loop (A: open-loop) autoregressive rollout over the schedule.
/// Per step: decode, growth update, feedback encode, controller recompute,
/// NODE velocity, Euler step. Non-finite states truncate and flag.
RolloutResult rollout(const NodeModel& model, const pod::PodBasis& basis,
                      const growth::GridGeometry& geometry,
                      const sampling::SimulationParams& params,
                      const sampling::VolumeSchedule& schedule,
                      const AugmentedLatentState& initial);

/// Initial latent state from a full-order initial displacement snapshot.
AugmentedLatentState initial_state(const pod::PodBasis& basis, const Vector& u0);

/// Rollout plus reverse-mode bookkeeping for training.
struct RolloutTrace {
    std::vector<nn::MlpTape> mlp_tapes; // one per transition
    std::vector<nn::CnnTape> cnn_tapes; // variant D
    std::vector<Matrix> tangents;       // full-graph: per transition, E x 6 (c1|c2)
    Matrix stretch1, stretch2;          // full-graph: E x (T-1)
    bool full_graph = false;
};

struct TracedRollout {
    RolloutResult result;
    RolloutTrace trace;
};

TracedRollout rollout_traced(const NodeModel& model, const pod::PodBasis& basis,
                             const growth::GridGeometry& geometry,
                             const sampling::SimulationParams& params,
                             const sampling::VolumeSchedule& schedule,
                             const AugmentedLatentState& initial, bool full_graph);

struct RolloutGradients {
    Vector mlp; // same layout as model.mlp_params
    Vector cnn; // same layout as model.cnn_params (empty unless variant D)
};

/// Backpropagation through the rollout. dlatent_norm is the loss gradient
/// with respect to the NORMALIZED latent trajectory, (r+1) x T with column k
/// for state k (column 0 is ignored: the initial state is given).
/// d_area_gain is the loss gradient with respect to the final area gain; it
/// only flows when the trace was built with full_graph, since the growth
/// update is gradient-stopped otherwise.
RolloutGradients rollout_backward(const NodeModel& model, const pod::PodBasis& basis,
                                  const growth::GridGeometry& geometry,
                                  const sampling::SimulationParams& params,
                                  const sampling::VolumeSchedule& schedule,
                                  const TracedRollout& rollout, const Matrix& dlatent_norm,
                                  double d_area_gain);

/// Normalize raw latent states (columns) with the model statistics.
Matrix normalize_latent(const NodeModel& model, const Matrix& latent_cols);

/// View a rollout as a full-order record for side-by-side export.
fom::SimulationRecord rollout_to_record(const RolloutResult& result,
                                        const sampling::SimulationParams& params,
                                        const sampling::VolumeSchedule& schedule);

struct CheckpointInfo {
    std::uint64_t seed = 0;
    Index epoch = 0;
    double val_loss = 0.0;
};

void save_model(const std::filesystem::path& path, const NodeModel& model,
                const CheckpointInfo& info);

struct LoadedModel {
    NodeModel model;
    CheckpointInfo info;
};

LoadedModel load_model(const std::filesystem::path& path);

} // namespace terom::rom
