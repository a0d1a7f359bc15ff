#pragma once

#include "terom/types.hpp"

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace terom::nn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_deriv(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

/// Fully connected net with exactly two hidden layers, SiLU activations,
/// linear output.
struct MlpSpec {
    Index in_dim = 1;
    Index hidden1 = 128;
    Index hidden2 = 128;
    Index out_dim = 1;
};

Index mlp_param_count(const MlpSpec& spec);

/// Named parameter slices (name, offset, size) in flat-vector order.
std::vector<std::tuple<std::string, Index, Index>> mlp_param_layout(const MlpSpec& spec);

/// Uniform fan-in initialization, biases zero. Deterministic in seed.
Vector mlp_init(const MlpSpec& spec, std::uint64_t seed);

/// Forward activations kept for reverse mode. Columns are batch items.
struct MlpTape {
    Matrix input, pre1, act1, pre2, act2;
    bool cleared = false;
    void clear();
};

/// Batched forward: input is (in_dim x batch); returns (out_dim x batch).
/// Pass a tape to enable backward.
Matrix mlp_forward(const MlpSpec& spec, const Vector& params, const Matrix& input,
                   MlpTape* tape = nullptr);

/// Reverse mode. Accumulates into param_grads (same layout as params) and
/// returns the input gradients. Throws std::logic_error on a cleared tape.
Matrix mlp_backward(const MlpSpec& spec, const Vector& params, const MlpTape& tape,
                    const Matrix& output_grad, Eigen::Ref<Vector> param_grads);

/// Four strided 3x3 conv blocks (replicate padding, stride 2), each followed
/// by group normalization and SiLU, then global average pooling and a dense
/// projection to the embedding.
struct CnnSpec {
    Index in_channels = 2;
    Index height = 30;
    Index width = 30;
    std::array<Index, 4> channels = {8, 16, 32, 32};
    Index groups = 4;
    Index embed_dim = 16;
    double gn_epsilon = 1e-5;
};

Index cnn_param_count(const CnnSpec& spec);
std::vector<std::tuple<std::string, Index, Index>> cnn_param_layout(const CnnSpec& spec);
Vector cnn_init(const CnnSpec& spec, std::uint64_t seed);

struct CnnTape {
    // Per conv block: input map, pre-normalization map, normalized map,
    // affine output (pre-activation), and group statistics.
    std::array<Vector, 4> input, conv_out, xhat, affine;
    std::array<Vector, 4> group_mean, group_var;
    Vector pooled;
    bool cleared = false;
    void clear();
};

/// field is channel-major (in_channels x H x W) flattened. Returns the
/// embedding; pass a tape to enable backward.
Vector cnn_forward(const CnnSpec& spec, const Vector& params, const Vector& field,
                   CnnTape* tape = nullptr);

/// Accumulates into param_grads and returns the field gradient.
Vector cnn_backward(const CnnSpec& spec, const Vector& params, const CnnTape& tape,
                    const Vector& embed_grad, Eigen::Ref<Vector> param_grads);

/// Adaptive-moment optimizer state; owned by exactly one trainer.
struct AdamState {
    Vector m, v;
    long step = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// In-place update with bias correction. Throws NumericError on non-finite
/// gradients (training abort).
void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamConfig& config);

} // namespace terom::nn
