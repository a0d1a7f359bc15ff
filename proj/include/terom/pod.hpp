#pragma once

#include "terom/types.hpp"

#include <filesystem>

namespace terom::pod {

/// Mean field plus orthonormal mode matrix from snapshot data. Columns of
/// `modes` are ordered by non-increasing singular value; `retained` of them
/// meet the explained-variance threshold.
struct PodBasis {
    Vector mean;            // n
    Matrix modes;           // n x retained
    Vector singular_values; // all min(n, m) values, non-increasing
    Index retained = 0;
    double threshold = 1.0;

    Index field_dim() const { return mean.size(); }
};

/// Mean-center, factor, and retain the smallest mode count whose cumulative
/// explained variance reaches `variance_threshold`. Uses the covariance or
/// Gram route, whichever side of the snapshot matrix is smaller.
/// `max_modes` > 0 caps the retained count.
PodBasis fit_pod(const Matrix& snapshots, double variance_threshold, Index max_modes = 0);

Vector project(const PodBasis& basis, const Vector& field);
Vector reconstruct(const PodBasis& basis, const Vector& z);

/// Batched versions (columns = snapshots).
Matrix project_all(const PodBasis& basis, const Matrix& fields);

/// Cumulative explained-variance ratios over the numerically nonzero
/// singular values; non-decreasing and ending at 1.
Vector explained_variance_curve(const PodBasis& basis);

void save_basis(const std::filesystem::path& path, const PodBasis& basis);
PodBasis load_basis(const std::filesystem::path& path);

} // namespace terom::pod
