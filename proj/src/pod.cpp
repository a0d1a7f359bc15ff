#include "terom/pod.hpp"

#include "terom/io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace terom::pod {

namespace {

constexpr double kRankCutoff = 1e-12; // relative sigma^2 cutoff for numerical rank

} // namespace

PodBasis fit_pod(const Matrix& snapshots, double variance_threshold, Index max_modes) {
    const Index n = snapshots.rows();
    const Index m = snapshots.cols();
    if (m < 2) throw std::invalid_argument("fit_pod: need at least 2 snapshots");
    if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
        throw std::invalid_argument("fit_pod: threshold must lie in (0, 1]");

    PodBasis basis;
    basis.threshold = variance_threshold;
    basis.mean = snapshots.rowwise().mean();
    Matrix centered = snapshots.colwise() - basis.mean;

    const Index k = std::min(n, m);
    Vector sigma2(k);
    Matrix mode_buf;

    if (m <= n) {
        // Method of snapshots: eigenvectors of the m x m Gram matrix.
        Matrix gram = centered.transpose() * centered;
        Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
        if (eig.info() != Eigen::Success) throw NumericError("fit_pod: eigensolver failed");
        // Ascending from Eigen; flip to non-increasing.
        for (Index i = 0; i < k; ++i) sigma2[i] = std::max(0.0, eig.eigenvalues()[m - 1 - i]);
        mode_buf.resize(n, k);
        for (Index i = 0; i < k; ++i) {
            const double s = std::sqrt(sigma2[i]);
            if (s > 0.0)
                mode_buf.col(i) = centered * eig.eigenvectors().col(m - 1 - i) / s;
            else
                mode_buf.col(i).setZero();
        }
    } else {
        Matrix cov = centered * centered.transpose();
        Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
        if (eig.info() != Eigen::Success) throw NumericError("fit_pod: eigensolver failed");
        for (Index i = 0; i < k; ++i) sigma2[i] = std::max(0.0, eig.eigenvalues()[n - 1 - i]);
        mode_buf.resize(n, k);
        for (Index i = 0; i < k; ++i) mode_buf.col(i) = eig.eigenvectors().col(n - 1 - i);
    }

    const double total = sigma2.sum();
    if (!(total > 0.0)) throw DataError("fit_pod: snapshots are all identical (rank zero)");

    // Numerical rank: drop directions below the relative cutoff.
    Index rank = 0;
    for (Index i = 0; i < k; ++i)
        if (sigma2[i] > kRankCutoff * sigma2[0]) rank = i + 1;

    Index r = 0;
    double cum = 0.0;
    for (Index i = 0; i < rank; ++i) {
        cum += sigma2[i];
        r = i + 1;
        if (cum / total >= variance_threshold) break;
    }
    if (max_modes > 0) r = std::min(r, max_modes);

    basis.retained = r;
    basis.modes = mode_buf.leftCols(r);
    basis.singular_values = sigma2.cwiseSqrt();

    // Re-orthonormalize (modified Gram-Schmidt) to hold the 1e-10 invariant
    // even when trailing singular values nearly coincide.
    for (Index i = 0; i < r; ++i) {
        for (Index j = 0; j < i; ++j)
            basis.modes.col(i) -= basis.modes.col(j).dot(basis.modes.col(i)) * basis.modes.col(j);
        const double nrm = basis.modes.col(i).norm();
        if (nrm > 0.0) basis.modes.col(i) /= nrm;
    }
    return basis;
}

Vector project(const PodBasis& basis, const Vector& field) {
    if (field.size() != basis.field_dim())
        throw std::invalid_argument("project: field dimension mismatch");
    return basis.modes.transpose() * (field - basis.mean);
}

Vector reconstruct(const PodBasis& basis, const Vector& z) {
    if (z.size() != basis.retained)
        throw std::invalid_argument("reconstruct: coefficient dimension mismatch");
    return basis.mean + basis.modes * z;
}

Matrix project_all(const PodBasis& basis, const Matrix& fields) {
    if (fields.rows() != basis.field_dim())
        throw std::invalid_argument("project_all: field dimension mismatch");
    return basis.modes.transpose() * (fields.colwise() - basis.mean);
}

Vector explained_variance_curve(const PodBasis& basis) {
    const Vector& s = basis.singular_values;
    if (s.size() == 0) throw std::invalid_argument("explained_variance_curve: unfitted basis");
    const Vector s2 = s.cwiseProduct(s);
    const double total = s2.sum();
    Index rank = 0;
    for (Index i = 0; i < s2.size(); ++i)
        if (s2[i] > kRankCutoff * s2[0]) rank = i + 1;

    Vector curve(rank);
    double cum = 0.0;
    for (Index i = 0; i < rank; ++i) {
        cum += s2[i];
        curve[i] = cum / total;
    }
    if (rank > 0) curve[rank - 1] = 1.0; // kill round-off at the top
    return curve;
}

void save_basis(const std::filesystem::path& path, const PodBasis& basis) {
    io::json meta;
    meta["n"] = basis.field_dim();
    meta["r"] = basis.retained;
    meta["threshold"] = basis.threshold;
    const Vector curve = explained_variance_curve(basis);
    meta["explained_variance_curve"] =
        std::vector<double>(curve.data(), curve.data() + curve.size());

    std::vector<io::NamedArray> arrays;
    arrays.push_back(io::make_array("mean", basis.mean));
    arrays.push_back(io::make_array("modes", basis.modes));
    arrays.push_back(io::make_array("singular_values", basis.singular_values));
    io::write_container(path, meta, arrays);
}

PodBasis load_basis(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    PodBasis b;
    b.mean = c.get("mean").data;
    b.modes = c.get("modes").as_matrix();
    b.singular_values = c.get("singular_values").data;
    b.retained = c.meta.at("r").get<Index>();
    b.threshold = c.meta.at("threshold").get<double>();
    if (b.modes.cols() != b.retained) throw DataError("load_basis: inconsistent mode count");
    return b;
}

} // namespace terom::pod
