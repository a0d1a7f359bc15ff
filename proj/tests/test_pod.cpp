#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "terom/pod.hpp"
#include "testutil.hpp"

#include <filesystem>

using namespace terom;
using namespace terom::pod;

namespace {

/// Snapshots from an exact rank-k linear model plus a mean offset.
Matrix low_rank_snapshots(Rng& rng, Index n, Index m, Index rank, double noise = 0.0) {
    Matrix basis(n, rank);
    for (Index j = 0; j < rank; ++j) basis.col(j) = testutil::random_vector(rng, n);
    const Vector mean = testutil::random_vector(rng, n, -2.0, 2.0);
    Matrix snaps(n, m);
    for (Index i = 0; i < m; ++i) {
        Vector coeff = testutil::random_vector(rng, rank, -3.0, 3.0);
        snaps.col(i) = mean + basis * coeff;
        if (noise > 0.0) snaps.col(i) += noise * testutil::random_vector(rng, n);
    }
    return snaps;
}

} // namespace

TEST_CASE("fit: synthetic rank-3 data recovered exactly") {
    Rng rng(11);
    const Matrix snaps = low_rank_snapshots(rng, 40, 25, 3);
    const auto basis = fit_pod(snaps, 0.9999);
    CHECK(basis.retained == 3);
    for (Index i = 0; i < snaps.cols(); ++i) {
        const Vector rec = reconstruct(basis, project(basis, snaps.col(i)));
        CHECK((rec - snaps.col(i)).norm() <= 1e-10 * std::max(1.0, snaps.col(i).norm()));
    }
}

TEST_CASE("fit: threshold one retains the numerical rank") {
    Rng rng(3);
    const Matrix snaps = low_rank_snapshots(rng, 30, 12, 5);
    const auto basis = fit_pod(snaps, 1.0);
    CHECK(basis.retained == 5);
}

TEST_CASE("fit: gram and covariance routes agree on orthonormality") {
    Rng rng(7);
    for (const auto dims : {std::pair<Index, Index>{50, 20}, std::pair<Index, Index>{20, 50}}) {
        const Matrix snaps = low_rank_snapshots(rng, dims.first, dims.second, 6, 1e-3);
        const auto basis = fit_pod(snaps, 0.9999);
        const Matrix gram = basis.modes.transpose() * basis.modes;
        CHECK((gram - Matrix::Identity(basis.retained, basis.retained)).cwiseAbs().maxCoeff() <
              1e-10);
        // Singular values are non-increasing.
        for (Index i = 1; i < basis.singular_values.size(); ++i)
            CHECK(basis.singular_values[i] <= basis.singular_values[i - 1] + 1e-12);
    }
}

TEST_CASE("fit: identical snapshots raise a rank-zero error") {
    Matrix snaps(8, 5);
    for (Index i = 0; i < 5; ++i) snaps.col(i) = Vector::Constant(8, 3.0);
    CHECK_THROWS_AS(fit_pod(snaps, 0.9999), DataError);
}

TEST_CASE("fit: mode cap limits the retained count") {
    Rng rng(9);
    const Matrix snaps = low_rank_snapshots(rng, 40, 30, 8);
    const auto basis = fit_pod(snaps, 1.0, 4);
    CHECK(basis.retained == 4);
}

TEST_CASE("project: mean maps to zero, injected modes to unit vectors") {
    Rng rng(13);
    const Matrix snaps = low_rank_snapshots(rng, 25, 18, 4, 1e-2);
    const auto basis = fit_pod(snaps, 0.9999);
    CHECK(project(basis, basis.mean).norm() < 1e-10);
    for (Index i = 0; i < basis.retained; ++i) {
        const Vector e = project(basis, basis.mean + basis.modes.col(i));
        CHECK((e - Vector::Unit(basis.retained, i)).norm() < 1e-10);
    }
    CHECK_THROWS_AS(project(basis, Vector::Zero(7)), std::invalid_argument);
}

TEST_CASE("reconstruct: zero coefficients give the mean; round trip on R^r") {
    Rng rng(19);
    const Matrix snaps = low_rank_snapshots(rng, 30, 20, 5, 1e-2);
    const auto basis = fit_pod(snaps, 0.9999);
    CHECK((reconstruct(basis, Vector::Zero(basis.retained)) - basis.mean).norm() == 0.0);
    const Vector z = testutil::random_vector(rng, basis.retained, -4.0, 4.0);
    CHECK((project(basis, reconstruct(basis, z)) - z).norm() < 1e-10);
    CHECK_THROWS_AS(reconstruct(basis, Vector::Zero(basis.retained + 2)), std::invalid_argument);
}

TEST_CASE("reconstruct: held-out residual within twice the training residual") {
    Rng rng(23);
    // Shared latent model with small off-manifold noise.
    const Index n = 60, rank = 4;
    Matrix modes(n, rank);
    for (Index j = 0; j < rank; ++j) modes.col(j) = testutil::random_vector(rng, n);
    auto draw = [&](Index m) {
        Matrix s(n, m);
        for (Index i = 0; i < m; ++i)
            s.col(i) = modes * testutil::random_vector(rng, rank, -3.0, 3.0) +
                       0.01 * testutil::random_vector(rng, n);
        return s;
    };
    const Matrix train = draw(80);
    const Matrix held = draw(40);
    const auto basis = fit_pod(train, 0.999);

    auto rms_residual = [&](const Matrix& set) {
        double acc = 0.0;
        for (Index i = 0; i < set.cols(); ++i) {
            const Vector rec = reconstruct(basis, project(basis, set.col(i)));
            acc += (rec - set.col(i)).squaredNorm();
        }
        return std::sqrt(acc / static_cast<double>(set.cols() * set.rows()));
    };
    CHECK(rms_residual(held) <= 2.0 * rms_residual(train));
}

TEST_CASE("variance curve: closed forms and monotonicity") {
    // Rank-1 data: curve is exactly [1].
    Rng rng(29);
    Matrix snaps(12, 6);
    const Vector dir = testutil::random_vector(rng, 12);
    for (Index i = 0; i < 6; ++i) snaps.col(i) = (1.0 + static_cast<double>(i)) * dir;
    const auto basis = fit_pod(snaps, 0.9999);
    const Vector curve = explained_variance_curve(basis);
    REQUIRE(curve.size() == 1);
    CHECK(curve[0] == 1.0);

    // Equal singular values: curve = [1/k, 2/k, ..., 1].
    const Index k = 5;
    Matrix eq = Matrix::Zero(20, 2 * k);
    for (Index j = 0; j < k; ++j) {
        eq(j, 2 * j) = 1.0;
        eq(j, 2 * j + 1) = -1.0;
    }
    const auto eq_basis = fit_pod(eq, 1.0);
    const Vector eq_curve = explained_variance_curve(eq_basis);
    REQUIRE(eq_curve.size() == k);
    for (Index j = 0; j < k; ++j)
        CHECK(eq_curve[j] == doctest::Approx(static_cast<double>(j + 1) / static_cast<double>(k))
                                 .epsilon(1e-10));

    for (Index j = 1; j < eq_curve.size(); ++j) CHECK(eq_curve[j] >= eq_curve[j - 1]);
}

TEST_CASE("variance accounting: residual matches one minus the cumulative ratio") {
    Rng rng(41);
    const Matrix snaps = low_rank_snapshots(rng, 50, 35, 8, 5e-2);
    const auto basis = fit_pod(snaps, 0.95);
    const Vector curve = explained_variance_curve(basis);

    const Matrix centered = snaps.colwise() - basis.mean;
    double resid = 0.0;
    for (Index i = 0; i < snaps.cols(); ++i) {
        const Vector rec = basis.modes * (basis.modes.transpose() * centered.col(i));
        resid += (centered.col(i) - rec).squaredNorm();
    }
    const double total = centered.squaredNorm();
    const double captured = 1.0 - resid / total;
    CHECK(std::abs(captured - curve[basis.retained - 1]) < 1e-8);
}

TEST_CASE("stacking: component blocks slice back out of the modes") {
    // Fields stacked [ux; uy; uz]: a y-only snapshot family must produce
    // modes supported on the middle block.
    Rng rng(47);
    const Index nn = 16;
    Matrix snaps = Matrix::Zero(3 * nn, 10);
    const Vector shape = testutil::random_vector(rng, nn);
    for (Index i = 0; i < 10; ++i)
        snaps.col(i).segment(nn, nn) = (0.5 + static_cast<double>(i)) * shape;
    const auto basis = fit_pod(snaps, 0.9999);
    REQUIRE(basis.retained == 1);
    CHECK(basis.modes.col(0).head(nn).norm() == 0.0);
    CHECK(basis.modes.col(0).tail(nn).norm() == 0.0);
    CHECK(basis.modes.col(0).segment(nn, nn).norm() == doctest::Approx(1.0));
}

TEST_CASE("basis io: container round trip") {
    Rng rng(53);
    const Matrix snaps = low_rank_snapshots(rng, 30, 14, 4);
    const auto basis = fit_pod(snaps, 0.9999);
    const auto path = std::filesystem::temp_directory_path() / "terom_test_basis.teb";
    save_basis(path, basis);
    const auto loaded = load_basis(path);
    std::filesystem::remove(path);
    CHECK(loaded.retained == basis.retained);
    CHECK(loaded.threshold == basis.threshold);
    CHECK((loaded.mean - basis.mean).norm() == 0.0);
    CHECK((loaded.modes - basis.modes).norm() == 0.0);
    CHECK((loaded.singular_values - basis.singular_values).norm() == 0.0);
}
