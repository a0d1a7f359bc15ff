#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "terom/evaluation.hpp"
#include "testutil.hpp"

#include <cmath>

using namespace terom;
using namespace terom::eval;

TEST_CASE("rmse: closed form, symmetry, dimension guard") {
    Rng rng(1);
    const Vector a = testutil::random_vector(rng, 48);
    CHECK(displacement_rmse(a, a) == 0.0);

    const Vector b = a.array() + 2.0;
    CHECK(displacement_rmse(a, b) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(displacement_rmse(a, b) == displacement_rmse(b, a));
    CHECK_THROWS_AS(displacement_rmse(a, Vector::Zero(5)), std::invalid_argument);
}

TEST_CASE("quantile: linear interpolation convention") {
    std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
    CHECK(quantile(v, 0.5) == doctest::Approx(2.5));
    CHECK(quantile(v, 0.0) == 1.0);
    CHECK(quantile(v, 1.0) == 4.0);
    CHECK(quantile(v, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({7.0}, 0.1) == 7.0);
    CHECK_THROWS_AS(quantile({}, 0.5), std::invalid_argument);
}

TEST_CASE("tolerance envelope: floor, crossover, square root") {
    CHECK(tolerance_envelope(0.0) == 5.0);
    CHECK(tolerance_envelope(25.0) == 5.0);
    CHECK(tolerance_envelope(100.0) == doctest::Approx(10.0));
    CHECK(tolerance_envelope(-3.0) == 5.0); // negative gains floored inside the root
    // Non-decreasing.
    double prev = 0.0;
    for (double a = 0.0; a <= 400.0; a += 7.0) {
        const double t = tolerance_envelope(a);
        CHECK(t >= prev);
        prev = t;
    }
}

TEST_CASE("envelope report: boundary inclusive, fractions in range") {
    std::vector<std::pair<double, double>> pairs;
    pairs.emplace_back(100.0, 100.0);                              // exact
    pairs.emplace_back(100.0, 100.0 + tolerance_envelope(100.0));  // on the edge
    pairs.emplace_back(100.0, 100.0 + 2.0 * tolerance_envelope(100.0)); // outside
    const auto report = envelope_report(pairs);
    REQUIRE(report.pairs.size() == 3);
    CHECK(report.pairs[0].within);
    CHECK(report.pairs[1].within);
    CHECK_FALSE(report.pairs[2].within);
    CHECK(report.fraction_within == doctest::Approx(2.0 / 3.0));

    std::vector<std::pair<double, double>> perfect(5, {40.0, 40.0});
    CHECK(envelope_report(perfect).fraction_within == 1.0);
    CHECK_THROWS_AS(envelope_report({}), std::invalid_argument);
}

TEST_CASE("envelope report: a perfect extra pair cannot lower the fraction too far") {
    std::vector<std::pair<double, double>> pairs = {{50.0, 52.0}, {10.0, 30.0}, {80.0, 80.0}};
    const auto before = envelope_report(pairs);
    pairs.emplace_back(60.0, 60.0);
    const auto after = envelope_report(pairs);
    const auto n = static_cast<double>(before.pairs.size());
    CHECK(after.fraction_within >= before.fraction_within * n / (n + 1.0) - 1e-12);
}

TEST_CASE("rmse curves: single simulation and population shrinkage") {
    // Two fabricated rollout/record pairs of different lengths.
    const Index dim = 30;
    Rng rng(5);

    auto make_pair = [&](Index t_total, double err) {
        fom::SimulationRecord rec;
        rec.displacements = Matrix::Zero(t_total, dim);
        for (Index k = 0; k < t_total; ++k) {
            rec.times.push_back(static_cast<double>(k) * 1.4);
            rec.volumes.push_back(0.0);
        }
        rom::RolloutResult roll;
        roll.displacements = Matrix::Constant(t_total, dim, err);
        roll.steps_completed = t_total;
        roll.latent = Matrix::Zero(t_total, 3);
        return std::make_pair(rec, roll);
    };

    auto [rec_a, roll_a] = make_pair(10, 1.0);
    auto [rec_b, roll_b] = make_pair(6, 3.0);

    std::vector<rom::RolloutResult> rollouts = {roll_a, roll_b};
    std::vector<const fom::SimulationRecord*> records = {&rec_a, &rec_b};
    const auto curve = rmse_curves(rollouts, records);

    REQUIRE(curve.times.size() == 10);
    CHECK(curve.alive[0] == 2);
    CHECK(curve.alive[9] == 1);
    CHECK(curve.median[0] == doctest::Approx(2.0)); // median of {1, 3}
    CHECK(curve.median[8] == doctest::Approx(1.0)); // only the long one alive
    for (std::size_t k = 0; k < curve.times.size(); ++k) {
        CHECK(curve.q10[k] <= curve.median[k] + 1e-15);
        CHECK(curve.median[k] <= curve.q90[k] + 1e-15);
    }
    // Alive population never grows with time.
    for (std::size_t k = 1; k < curve.alive.size(); ++k) CHECK(curve.alive[k] <= curve.alive[k - 1]);

    // Single simulation: all three quantiles collapse onto its curve.
    std::vector<rom::RolloutResult> solo_roll = {roll_b};
    std::vector<const fom::SimulationRecord*> solo_rec = {&rec_b};
    const auto solo = rmse_curves(solo_roll, solo_rec);
    for (std::size_t k = 0; k < solo.times.size(); ++k) {
        CHECK(solo.median[k] == solo.q10[k]);
        CHECK(solo.median[k] == solo.q90[k]);
        CHECK(solo.median[k] == doctest::Approx(3.0));
    }

    // Perfect rollouts give an all-zero curve.
    rom::RolloutResult perfect = roll_a;
    perfect.displacements.setZero();
    std::vector<rom::RolloutResult> pr = {perfect};
    std::vector<const fom::SimulationRecord*> prr = {&rec_a};
    const auto zero_curve = rmse_curves(pr, prr);
    for (double m : zero_curve.median) CHECK(m == 0.0);
}
