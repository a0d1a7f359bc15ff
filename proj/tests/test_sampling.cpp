#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "terom/sampling.hpp"

#include <algorithm>
#include <cmath>

using namespace terom;
using namespace terom::sampling;

TEST_CASE("lhs: single sample stays inside the bound table") {
    const auto d = lhs_sample(1, 0);
    REQUIRE(d.size() == 1);
    CHECK(within_bounds(d[0]));
}

TEST_CASE("lhs: each quartile bin holds exactly one sample") {
    const Index n = 4;
    const auto design = lhs_sample(n, 42);
    const auto& bounds = param_bounds();
    for (std::size_t dim = 0; dim < bounds.size(); ++dim) {
        std::vector<int> counts(static_cast<std::size_t>(n), 0);
        for (const auto& p : design) {
            const double v = p.as_array()[dim];
            const double width = (bounds[dim].hi - bounds[dim].lo) / static_cast<double>(n);
            auto bin = static_cast<std::size_t>((v - bounds[dim].lo) / width);
            bin = std::min(bin, static_cast<std::size_t>(n - 1));
            counts[bin] += 1;
        }
        for (int c : counts) CHECK(c == 1);
    }
}

TEST_CASE("lhs: stratification holds for all parameters at n = 100") {
    const Index n = 100;
    const auto design = lhs_sample(n, 7);
    const auto& bounds = param_bounds();
    for (std::size_t dim = 0; dim < bounds.size(); ++dim) {
        std::vector<int> counts(static_cast<std::size_t>(n), 0);
        for (const auto& p : design) {
            const double v = p.as_array()[dim];
            const double width = (bounds[dim].hi - bounds[dim].lo) / static_cast<double>(n);
            auto bin = static_cast<std::size_t>((v - bounds[dim].lo) / width);
            bin = std::min(bin, static_cast<std::size_t>(n - 1));
            counts[bin] += 1;
        }
        CHECK(*std::min_element(counts.begin(), counts.end()) == 1);
        CHECK(*std::max_element(counts.begin(), counts.end()) == 1);
    }
}

TEST_CASE("lhs: deterministic given the seed") {
    const auto a = lhs_sample(100, 7);
    const auto b = lhs_sample(100, 7);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto ra = a[i].as_array();
        const auto rb = b[i].as_array();
        for (std::size_t j = 0; j < ra.size(); ++j) CHECK(ra[j] == rb[j]);
    }
}

TEST_CASE("lhs: empty design rejected") {
    CHECK_THROWS_AS(lhs_sample(0, 1), ConfigError);
}

TEST_CASE("schedule: paper endpoints 42 and 98 days") {
    SimulationParams p;
    p.v_final = 700.0;
    auto sched = build_volume_schedule(p);
    CHECK(sched.duration_days() == doctest::Approx(98.0));
    CHECK(sched.setpoints.back() == doctest::Approx(700.0));
    // seven distinct plateau levels
    std::vector<double> distinct;
    for (double s : sched.setpoints)
        if (s > 0 && (distinct.empty() || distinct.back() != s)) distinct.push_back(s);
    CHECK(distinct.size() == 7);

    p.v_final = 100.0;
    sched = build_volume_schedule(p);
    CHECK(sched.duration_days() == doctest::Approx(42.0));
    CHECK(sched.setpoints.front() == 0.0);
    for (std::size_t k = 1; k < sched.setpoints.size(); ++k)
        CHECK(sched.setpoints[k] == doctest::Approx(100.0));
}

TEST_CASE("schedule: four stages interpolate to 70 days") {
    SimulationParams p;
    p.v_final = 400.0;
    const auto sched = build_volume_schedule(p);
    CHECK(sched.duration_days() == doctest::Approx(70.0));
    std::vector<double> distinct;
    for (double s : sched.setpoints)
        if (s > 0 && (distinct.empty() || distinct.back() != s)) distinct.push_back(s);
    CHECK(distinct.size() == 4);
    CHECK(distinct.back() == doctest::Approx(400.0));
}

TEST_CASE("schedule: times sit on the 1.4-day grid exactly") {
    SimulationParams p;
    p.v_final = 523.0; // rounds up to 600
    const auto sched = build_volume_schedule(p);
    for (std::size_t k = 0; k < sched.times.size(); ++k)
        CHECK(sched.times[k] == static_cast<double>(k) * 1.4);
    CHECK(sched.setpoints.back() == doctest::Approx(600.0));
}

TEST_CASE("schedule: non-decreasing 100 mL increments from zero") {
    for (double vf : {100.0, 250.0, 400.0, 699.0, 700.0}) {
        SimulationParams p;
        p.v_final = vf;
        const auto sched = build_volume_schedule(p);
        CHECK(sched.setpoints.front() == 0.0);
        for (std::size_t k = 1; k < sched.setpoints.size(); ++k) {
            const double step = sched.setpoints[k] - sched.setpoints[k - 1];
            CHECK(step >= 0.0);
            CHECK((step == 0.0 || step == 100.0));
        }
    }
}

TEST_CASE("schedule: common trajectory before fanning out") {
    const auto design = lhs_sample(12, 3);
    for (std::size_t a = 0; a < design.size(); ++a) {
        for (std::size_t b = a + 1; b < design.size(); ++b) {
            const auto sa = build_volume_schedule(design[a]);
            const auto sb = build_volume_schedule(design[b]);
            const double v_min = std::min(design[a].v_final, design[b].v_final);
            const auto shared = std::min(sa.setpoints.size(), sb.setpoints.size());
            for (std::size_t k = 0; k < shared; ++k) {
                if (sa.setpoints[k] < v_min && sb.setpoints[k] < v_min)
                    CHECK(sa.setpoints[k] == sb.setpoints[k]);
            }
        }
    }
}

TEST_CASE("schedule: v_final outside bounds rejected") {
    SimulationParams p;
    p.v_final = 750.0;
    CHECK_THROWS_AS(build_volume_schedule(p), ConfigError);
    p.v_final = 50.0;
    CHECK_THROWS_AS(build_volume_schedule(p), ConfigError);
}

TEST_CASE("split: small and paper-sized examples") {
    std::vector<Index> ids(10);
    for (Index i = 0; i < 10; ++i) ids[static_cast<std::size_t>(i)] = i;
    const auto m = split_dataset(ids, 0.2, 5);
    CHECK(m.train_ids.size() == 8);
    CHECK(m.val_ids.size() == 2);

    std::vector<Index> big(927);
    for (Index i = 0; i < 927; ++i) big[static_cast<std::size_t>(i)] = i;
    const auto mp = split_dataset(big, 0.1996, 11);
    CHECK(mp.train_ids.size() == 742);
    CHECK(mp.val_ids.size() == 185);
}

TEST_CASE("split: disjoint, complete, deterministic") {
    std::vector<Index> ids(37);
    for (Index i = 0; i < 37; ++i) ids[static_cast<std::size_t>(i)] = i * 3;
    const auto a = split_dataset(ids, 0.3, 99);
    const auto b = split_dataset(ids, 0.3, 99);
    CHECK(a.train_ids == b.train_ids);
    CHECK(a.val_ids == b.val_ids);

    std::vector<Index> all = a.train_ids;
    all.insert(all.end(), a.val_ids.begin(), a.val_ids.end());
    std::sort(all.begin(), all.end());
    std::vector<Index> sorted_ids = ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    CHECK(all == sorted_ids);
}

TEST_CASE("split: degenerate inputs rejected") {
    CHECK_THROWS_AS(split_dataset({1}, 0.2, 0), DataError);
    std::vector<Index> ids = {1, 2, 3};
    CHECK_THROWS_AS(split_dataset(ids, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(split_dataset(ids, 1.0, 0), ConfigError);
}

TEST_CASE("params: CSV round trip preserves the column order") {
    const auto design = lhs_sample(5, 21);
    const std::string csv = params_to_csv(design);
    CHECK(csv.rfind("tol,lambda_crit,v_final,mu,kg1,kg2,kappa,k1\n", 0) == 0);
    const auto back = params_from_csv(csv);
    REQUIRE(back.size() == design.size());
    for (std::size_t i = 0; i < design.size(); ++i) {
        const auto a = design[i].as_array();
        const auto b = back[i].as_array();
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }
}
