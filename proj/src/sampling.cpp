#include "terom/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace terom::sampling {

namespace {

// Stage pitch of the shared staircase: the setpoint steps by 100 mL every
// 14 days (10 snapshot increments), so a 7-stage run reaches 700 mL at day 84.
constexpr double kStagePitchDays = 14.0;

double total_duration_days(Index n_stages) {
    // Affine in the stage count, anchored at (1 stage, 42 d) and (7 stages, 98 d),
    // rounded to the nearest snapshot increment.
    const double raw = 42.0 + 56.0 * static_cast<double>(n_stages - 1) / 6.0;
    return std::round(raw / kSnapshotDtDays) * kSnapshotDtDays;
}

} // namespace

const std::array<ParamBounds, 8>& param_bounds() {
    static const std::array<ParamBounds, 8> bounds = {{
        {15.0, 30.0},      // tol
        {1.0, 1.2},        // lambda_crit
        {100.0, 700.0},    // v_final
        {0.05, 0.25},      // mu
        {0.96, 2.4},       // kg1
        {0.24, 1.2},       // kg2
        {0.0, 1.0 / 3.0},  // kappa
        {1.0, 10.0},       // k1
    }};
    return bounds;
}

const std::array<std::string, 8>& param_names() {
    static const std::array<std::string, 8> names = {
        "tol", "lambda_crit", "v_final", "mu", "kg1", "kg2", "kappa", "k1"};
    return names;
}

bool within_bounds(const SimulationParams& p) {
    const auto a = p.as_array();
    const auto& b = param_bounds();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] < b[i].lo || a[i] > b[i].hi) return false;
    return true;
}

std::vector<SimulationParams> lhs_sample(Index n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("lhs_sample: empty design (n must be >= 1)");
    Rng rng(seed);
    const auto& bounds = param_bounds();

    // One stratified column per parameter: a random permutation of the n bins,
    // jittered uniformly within each bin.
    std::vector<std::array<double, 8>> rows(static_cast<std::size_t>(n));
    for (std::size_t d = 0; d < bounds.size(); ++d) {
        std::vector<Index> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), Index{0});
        rng.shuffle(perm);
        const double width = (bounds[d].hi - bounds[d].lo) / static_cast<double>(n);
        for (Index i = 0; i < n; ++i) {
            const double jitter = rng.uniform();
            rows[static_cast<std::size_t>(i)][d] =
                bounds[d].lo + (static_cast<double>(perm[static_cast<std::size_t>(i)]) + jitter) * width;
        }
    }

    std::vector<SimulationParams> out;
    out.reserve(static_cast<std::size_t>(n));
    for (const auto& row : rows) out.push_back(SimulationParams::from_array(row));
    return out;
}

Index stage_count(double v_final) {
    return static_cast<Index>(std::ceil(v_final / 100.0 - 1e-12));
}

VolumeSchedule build_volume_schedule(const SimulationParams& params) {
    const auto& vb = param_bounds()[2];
    if (params.v_final < vb.lo || params.v_final > vb.hi)
        throw ConfigError("build_volume_schedule: v_final outside bounds");

    const Index n_stages = stage_count(params.v_final);
    const double v_plateau = 100.0 * static_cast<double>(n_stages);
    const double duration = total_duration_days(n_stages);
    const Index n_steps = static_cast<Index>(std::llround(duration / kSnapshotDtDays)) + 1;

    VolumeSchedule sched;
    sched.n_steps = n_steps;
    sched.times.resize(static_cast<std::size_t>(n_steps));
    sched.setpoints.resize(static_cast<std::size_t>(n_steps));
    for (Index k = 0; k < n_steps; ++k) {
        const double t = static_cast<double>(k) * kSnapshotDtDays;
        sched.times[static_cast<std::size_t>(k)] = t;
        double s = 0.0;
        if (k > 0) {
            const Index stage = static_cast<Index>(std::floor(t / kStagePitchDays + 1e-9)) + 1;
            s = std::min(v_plateau, 100.0 * static_cast<double>(stage));
        }
        sched.setpoints[static_cast<std::size_t>(k)] = s;
    }
    return sched;
}

DatasetManifest split_dataset(const std::vector<Index>& ids, double val_fraction,
                              std::uint64_t seed) {
    if (ids.size() < 2) throw DataError("split_dataset: need at least 2 ids");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("split_dataset: val_fraction must lie in (0,1)");

    std::vector<Index> shuffled = ids;
    Rng rng(seed);
    rng.shuffle(shuffled);

    const auto n = static_cast<Index>(ids.size());
    Index n_val = static_cast<Index>(std::llround(val_fraction * static_cast<double>(n)));
    n_val = std::clamp<Index>(n_val, 1, n - 1);

    DatasetManifest m;
    m.seed = seed;
    m.n_requested = n;
    m.n_converged = n;
    m.val_ids.assign(shuffled.begin(), shuffled.begin() + n_val);
    m.train_ids.assign(shuffled.begin() + n_val, shuffled.end());
    std::sort(m.val_ids.begin(), m.val_ids.end());
    std::sort(m.train_ids.begin(), m.train_ids.end());
    return m;
}

std::string params_to_csv(const std::vector<SimulationParams>& params) {
    std::ostringstream out;
    out.precision(17);
    const auto& names = param_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        out << names[i] << (i + 1 < names.size() ? "," : "\n");
    for (const auto& p : params) {
        const auto row = p.as_array();
        for (std::size_t i = 0; i < row.size(); ++i)
            out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
    return out.str();
}

std::vector<SimulationParams> params_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw DataError("params_from_csv: empty input");

    std::vector<SimulationParams> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::array<double, 8> row{};
        std::string cell;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (!std::getline(ls, cell, ',')) throw DataError("params_from_csv: short row");
            row[i] = std::stod(cell);
        }
        out.push_back(SimulationParams::from_array(row));
    }
    return out;
}

} // namespace terom::sampling
