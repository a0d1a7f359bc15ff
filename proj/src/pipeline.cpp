#include "terom/pipeline.hpp"

#include "terom/io.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <functional>
#include <thread>
#include <unordered_map>

namespace terom::pipeline {

namespace fs = std::filesystem;

namespace {

void run_parallel(Index n, Index jobs, const std::function<void(Index)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> workers;
    const Index n_workers = std::min<Index>(jobs, n);
    for (Index w = 0; w < n_workers; ++w)
        workers.emplace_back([&] {
            for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : workers) t.join();
}

/// Pool snapshot rows of the selected records into a (dim x total) matrix.
Matrix pool_snapshots(const training::Dataset& dataset, const std::vector<Index>& indices,
                      const Matrix fom::SimulationRecord::*field) {
    Index total = 0;
    for (Index idx : indices)
        total += (dataset.records[static_cast<std::size_t>(idx)].*field).rows();
    if (total == 0) throw DataError("pool_snapshots: no snapshots");
    const Index dim = (dataset.records[static_cast<std::size_t>(indices[0])].*field).cols();
    Matrix pooled(dim, total);
    Index at = 0;
    for (Index idx : indices) {
        const Matrix& m = dataset.records[static_cast<std::size_t>(idx)].*field;
        pooled.middleCols(at, m.rows()) = m.transpose();
        at += m.rows();
    }
    return pooled;
}

rom::NodeModel build_model(const config::PipelineConfig& config, const std::string& variant,
                           const training::Dataset& dataset, const pod::PodBasis& basis) {
    const rom::Variant v = rom::variant_from_string(variant);
    pod::PodBasis gb1, gb2;
    const pod::PodBasis* gb1p = nullptr;
    const pod::PodBasis* gb2p = nullptr;
    if (v == rom::Variant::C) {
        const fs::path dir = config.dataset.output_dir;
        gb1 = pod::load_basis(growth_basis_path(dir, 1));
        gb2 = pod::load_basis(growth_basis_path(dir, 2));
        gb1p = &gb1;
        gb2p = &gb2;
    }
    return rom::make_node_model(v, basis.retained, dataset.geometry, config.training.seed,
                                config.model.hidden1, config.model.hidden2, gb1p, gb2p);
}

} // namespace

fs::path record_path(const fs::path& dir, Index id) {
    char name[32];
    std::snprintf(name, sizeof(name), "sim_%04lld.teb", static_cast<long long>(id));
    return dir / "records" / name;
}

fs::path manifest_path(const fs::path& dir) { return dir / "manifest.json"; }
fs::path params_csv_path(const fs::path& dir) { return dir / "params.csv"; }
fs::path displacement_basis_path(const fs::path& dir) { return dir / "pod_displacement.teb"; }
fs::path growth_basis_path(const fs::path& dir, int fiber) {
    return dir / ("pod_growth" + std::to_string(fiber) + ".teb");
}

void write_manifest(const fs::path& path, const sampling::DatasetManifest& manifest) {
    io::json j;
    j["seed"] = manifest.seed;
    j["n_requested"] = manifest.n_requested;
    j["n_converged"] = manifest.n_converged;
    j["train_ids"] = manifest.train_ids;
    j["val_ids"] = manifest.val_ids;
    j["dt"] = manifest.dt;
    io::write_json(path, j);
}

sampling::DatasetManifest read_manifest(const fs::path& path) {
    const io::json j = io::read_json(path);
    sampling::DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_requested = j.at("n_requested").get<Index>();
    m.n_converged = j.at("n_converged").get<Index>();
    m.train_ids = j.at("train_ids").get<std::vector<Index>>();
    m.val_ids = j.at("val_ids").get<std::vector<Index>>();
    m.dt = j.at("dt").get<double>();
    return m;
}

GenerateSummary cmd_generate(const config::PipelineConfig& config) {
    const fs::path dir = config.dataset.output_dir;
    std::error_code ec;
    fs::create_directories(dir / "records", ec);
    if (ec) throw DataError("cmd_generate: cannot create output dir " + dir.string());

    const auto geometry = config.grid();
    const auto designs = sampling::lhs_sample(config.dataset.n, config.dataset.seed);
    io::write_text(params_csv_path(dir), sampling::params_to_csv(designs));

    std::vector<char> converged(designs.size(), 0);
    run_parallel(static_cast<Index>(designs.size()), config.dataset.jobs, [&](Index i) {
        const auto& params = designs[static_cast<std::size_t>(i)];
        const auto schedule = sampling::build_volume_schedule(params);
        const auto record = fom::simulate(params, geometry, schedule);
        if (record.converged) {
            fom::save_record(record_path(dir, i), record, geometry);
            converged[static_cast<std::size_t>(i)] = 1;
        }
    });

    std::vector<Index> ids;
    for (std::size_t i = 0; i < converged.size(); ++i)
        if (converged[i]) ids.push_back(static_cast<Index>(i));
    if (ids.size() < 2) throw DataError("cmd_generate: fewer than two converged simulations");

    auto manifest =
        sampling::split_dataset(ids, config.dataset.val_fraction, config.dataset.seed + 1);
    manifest.seed = config.dataset.seed;
    manifest.n_requested = config.dataset.n;
    manifest.n_converged = static_cast<Index>(ids.size());
    write_manifest(manifest_path(dir), manifest);

    GenerateSummary summary;
    summary.n_requested = config.dataset.n;
    summary.n_converged = manifest.n_converged;
    return summary;
}

training::Dataset load_dataset(const fs::path& dir) {
    const auto manifest = read_manifest(manifest_path(dir));
    training::Dataset ds;

    // Records are stored sparsely by design id; remap to dense indices.
    std::vector<Index> all_ids = manifest.train_ids;
    all_ids.insert(all_ids.end(), manifest.val_ids.begin(), manifest.val_ids.end());
    std::sort(all_ids.begin(), all_ids.end());

    std::unordered_map<Index, Index> dense;
    bool first = true;
    for (Index id : all_ids) {
        auto loaded = fom::load_record(record_path(dir, id));
        if (first) {
            ds.geometry = loaded.geometry;
            first = false;
        }
        dense[id] = static_cast<Index>(ds.records.size());
        ds.records.push_back(std::move(loaded.record));
    }
    for (Index id : manifest.train_ids) ds.train_indices.push_back(dense.at(id));
    for (Index id : manifest.val_ids) ds.val_indices.push_back(dense.at(id));
    return ds;
}

void cmd_fit_pod(const config::PipelineConfig& config) {
    const fs::path dir = config.dataset.output_dir;
    const auto dataset = load_dataset(dir);

    {
        const Matrix snapshots =
            pool_snapshots(dataset, dataset.train_indices, &fom::SimulationRecord::displacements);
        const auto basis = pod::fit_pod(snapshots, config.pod.variance_threshold,
                                        config.pod.displacement_mode_cap);
        pod::save_basis(displacement_basis_path(dir), basis);
    }
    {
        const Matrix g1 =
            pool_snapshots(dataset, dataset.train_indices, &fom::SimulationRecord::growth1);
        const auto basis1 =
            pod::fit_pod(g1, config.pod.variance_threshold, config.pod.growth_mode_cap);
        pod::save_basis(growth_basis_path(dir, 1), basis1);
    }
    {
        const Matrix g2 =
            pool_snapshots(dataset, dataset.train_indices, &fom::SimulationRecord::growth2);
        const auto basis2 =
            pod::fit_pod(g2, config.pod.variance_threshold, config.pod.growth_mode_cap);
        pod::save_basis(growth_basis_path(dir, 2), basis2);
    }
}

training::TrainResult cmd_train(const config::PipelineConfig& config, const std::string& variant) {
    const fs::path dir = config.dataset.output_dir;
    const auto dataset = load_dataset(dir);
    const auto basis = pod::load_basis(displacement_basis_path(dir));

    rom::NodeModel model = build_model(config, variant, dataset, basis);
    auto result = training::train(std::move(model), dataset, basis, config.train_config());

    rom::save_model(config.training.checkpoint, result.model, result.best);
    training::write_history_csv(config.training.history, result.history);
    return result;
}

eval::EvaluationReport cmd_evaluate(const config::PipelineConfig& config,
                                    const fs::path& checkpoint) {
    const fs::path dir = config.dataset.output_dir;
    const auto dataset = load_dataset(dir);
    const auto basis = pod::load_basis(displacement_basis_path(dir));
    auto loaded = rom::load_model(checkpoint);

    if (loaded.model.latent_dim != basis.retained + 1)
        throw DataError("cmd_evaluate: checkpoint latent dimension does not match the basis");
    if (loaded.model.variant == rom::Variant::D &&
        loaded.model.cnn_spec.height != dataset.geometry.elements_per_side())
        throw DataError("cmd_evaluate: checkpoint CNN extent does not match the dataset grid");

    const auto report = eval::evaluate_records(loaded.model, basis, dataset, dataset.val_indices,
                                               config.training.jobs);

    io::json j;
    j["checkpoint"] = checkpoint.string();
    j["variant"] = rom::variant_to_string(loaded.model.variant);
    j["n_validation"] = report.rows.size();
    j["median_final_rmse_mm"] = report.median_final_rmse;
    j["fraction_within"] = report.fraction_within;
    j["rows"] = io::json::array();
    for (const auto& row : report.rows) {
        j["rows"].push_back({{"id", row.record_id},
                             {"v_final", row.v_final},
                             {"n_steps", row.n_steps},
                             {"final_rmse_mm", row.final_rmse},
                             {"ag_true_cm2", row.ag_true},
                             {"ag_pred_cm2", row.ag_pred},
                             {"tolerance_cm2", row.tolerance},
                             {"within", row.within},
                             {"diverged", row.diverged}});
    }
    io::write_json(config.evaluation.report, j);

    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < report.curve.times.size(); ++k)
        rows.push_back({report.curve.times[k], report.curve.median[k], report.curve.q10[k],
                        report.curve.q90[k], static_cast<double>(report.curve.alive[k])});
    io::write_csv(config.evaluation.rmse_csv, {"time_days", "median_mm", "q10_mm", "q90_mm", "alive"},
                  rows);
    return report;
}

eval::BenchmarkReport cmd_benchmark(const config::PipelineConfig& config,
                                    const fs::path& checkpoint) {
    const fs::path dir = config.dataset.output_dir;
    const auto dataset = load_dataset(dir);
    const auto basis = pod::load_basis(displacement_basis_path(dir));
    auto loaded = rom::load_model(checkpoint);

    std::vector<sampling::SimulationParams> params_set;
    for (Index idx : dataset.val_indices)
        params_set.push_back(dataset.records[static_cast<std::size_t>(idx)].params);

    const auto report = eval::benchmark(loaded.model, basis, dataset.geometry, params_set);
    io::json j;
    j["n_rollouts"] = report.n_rollouts;
    j["rom_mean_s"] = report.rom_mean_s;
    j["rom_std_s"] = report.rom_std_s;
    j["fom_mean_s"] = report.fom_mean_s;
    j["speedup"] = report.speedup;
    io::write_json(config.evaluation.benchmark, j);
    return report;
}

} // namespace terom::pipeline
