#pragma once

#include "terom/config.hpp"
#include "terom/evaluation.hpp"
#include "terom/training.hpp"
#include "terom/types.hpp"

#include <filesystem>

namespace terom::pipeline {

/// File layout inside the dataset directory.
std::filesystem::path record_path(const std::filesystem::path& dir, Index id);
std::filesystem::path manifest_path(const std::filesystem::path& dir);
std::filesystem::path params_csv_path(const std::filesystem::path& dir);
std::filesystem::path displacement_basis_path(const std::filesystem::path& dir);
std::filesystem::path growth_basis_path(const std::filesystem::path& dir, int fiber);

struct GenerateSummary {
    Index n_requested = 0;
    Index n_converged = 0;
    double converged_fraction() const {
        return n_requested > 0
                   ? static_cast<double>(n_converged) / static_cast<double>(n_requested)
                   : 0.0;
    }
};

/// Sample the design, run the full-order simulations (parallel across
/// simulations), persist converged records, the parameter CSV, and the
/// train/validation manifest.
GenerateSummary cmd_generate(const config::PipelineConfig& config);

/// Fit the displacement basis and the two growth-field bases from the
/// training split and write them next to the dataset.
void cmd_fit_pod(const config::PipelineConfig& config);

/// Train one variant and write the best-validation checkpoint plus the
/// per-epoch history CSV.
training::TrainResult cmd_train(const config::PipelineConfig& config, const std::string& variant);

/// Roll the checkpoint out on the validation split; writes the JSON report
/// and the RMSE-curve CSV.
eval::EvaluationReport cmd_evaluate(const config::PipelineConfig& config,
                                    const std::filesystem::path& checkpoint);

/// Wall-clock ROM vs FOM comparison on the validation parameter sets.
eval::BenchmarkReport cmd_benchmark(const config::PipelineConfig& config,
                                    const std::filesystem::path& checkpoint);

/// Load the converged records plus split indices for the manifest.
training::Dataset load_dataset(const std::filesystem::path& dir);

void write_manifest(const std::filesystem::path& path, const sampling::DatasetManifest& manifest);
sampling::DatasetManifest read_manifest(const std::filesystem::path& path);

} // namespace terom::pipeline
