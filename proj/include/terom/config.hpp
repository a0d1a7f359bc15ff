#pragma once

#include "terom/training.hpp"
#include "terom/types.hpp"

#include <filesystem>
#include <string>

namespace terom::config {

/// Whole-pipeline configuration. Parsed from a sectioned key = value file;
/// unknown sections or keys are rejected.
struct PipelineConfig {
    struct Geometry {
        Index nodes_per_side = 31;
        double side_length = 300.0;
        double thickness = 3.0;
        double expander_diameter = 130.0;
    } geometry;

    struct DatasetCfg {
        Index n = 200;
        std::uint64_t seed = 1234;
        double val_fraction = 0.20;
        std::string output_dir = "data";
        Index jobs = 2;
    } dataset;

    struct PodCfg {
        double variance_threshold = 0.9999;
        Index displacement_mode_cap = 16;
        Index growth_mode_cap = 16;
    } pod;

    struct ModelCfg {
        std::string variant = "D";
        Index hidden1 = 128;
        Index hidden2 = 128;
    } model;

    struct TrainingCfg {
        Index epochs = 120;
        Index warmup = -1; // auto-scale from the canonical plan
        double lr = 1e-3;
        Index one_step_batch = 512;
        Index rollout_batch = 40;
        double lambda_roll = 1.8e-3;
        double lambda_ag = 0.082;
        double cap = 0.033;
        double tail_fraction = 0.30;
        double ag_offset = 10.0;
        double huber_beta = 1.0;
        bool full_graph = false;
        std::uint64_t seed = 7;
        Index jobs = 2;
        std::string checkpoint = "model.teb";
        std::string history = "history.csv";
    } training;

    struct EvaluationCfg {
        std::string report = "report.json";
        std::string rmse_csv = "rmse.csv";
        std::string benchmark = "benchmark.json";
    } evaluation;

    training::TrainConfig train_config() const;
    training::LossConfig loss_config() const;
    growth::GridGeometry grid() const;
};

PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const PipelineConfig& config);

} // namespace terom::config
