#include "terom/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const terom::ConfigError*>(&e)) return 2;
    if (dynamic_cast<const std::invalid_argument*>(&e)) return 2;
    if (dynamic_cast<const terom::DataError*>(&e)) return 3;
    if (dynamic_cast<const terom::NumericError*>(&e)) return 4;
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"terom: reduced-order tissue-expansion pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    long long seed_override = -1;
    long long jobs_override = -1;
    app.add_option("--config", config_path, "pipeline configuration file");
    app.add_option("--seed", seed_override, "override dataset and training seeds");
    app.add_option("--jobs", jobs_override, "override worker count");

    auto* c_generate = app.add_subcommand("generate", "run the full-order dataset campaign");
    auto* c_fit = app.add_subcommand("fit-pod", "fit displacement and growth POD bases");
    auto* c_train = app.add_subcommand("train", "train one latent-dynamics variant");
    auto* c_eval = app.add_subcommand("evaluate", "roll out a checkpoint on the validation split");
    auto* c_bench = app.add_subcommand("benchmark", "time ROM rollouts against the full-order model");

    std::string variant = "D";
    c_train->add_option("--variant", variant, "model variant A|B|C|D");
    std::string checkpoint;
    c_eval->add_option("--checkpoint", checkpoint, "model checkpoint file");
    c_bench->add_option("--checkpoint", checkpoint, "model checkpoint file");

    CLI11_PARSE(app, argc, argv);

    try {
        terom::config::PipelineConfig cfg;
        if (!config_path.empty()) cfg = terom::config::load_config(config_path);
        if (seed_override >= 0) {
            cfg.dataset.seed = static_cast<std::uint64_t>(seed_override);
            cfg.training.seed = static_cast<std::uint64_t>(seed_override);
        }
        if (jobs_override >= 0) {
            cfg.dataset.jobs = jobs_override;
            cfg.training.jobs = jobs_override;
        }
        if (checkpoint.empty()) checkpoint = cfg.training.checkpoint;

        if (c_generate->parsed()) {
            const auto summary = terom::pipeline::cmd_generate(cfg);
            std::printf("generated %lld/%lld converged simulations (%.1f%%)\n",
                        static_cast<long long>(summary.n_converged),
                        static_cast<long long>(summary.n_requested),
                        100.0 * summary.converged_fraction());
            return summary.converged_fraction() >= 0.8 ? 0 : 4;
        }
        if (c_fit->parsed()) {
            terom::pipeline::cmd_fit_pod(cfg);
            std::printf("bases written to %s\n", cfg.dataset.output_dir.c_str());
            return 0;
        }
        if (c_train->parsed()) {
            const auto result = terom::pipeline::cmd_train(cfg, variant);
            std::printf("variant %s: best val one-step loss %.6e at epoch %lld\n", variant.c_str(),
                        result.best.val_loss, static_cast<long long>(result.best.epoch));
            return 0;
        }
        if (c_eval->parsed()) {
            const auto report = terom::pipeline::cmd_evaluate(cfg, checkpoint);
            std::printf("median final RMSE %.4f mm, fraction within tolerance %.3f\n",
                        report.median_final_rmse, report.fraction_within);
            return 0;
        }
        if (c_bench->parsed()) {
            const auto report = terom::pipeline::cmd_benchmark(cfg, checkpoint);
            std::printf("ROM %.4f +/- %.4f s per rollout, FOM %.3f s, speedup %.0fx\n",
                        report.rom_mean_s, report.rom_std_s, report.fom_mean_s, report.speedup);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 0;
}
