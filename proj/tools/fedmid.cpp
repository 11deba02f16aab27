#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "fedmid/harness/diagnostics.hpp"
#include "fedmid/harness/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedmid;
using namespace fedmid::harness;

namespace {

ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
    auto cfg = load_config(path);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        cfg.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

void print_round(const RoundRecord& r) {
    std::printf("round %3zu  acc %.4f  asr %.4f  agg %.2f ms\n", r.round, r.acc, r.asr, r.agg_time_ms);
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning poisoning simulator"};
    app.require_subcommand(1);

    std::string config_path, out, axis, values;
    std::vector<std::string> sets;
    std::size_t seeds = 1;
    bool quiet = false;

    auto* run = app.add_subcommand("run", "Run one experiment");
    run->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    run->add_option("--out", out, "Output directory (default ./runs/<timestamp>-<hash>)");
    run->add_option("--seeds", seeds, "Number of seed replicates")->check(CLI::PositiveNumber);
    run->add_option("--set", sets, "Override a config key (key=value)");
    run->add_flag("--quiet", quiet, "No per-round output");

    auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a config key");
    sweep->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--axis", axis, "Config key to vary")->required();
    sweep->add_option("--values", values, "Comma-separated values")->required();
    sweep->add_option("--out", out, "Output directory");
    sweep->add_option("--seeds", seeds, "Number of seed replicates")->check(CLI::PositiveNumber);
    sweep->add_option("--set", sets, "Override a config key (key=value)");

    auto* diag = app.add_subcommand("diagnose", "Parameter versus relational divergence report");
    diag->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    diag->add_option("--out", out, "Write report.json into this directory");
    diag->add_option("--set", sets, "Override a config key (key=value)");

    auto* list = app.add_subcommand("list-aggregators", "Print registered aggregation rules");

    CLI11_PARSE(app, argc, argv);

    try {
        if (list->parsed()) {
            for (const auto& n : defenses::aggregator_names()) std::cout << n << "\n";
            return 0;
        }
        const auto cfg = load_with_overrides(config_path, sets);
        if (run->parsed()) {
            const fs::path dir = !out.empty() ? fs::path(out) : !cfg.out_dir.empty() ? fs::path(cfg.out_dir) : default_out_dir(cfg);
            const auto results = run_seeds(cfg, dir, seeds, quiet ? std::function<void(const RoundRecord&)>{} : print_round);
            for (const auto& r : results) {
                std::cout << "ACC " << format_percent(r.metrics.acc) << "  ASR " << format_percent(r.metrics.asr) << "\n";
            }
            std::cout << "outputs in " << dir.string() << "\n";
        } else if (sweep->parsed()) {
            const fs::path dir = !out.empty() ? fs::path(out) : default_out_dir(cfg);
            for (const auto& d : run_sweep(cfg, axis, split_values(values), dir, seeds)) std::cout << d.string() << "\n";
        } else if (diag->parsed()) {
            const auto report = diagnose_divergence(cfg);
            std::printf("epoch  param_rel  relational_rel  param_ratio  relational_ratio\n");
            for (const auto& e : report.epochs) {
                std::printf("%5zu  %9.4f  %14.4f  %11.4f  %16.4f\n", e.epoch, e.param_relative, e.relational_relative,
                            e.param_ratio, e.relational_ratio);
            }
            std::printf("\nlayer variance\n");
            for (const auto& v : report.layer_variance) std::printf("  layer %zu %-14s %.4e\n", v.layer, v.name.c_str(), v.variance);
            if (!out.empty()) {
                fs::create_directories(out);
                std::ofstream(fs::path(out) / "report.json") << report.to_json().dump(2) << "\n";
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
