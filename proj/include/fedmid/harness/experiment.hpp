#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmid/harness/config.hpp"
#include "fedmid/harness/metrics.hpp"
#include "fedmid/harness/simulation.hpp"

namespace fedmid::harness {

namespace fs = std::filesystem;

struct RunSummary {
    FinalMetrics metrics;
    std::string config_hash;
    std::vector<RoundRecord> records;
    std::vector<std::size_t> attackers;

    nlohmann::json to_json(const ExperimentConfig& cfg) const {
        auto finite_mean = [this](auto field, std::size_t from_round) {
            double s = 0.0;
            std::size_t n = 0;
            for (const auto& r : records) {
                const double v = field(r);
                if (r.round >= from_round && std::isfinite(v)) {
                    s += v;
                    ++n;
                }
            }
            return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
        };
        const auto last = records.empty() ? RoundRecord{} : records.back();
        nlohmann::json j = {
            {"acc_mean", metrics.acc.mean},
            {"acc_std", metrics.acc.std},
            {"asr_mean", metrics.asr.mean},
            {"asr_std", metrics.asr.std},
            {"window", metrics.window},
            {"config_hash", config_hash},
            {"acc", format_percent(metrics.acc)},
            {"asr", format_percent(metrics.asr)},
            {"rounds", records.size()},
            {"aggregator", cfg.aggregator},
            {"scenario", attacks::to_string(cfg.scenario)},
            {"seed", cfg.seed},
            {"attackers", attackers},
            {"mean_agg_time_ms", finite_mean([](const RoundRecord& r) { return r.agg_time_ms; }, 1)},
            {"total_agg_time_ms", last.cumulative_agg_ms},
            {"total_wall_time_ms", last.cumulative_wall_ms},
            {"attacker_mean_weight", finite_mean([](const RoundRecord& r) { return r.attacker_mean_weight; }, 1)},
            {"benign_mean_weight", finite_mean([](const RoundRecord& r) { return r.benign_mean_weight; }, 1)},
        };
        return j;
    }
};

namespace detail {

inline std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.8g", v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
}

}  // namespace detail

inline std::string csv_header(std::size_t clients) {
    std::string h = "round,acc,asr,agg_time_ms,attacker_mean_weight,benign_mean_weight";
    for (std::size_t c = 0; c < clients; ++c) h += ",w_" + std::to_string(c);
    return h + "\n";
}

inline std::string csv_row(const RoundRecord& r, bool timing) {
    using detail::csv_number;
    std::string row = std::to_string(r.round) + "," + csv_number(r.acc) + "," + csv_number(r.asr) + "," +
                      csv_number(timing ? r.agg_time_ms : 0.0) + "," + csv_number(r.attacker_mean_weight) + "," +
                      csv_number(r.benign_mean_weight);
    for (const auto w : r.weights) row += "," + csv_number(w);
    return row + "\n";
}

/// Runs one configuration. When `out_dir` is non-empty writes metrics.csv,
/// summary.json, config.txt and rounds.jsonl there.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir = {},
                                 const std::function<void(const RoundRecord&)>& on_round = {}) {
    Simulation sim(cfg);
    const bool timing = cfg.timing == TimingMode::Wall;
    RunSummary s;
    s.config_hash = cfg.hash();
    s.attackers = sim.federation().attackers;
    std::ofstream csv, jsonl;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        detail::write_text(out_dir / "config.txt", cfg.to_text());
        csv.open(out_dir / "metrics.csv", std::ios::binary);
        jsonl.open(out_dir / "rounds.jsonl", std::ios::binary);
        if (!csv || !jsonl) throw std::runtime_error("cannot create output files in '" + out_dir.string() + "'");
        csv << csv_header(cfg.clients);
    }
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        auto rec = sim.run_round();
        if (!timing) rec.agg_time_ms = rec.cumulative_agg_ms = rec.cumulative_wall_ms = 0.0;
        if (csv.is_open()) {
            csv << csv_row(rec, timing);
            csv.flush();
            nlohmann::json line = {{"round", rec.round},
                                   {"participants", rec.participants},
                                   {"update_norms", rec.update_norms},
                                   {"cumulative_agg_ms", rec.cumulative_agg_ms},
                                   {"cumulative_wall_ms", rec.cumulative_wall_ms},
                                   {"diagnostics", rec.diagnostics}};
            jsonl << line.dump() << "\n";
        }
        if (on_round) on_round(rec);
        s.records.push_back(std::move(rec));
    }
    std::vector<double> acc, asr;
    for (const auto& r : s.records) {
        acc.push_back(r.acc);
        asr.push_back(r.asr);
    }
    s.metrics = final_metrics(acc, asr, cfg.window);
    if (!out_dir.empty()) detail::write_text(out_dir / "summary.json", s.to_json(cfg).dump(2) + "\n");
    return s;
}

/// `k` replicates with seeds seed, seed+1, ... in seed_<s> subdirectories,
/// plus an across-seed summary.json at the top.
inline std::vector<RunSummary> run_seeds(ExperimentConfig cfg, const fs::path& out_dir, std::size_t k,
                                         const std::function<void(const RoundRecord&)>& on_round = {}) {
    if (k == 0) throw std::invalid_argument("--seeds must be at least 1");
    if (k == 1) return {run_experiment(cfg, out_dir, on_round)};
    std::vector<RunSummary> out;
    const auto base = cfg.seed;
    nlohmann::json per_seed = nlohmann::json::array();
    std::vector<double> acc, asr;
    for (std::size_t i = 0; i < k; ++i) {
        cfg.seed = base + i;
        out.push_back(run_experiment(cfg, out_dir.empty() ? fs::path{} : out_dir / ("seed_" + std::to_string(cfg.seed)), on_round));
        per_seed.push_back(out.back().to_json(cfg));
        acc.push_back(out.back().metrics.acc.mean);
        asr.push_back(out.back().metrics.asr.mean);
    }
    if (!out_dir.empty()) {
        cfg.seed = base;
        const auto a = mean_std(acc), b = mean_std(asr);
        nlohmann::json j = {{"acc_mean", a.mean}, {"acc_std", a.std}, {"asr_mean", b.mean}, {"asr_std", b.std},
                            {"window", cfg.window}, {"config_hash", cfg.hash()}, {"seeds", k},
                            {"acc", format_percent(a)}, {"asr", format_percent(b)}, {"per_seed", per_seed}};
        detail::write_text(out_dir / "summary.json", j.dump(2) + "\n");
    }
    return out;
}

inline std::vector<std::string> split_values(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

/// One run directory per value of `axis`, named <axis>-<value>.
inline std::vector<fs::path> run_sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<std::string>& values,
                                       const fs::path& out_dir, std::size_t seeds = 1) {
    if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
    std::vector<ExperimentConfig> configs;
    for (const auto& v : values) {
        auto c = cfg;
        c.set(axis, v);
        c.validate();
        configs.push_back(std::move(c));
    }
    std::vector<fs::path> dirs;
    for (std::size_t i = 0; i < values.size(); ++i) {
        dirs.push_back(out_dir / (axis + "-" + values[i]));
        run_seeds(configs[i], dirs.back(), seeds);
    }
    return dirs;
}

/// ./runs/<UTC timestamp>-<config hash>
inline fs::path default_out_dir(const ExperimentConfig& cfg) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return fs::path("runs") / (std::string(buf) + "-" + cfg.hash());
}

}  // namespace fedmid::harness
