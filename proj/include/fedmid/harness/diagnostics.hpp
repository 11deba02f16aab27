#pragma once

// Parameter-space versus relational-space divergence of independently
// trained clients that start from one initialization.

#include <cmath>
#include <vector>

#include <json.hpp>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/core/parallel.hpp"
#include "fedmid/defenses/fedmid.hpp"
#include "fedmid/fl/federation.hpp"
#include "fedmid/harness/config.hpp"
#include "fedmid/harness/simulation.hpp"

namespace fedmid::harness {

struct EpochDivergence {
    std::size_t epoch = 0;  // 1-based
    double param_distance = 0.0;
    double relational_distance = 0.0;
    double param_relative = 0.0;       // / epoch-1 value
    double relational_relative = 0.0;
    double param_ratio = 0.0;          // dist_b / dist_{b,m}, attacker run
    double relational_ratio = 0.0;
};

struct LayerVariance {
    std::size_t layer = 0;
    std::string name;
    double variance = 0.0;  // mean over coordinates of the across-client variance
};

struct DivergenceReport {
    std::size_t clients = 0;
    std::size_t attackers = 0;
    std::vector<EpochDivergence> epochs;
    std::vector<LayerVariance> layer_variance;

    bool param_increasing() const {
        for (std::size_t e = 1; e < epochs.size(); ++e) {
            if (epochs[e].param_relative < epochs[e - 1].param_relative) return false;
        }
        return epochs.size() > 1 && epochs.back().param_relative > 1.0;
    }
    bool relational_grows_slower() const {
        return epochs.back().relational_relative < epochs.back().param_relative;
    }
    bool relational_separates_better() const {
        return epochs.back().relational_ratio < epochs.back().param_ratio;
    }

    nlohmann::json to_json() const {
        nlohmann::json e = nlohmann::json::array();
        for (const auto& x : epochs) {
            e.push_back({{"epoch", x.epoch},
                         {"param_distance", x.param_distance},
                         {"relational_distance", x.relational_distance},
                         {"param_relative", x.param_relative},
                         {"relational_relative", x.relational_relative},
                         {"param_ratio", x.param_ratio},
                         {"relational_ratio", x.relational_ratio}});
        }
        nlohmann::json v = nlohmann::json::array();
        for (const auto& x : layer_variance) v.push_back({{"layer", x.layer}, {"name", x.name}, {"variance", x.variance}});
        return {{"clients", clients},
                {"attackers", attackers},
                {"epochs", e},
                {"layer_variance", v},
                {"param_increasing", param_increasing()},
                {"relational_grows_slower", relational_grows_slower()},
                {"relational_separates_better", relational_separates_better()}};
    }
};

namespace detail {

struct PairStats {
    double all = 0.0;        // mean over every pair
    double benign = 0.0;     // mean over benign-benign pairs
    double mixed = 0.0;      // mean over benign-attacker pairs
};

inline PairStats pair_means(const std::vector<std::vector<double>>& d, const std::vector<bool>& attacker) {
    const std::size_t n = d.size();
    double all = 0.0, bb = 0.0, bm = 0.0;
    std::size_t na = 0, nbb = 0, nbm = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            all += d[i][j];
            ++na;
            if (!attacker[i] && !attacker[j]) {
                bb += d[i][j];
                ++nbb;
            } else if (attacker[i] != attacker[j]) {
                bm += d[i][j];
                ++nbm;
            }
        }
    }
    return {na ? all / na : 0.0, nbb ? bb / nbb : 0.0, nbm ? bm / nbm : 0.0};
}

struct DistancePair {
    std::vector<std::vector<double>> param;
    std::vector<std::vector<double>> relational;
};

inline DistancePair client_distances(const std::vector<fl::Model>& models, const Tensor<float>& probe, std::size_t threads) {
    const std::size_t n = models.size();
    const auto mask = models.front().layout()->trainable_mask();
    std::vector<std::vector<defenses::DistanceMatrix>> sig(n);
    parallel_for(n, threads, [&](std::size_t i) { sig[i] = defenses::relational_signature(models[i], probe); });
    DistancePair out{std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0)),
                     std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0))};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto a = models[i].params(), b = models[j].params();
            double sq = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                if (!mask[k]) continue;
                const double d = static_cast<double>(a[k]) - b[k];
                sq += d * d;
            }
            double rel = 0.0;
            for (std::size_t l = 0; l < sig[i].size(); ++l) rel += defenses::layer_distance(sig[i][l], sig[j][l]);
            rel /= static_cast<double>(sig[i].size());
            out.param[i][j] = out.param[j][i] = std::sqrt(sq);
            out.relational[i][j] = out.relational[j][i] = rel;
        }
    }
    return out;
}

/// Trains every client for `epochs` full passes, calling `observe` after each.
template <typename Observe>
void train_clients(const fl::Model& init, const std::vector<data::Dataset>& datasets, const ExperimentConfig& cfg,
                   std::uint64_t run_tag, std::size_t threads, Observe&& observe) {
    const std::size_t n = datasets.size();
    std::vector<fl::Model> models(n, init);
    std::vector<nn::Sgd<float>> opts(n, nn::Sgd<float>(cfg.lr, cfg.momentum, cfg.weight_decay));
    for (std::size_t e = 0; e < cfg.diag_epochs; ++e) {
        parallel_for(n, threads, [&](std::size_t c) {
            auto rng = make_rng(cfg.seed, Stream::Diagnostics, {run_tag, cfg.diag_same_order ? 0 : c, e});
            for (const auto& idx : fl::epoch_batches(datasets[c].size(), cfg.batch_size, rng)) {
                nn::backward_sgd_step(models[c], opts[c], datasets[c].batch(idx), datasets[c].batch_labels(idx));
            }
        });
        observe(e, models);
    }
}

}  // namespace detail

/// Benign run: every client trains on the same data with its own batch order.
/// Attacker run: the same, with a fraction of clients on label-flipped data.
inline DivergenceReport diagnose_divergence(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::size_t threads = cfg.threads ? cfg.threads : default_thread_count();
    auto tt = load_data(cfg);
    std::vector<std::size_t> idx(std::min(cfg.diag_samples, tt.train.size()));
    std::iota(idx.begin(), idx.end(), 0);
    const auto shared = tt.train.subset(idx);

    auto irng = make_rng(cfg.seed, Stream::Init);
    const auto init = model_builder(cfg, shared.sample_shape, cfg.num_classes).build<float>(irng);
    auto prng = make_rng(cfg.seed, Stream::Diagnostics, {~0ull});
    const auto probe = attacks::standard_normal_probe(init.arch().input_shape, cfg.probe_samples, prng);

    const std::size_t n = cfg.clients;
    DivergenceReport report;
    report.clients = n;
    report.epochs.resize(cfg.diag_epochs);

    const std::vector<bool> none(n, false);
    detail::train_clients(init, std::vector<data::Dataset>(n, shared), cfg, 0, threads,
                          [&](std::size_t e, const std::vector<fl::Model>& models) {
        const auto d = detail::client_distances(models, probe, threads);
        auto& ep = report.epochs[e];
        ep.epoch = e + 1;
        ep.param_distance = detail::pair_means(d.param, none).all;
        ep.relational_distance = detail::pair_means(d.relational, none).all;
        if (e + 1 < cfg.diag_epochs) return;
        const auto& layout = *init.layout();
        for (const auto& entry : layout.entries()) {
            if (!entry.trainable) continue;
            double total = 0.0;
            for (std::size_t k = entry.offset; k < entry.offset + entry.size(); ++k) {
                double mean = 0.0;
                for (const auto& m : models) mean += m.params()[k] - init.params()[k];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (const auto& m : models) {
                    const double u = m.params()[k] - init.params()[k] - mean;
                    var += u * u;
                }
                total += var / static_cast<double>(n);
            }
            report.layer_variance.push_back({entry.layer, entry.name, total / static_cast<double>(entry.size())});
        }
    });
    const double p0 = report.epochs.front().param_distance, r0 = report.epochs.front().relational_distance;
    for (auto& ep : report.epochs) {
        ep.param_relative = p0 > 0.0 ? ep.param_distance / p0 : 0.0;
        ep.relational_relative = r0 > 0.0 ? ep.relational_distance / r0 : 0.0;
    }

    const std::size_t n_att = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.attacker_ratio * static_cast<double>(n))));
    auto arng = make_rng(cfg.seed, Stream::Attackers);
    std::vector<bool> attacker(n, false);
    for (const auto a : data::sample_without_replacement(n, n_att, arng)) attacker[a] = true;
    report.attackers = n_att;
    std::vector<data::Dataset> datasets;
    for (std::size_t c = 0; c < n; ++c) {
        if (!attacker[c]) {
            datasets.push_back(shared);
            continue;
        }
        auto rng = make_rng(cfg.seed, Stream::Poison, {c});
        datasets.push_back(attacks::poison_untargeted(shared, cfg.pollution_ratio, rng));
    }
    detail::train_clients(init, datasets, cfg, 1, threads, [&](std::size_t e, const std::vector<fl::Model>& models) {
        const auto d = detail::client_distances(models, probe, threads);
        const auto p = detail::pair_means(d.param, attacker), r = detail::pair_means(d.relational, attacker);
        report.epochs[e].param_ratio = p.mixed > 0.0 ? p.benign / p.mixed : 0.0;
        report.epochs[e].relational_ratio = r.mixed > 0.0 ? r.benign / r.mixed : 0.0;
    });
    return report;
}

}  // namespace fedmid::harness
