#pragma once

// Name → aggregator factory used by the harness and the CLI.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/defenses/fedmid.hpp"
#include "fedmid/defenses/robust_stats.hpp"
#include "fedmid/defenses/similarity.hpp"
#include "fedmid/fl/aggregator.hpp"

namespace fedmid::defenses {

struct AggregatorParams {
    double attacker_ratio = 0.2;        // defender's estimate; drives trim_k, Krum f and DnC n_mal
    std::size_t total_clients = 20;     // N, for the DnC n_mal estimate
    bool size_weighted = true;          // FedAvg weighting by local dataset size
    std::optional<std::size_t> trim_k;
    std::optional<std::size_t> krum_f;
    std::size_t krum_m = 0;             // 0 = n − f
    std::size_t dnc_iterations = 1;
    double dnc_c = 1.0;
    std::size_t dnc_sub_dim = 10000;
    std::size_t bucket_size = 2;
    double rfa_smoothing = 1e-6;
    std::size_t rfa_max_iter = 100;
    ResidualBaseParams residual;
    FedCpaParams fedcpa;
    FedMidParams fedmid;
};

namespace detail {

inline std::size_t ratio_count(double ratio, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

inline fl::AggregationResult direct(fl::Update delta, nlohmann::json diag = nlohmann::json::object()) {
    fl::AggregationResult r;
    r.delta = std::move(delta);
    r.diagnostics = std::move(diag);
    return r;
}

/// Wraps a stateless function of the round context.
class FunctionAggregator final : public fl::Aggregator {
public:
    using Fn = std::function<fl::AggregationResult(const fl::RoundContext&)>;
    FunctionAggregator(std::string name, Fn fn, bool server = false)
        : name_(std::move(name)), fn_(std::move(fn)), server_(server) {}
    std::string name() const override { return name_; }
    fl::AggregationResult aggregate(const fl::RoundContext& ctx) override {
        ctx.validate();
        return fn_(ctx);
    }
    bool needs_server_update() const override { return server_; }

private:
    std::string name_;
    Fn fn_;
    bool server_;
};

class FoolsGoldAggregator final : public fl::Aggregator {
public:
    std::string name() const override { return "foolsgold"; }
    fl::AggregationResult aggregate(const fl::RoundContext& ctx) override {
        ctx.validate();
        std::vector<std::vector<double>> hist;
        for (std::size_t k = 0; k < ctx.size(); ++k) {
            history_.add(ctx.participants[k], ctx.updates[k]);
            hist.push_back(history_.get(ctx.participants[k]));
        }
        fl::AggregationResult r;
        r.weights = foolsgold_weights(hist);
        r.diagnostics["foolsgold_weights"] = r.weights;
        return r;
    }

private:
    FoolsGoldHistory history_;
};

}  // namespace detail

inline const std::vector<std::string>& aggregator_names() {
    static const std::vector<std::string> names{"fedavg",        "median", "trimmed_mean", "multi_krum",
                                                "foolsgold",     "residual_base", "rfa",   "dnc",
                                                "bucket",        "fltrust", "fedcpa",      "fedmid"};
    return names;
}

inline std::string aggregator_list() {
    std::string out;
    for (const auto& n : aggregator_names()) out += (out.empty() ? "" : ", ") + n;
    return out;
}

inline fl::AggregatorPtr make_aggregator(const std::string& name, const AggregatorParams& p = {}) {
    using detail::direct;
    using detail::FunctionAggregator;
    if (name == "fedavg") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            fl::AggregationResult r;
            r.weights = fl::fedavg_weights(ctx.dataset_sizes, p.size_weighted);
            return r;
        });
    }
    if (name == "median") {
        return std::make_unique<FunctionAggregator>(
            name, [](const fl::RoundContext& ctx) { return direct(coordinate_median<float>(ctx.updates)); });
    }
    if (name == "trimmed_mean") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            const std::size_t n = ctx.size();
            std::size_t k = p.trim_k.value_or(detail::ratio_count(p.attacker_ratio, n));
            k = std::min(k, (n - 1) / 2);
            return direct(trimmed_mean<float>(ctx.updates, k), {{"trim_k", k}});
        });
    }
    if (name == "multi_krum") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            const std::size_t f = p.krum_f.value_or(detail::ratio_count(p.attacker_ratio, ctx.size()));
            if (ctx.size() < 2) return direct(ctx.updates.front());
            auto sel = multi_krum<float>(ctx.updates, f, p.krum_m);
            return direct(std::move(sel.delta), {{"selected", sel.selected}, {"f", f}});
        });
    }
    if (name == "foolsgold") return std::make_unique<detail::FoolsGoldAggregator>();
    if (name == "residual_base") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            if (ctx.size() < 3) return direct(coordinate_median<float>(ctx.updates), {{"fallback", "median"}});
            return direct(residual_base<float>(ctx.updates, p.residual));
        });
    }
    if (name == "rfa") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            auto gm = geometric_median<float>(ctx.updates, p.rfa_smoothing, p.rfa_max_iter);
            return direct(std::move(gm.median), {{"iterations", gm.iterations}});
        });
    }
    if (name == "dnc") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            if (ctx.size() < 2) return direct(ctx.updates.front());
            DncParams d{p.dnc_iterations, p.dnc_c, p.dnc_sub_dim,
                        static_cast<std::size_t>(std::llround(p.attacker_ratio * static_cast<double>(p.total_clients)))};
            const auto cap = static_cast<std::size_t>(std::floor(static_cast<double>(ctx.size() - 1) / std::max(d.filter_multiplier, 1e-12)));
            d.n_mal = std::min(d.n_mal, cap);
            auto rng = make_rng(ctx.seed, Stream::Dnc, {ctx.round});
            auto sel = dnc<float>(ctx.updates, d, rng);
            return direct(std::move(sel.delta), {{"selected", sel.selected}, {"n_mal", d.n_mal}});
        });
    }
    if (name == "bucket") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            auto rng = make_rng(ctx.seed, Stream::Bucketing, {ctx.round});
            std::function<fl::Update(Updates<float>)> inner = [&](Updates<float> u) {
                return geometric_median<float>(u, p.rfa_smoothing, p.rfa_max_iter).median;
            };
            return direct(bucketing<float>(ctx.updates, p.bucket_size, rng, inner));
        });
    }
    if (name == "fltrust") {
        return std::make_unique<FunctionAggregator>(
            name,
            [](const fl::RoundContext& ctx) {
                if (!ctx.server_update) throw std::invalid_argument("fltrust needs a server update");
                auto r = fltrust<float>(ctx.updates, *ctx.server_update);
                return direct(std::move(r.delta), {{"trust", r.trust}});
            },
            true);
    }
    if (name == "fedcpa") {
        return std::make_unique<FunctionAggregator>(name, [p](const fl::RoundContext& ctx) {
            if (ctx.size() < 2) {
                fl::AggregationResult r;
                r.weights = {1.0};
                return r;
            }
            auto res = fedcpa<float>(ctx.updates, *ctx.global, p.fedcpa);
            fl::AggregationResult r;
            r.weights = res.weights;
            r.diagnostics = {{"scores", res.scores}};
            return r;
        });
    }
    if (name == "fedmid") return std::make_unique<FedMidAggregator>(p.fedmid);
    throw std::invalid_argument("unknown aggregator '" + name + "'; registered: " + aggregator_list());
}

}  // namespace fedmid::defenses
