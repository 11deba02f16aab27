#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmid/fl/federation.hpp"

namespace fedmid::fl {

/// Everything an aggregation rule may look at in one round.
struct RoundContext {
    std::size_t round = 0;
    std::vector<std::size_t> participants;  // client ids, ascending
    const Update* global = nullptr;
    std::vector<Update> updates;            // aligned with participants
    std::vector<std::size_t> dataset_sizes; // aligned with participants
    const Model* model = nullptr;           // architecture template
    std::uint64_t seed = 0;                 // master seed
    std::optional<Update> server_update;    // root-dataset update, when requested

    std::size_t size() const { return participants.size(); }

    void validate() const {
        if (!global) throw std::invalid_argument("round context has no global parameters");
        if (participants.empty()) throw std::invalid_argument("round has no participants");
        if (updates.size() != participants.size() || dataset_sizes.size() != participants.size()) {
            throw std::invalid_argument("round context arrays are misaligned");
        }
        for (const auto& u : updates) global->require_same_layout(u);
    }
};

/// Either a directly aggregated Δ or per-participant weights.
struct AggregationResult {
    std::optional<Update> delta;
    std::vector<double> weights;
    // Weights are applied verbatim; otherwise they are renormalized to sum 1.
    bool weights_final = false;
    nlohmann::json diagnostics = nlohmann::json::object();
};

class Aggregator {
public:
    virtual ~Aggregator() = default;
    virtual std::string name() const = 0;
    virtual AggregationResult aggregate(const RoundContext& ctx) = 0;
    /// True when the rule needs a server-side update trained on root data.
    virtual bool needs_server_update() const { return false; }
};

using AggregatorPtr = std::unique_ptr<Aggregator>;

/// Applies an aggregation result to the global parameters. Returns the new
/// global vector; `applied` receives the effective per-participant weights
/// (empty when the rule returned Δ directly).
inline Update apply_aggregation(const RoundContext& ctx, AggregationResult& result, std::vector<double>* applied = nullptr) {
    if (result.delta) {
        ctx.global->require_same_layout(*result.delta);
        if (!result.delta->all_finite()) throw std::runtime_error("aggregator produced a non-finite update");
        if (applied) applied->clear();
        return *ctx.global + *result.delta;
    }
    if (result.weights.size() != ctx.size()) throw std::logic_error("aggregator returned the wrong number of weights");
    std::vector<double> w = result.weights;
    for (const auto v : w) {
        if (!(v >= 0.0)) throw std::runtime_error("aggregator returned a negative or non-finite weight");
    }
    if (!result.weights_final) {
        double total = 0.0;
        for (const auto v : w) total += v;
        if (total > 0.0) {
            for (auto& v : w) v /= total;
        } else {
            std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
            result.diagnostics["fallback"] = "all weights zero; uniform";
        }
    }
    if (applied) *applied = w;
    return weighted_aggregate(*ctx.global, ctx.updates, w);
}

}  // namespace fedmid::fl
