#pragma once

// Relational-distance defense: every client model embeds a shared synthetic
// probe batch, pairwise sample distances at each tap form a matrix, and
// clients whose matrices sit far from everyone else's lose weight.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/core/parallel.hpp"
#include "fedmid/core/rng.hpp"
#include "fedmid/defenses/robust_stats.hpp"
#include "fedmid/fl/aggregator.hpp"
#include "fedmid/nn/model.hpp"

namespace fedmid::defenses {

struct DistanceMatrix {
    std::size_t layer = 0;
    std::size_t m = 0;
    std::vector<double> data;  // m × m, row-major

    double operator()(std::size_t a, std::size_t b) const { return data[a * m + b]; }
};

/// S[a, b] = ‖z_a − z_b‖₂ over the flattened embeddings (rows of `emb`).
template <typename T>
DistanceMatrix build_distance_matrix(const Tensor<T>& emb, std::size_t layer = 0) {
    if (emb.shape.size() != 2) throw std::invalid_argument("embeddings must be (M, dim)");
    const std::size_t m = emb.shape[0], dim = emb.shape[1];
    if (m < 2) throw std::invalid_argument("distance matrix needs at least 2 embeddings");
    DistanceMatrix s{layer, m, std::vector<double>(m * m, 0.0)};
    const T* z = emb.data.data();
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = static_cast<double>(z[a * dim + k]) - static_cast<double>(z[b * dim + k]);
                acc += d * d;
            }
            s.data[a * m + b] = s.data[b * m + a] = std::sqrt(acc);
        }
    }
    return s;
}

/// Mean absolute entrywise difference (1/M²)·Σ|S_i − S_j|.
inline double layer_distance(const DistanceMatrix& a, const DistanceMatrix& b) {
    if (a.m != b.m || a.data.size() != b.data.size()) throw std::invalid_argument("distance matrices differ in size");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    return acc / static_cast<double>(a.m * a.m);
}

namespace detail {

/// Min-max to [0, 1]; an all-equal input maps to 0.5 everywhere.
inline std::vector<double> min_max(std::span<const double> v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.5);
    if (*hi > *lo) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
    }
    return out;
}

}  // namespace detail

/// anomaly[i][l] = median over j ≠ i of the client-pair layer distance.
/// `pair[l]` is an n × n matrix of layer distances.
inline std::vector<std::vector<double>> anomaly_scores(const std::vector<std::vector<double>>& pair, std::size_t n) {
    if (n < 2) throw std::invalid_argument("anomaly scores need at least 2 clients");
    std::vector<std::vector<double>> anom(n, std::vector<double>(pair.size()));
    std::vector<double> row;
    for (std::size_t l = 0; l < pair.size(); ++l) {
        for (std::size_t i = 0; i < n; ++i) {
            row.clear();
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) row.push_back(pair[l][i * n + j]);
            }
            anom[i][l] = detail::median_inplace(row);
        }
    }
    return anom;
}

struct Normality {
    std::vector<std::vector<double>> normalized;  // [client][layer]
    std::vector<double> raw;                      // 𝒩
    std::vector<double> scaled;                   // 𝒩̃
};

inline Normality normality_scores(const std::vector<std::vector<double>>& anomaly) {
    const std::size_t n = anomaly.size();
    if (n < 2) throw std::invalid_argument("normality needs at least 2 clients");
    const std::size_t layers = anomaly.front().size();
    if (layers == 0) throw std::invalid_argument("normality needs at least one layer");
    Normality out{std::vector<std::vector<double>>(n, std::vector<double>(layers)), std::vector<double>(n, 0.0), {}};
    std::vector<double> col(n);
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t i = 0; i < n; ++i) col[i] = anomaly[i].at(l);
        const auto norm = detail::min_max(col);
        for (std::size_t i = 0; i < n; ++i) {
            out.normalized[i][l] = norm[i];
            out.raw[i] -= norm[i];
        }
    }
    for (auto& v : out.raw) v /= static_cast<double>(layers);
    out.scaled = detail::min_max(out.raw);
    return out;
}

/// Clamp₀₁(ln(x / (1 − x)) + 0.5) with the limits 0 and 1 at the ends.
inline double inverse_sigmoid_weight(double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    return std::clamp(std::log(x / (1.0 - x)) + 0.5, 0.0, 1.0);
}

struct ClientWeights {
    std::vector<double> raw;    // before the overrides
    std::vector<double> a;      // after majority and zero overrides
    std::size_t zeroed = 0;     // client forced to zero
};

/// Inverse-sigmoid weights, then a = 1 for the ⌈n/2⌉ largest 𝒩̃ (ties to the
/// lower index) and a = 0 for the smallest pre-override weight. Ties for the
/// zero override go to the smaller 𝒩̃, then to the higher index, so the zeroed
/// client comes from the opposite end of the ranking to the majority.
inline ClientWeights weights_from_normality(std::span<const double> scaled) {
    const std::size_t n = scaled.size();
    if (n == 0) throw std::invalid_argument("no clients to weight");
    ClientWeights w;
    w.raw.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(scaled[i] >= 0.0 && scaled[i] <= 1.0)) throw std::invalid_argument("normalized normality must lie in [0, 1]");
        w.raw[i] = inverse_sigmoid_weight(scaled[i]);
    }
    w.a = w.raw;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scaled[x] > scaled[y]; });
    for (std::size_t r = 0; r < (n + 1) / 2; ++r) w.a[order[r]] = 1.0;
    std::size_t z = 0;
    for (std::size_t i = 1; i < n; ++i) {
        const bool lower = w.raw[i] < w.raw[z] ||
                           (w.raw[i] == w.raw[z] && scaled[i] <= scaled[z]);
        if (lower) z = i;
    }
    if (n >= 2) w.a[z] = 0.0;
    w.zeroed = z;
    return w;
}

/// 𝒜(i) = a_i / |{j : a_j > 0}|.
inline std::vector<double> count_normalized(std::span<const double> a) {
    const auto positive = static_cast<double>(std::count_if(a.begin(), a.end(), [](double v) { return v > 0.0; }));
    std::vector<double> out(a.size(), 0.0);
    if (positive == 0.0) return out;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / positive;
    return out;
}

struct ScoreBoard {
    std::vector<std::size_t> layers;               // tap layer ids
    std::vector<std::vector<double>> anomaly;      // [client][layer]
    Normality normality;
    ClientWeights weights;
    std::vector<double> final_weights;             // 𝒜
    bool fallback_uniform = false;

    nlohmann::json to_json() const {
        return {{"layers", layers},
                {"anomaly", anomaly},
                {"anomaly_normalized", normality.normalized},
                {"normality", normality.raw},
                {"normality_scaled", normality.scaled},
                {"a_raw", weights.raw},
                {"a", weights.a},
                {"zeroed", weights.zeroed},
                {"weights", final_weights},
                {"fallback_uniform", fallback_uniform}};
    }
};

/// Probe batch for one round: i.i.d. N(0, 1) per input coordinate.
inline Tensor<float> make_probe(std::uint64_t master_seed, std::size_t round, const Shape& input_shape, std::size_t m) {
    auto rng = make_rng(master_seed, Stream::Probe, {round});
    return attacks::standard_normal_probe(input_shape, m, rng);
}

/// Distance matrices of one model at the chosen taps (all taps when empty).
template <typename T>
std::vector<DistanceMatrix> relational_signature(const nn::Model<T>& model, const Tensor<T>& probe,
                                                 std::span<const std::size_t> taps = {}) {
    auto acts = nn::forward_with_taps(model, probe, nn::BnMode::CurrentBatchStats);
    std::vector<DistanceMatrix> out;
    for (auto& act : acts) {
        if (!taps.empty() && std::find(taps.begin(), taps.end(), act.layer) == taps.end()) continue;
        out.push_back(build_distance_matrix(act.embeddings, act.layer));
    }
    if (out.empty()) throw std::invalid_argument("none of the requested tap points exist in the model");
    return out;
}

/// Full scoring pass on a set of client models' signatures.
inline ScoreBoard score_signatures(const std::vector<std::vector<DistanceMatrix>>& sig, std::size_t threads = 1) {
    const std::size_t n = sig.size();
    if (n < 2) throw std::invalid_argument("fedmid needs at least 2 clients");
    const std::size_t layers = sig.front().size();
    std::vector<std::vector<double>> pair(layers, std::vector<double>(n * n, 0.0));
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t i = 0; i < n; ++i) {
        if (sig[i].size() != layers) throw std::invalid_argument("clients expose different tap sets");
        for (std::size_t j = i + 1; j < n; ++j) jobs.emplace_back(i, j);
    }
    parallel_for(jobs.size(), threads, [&](std::size_t k) {
        const auto [i, j] = jobs[k];
        for (std::size_t l = 0; l < layers; ++l) pair[l][i * n + j] = pair[l][j * n + i] = layer_distance(sig[i][l], sig[j][l]);
    });
    ScoreBoard board;
    for (const auto& s : sig.front()) board.layers.push_back(s.layer);
    board.anomaly = anomaly_scores(pair, n);
    board.normality = normality_scores(board.anomaly);
    board.weights = weights_from_normality(board.normality.scaled);
    board.final_weights = count_normalized(board.weights.a);
    if (std::all_of(board.final_weights.begin(), board.final_weights.end(), [](double v) { return v == 0.0; })) {
        board.final_weights.assign(n, 1.0 / static_cast<double>(n));
        board.fallback_uniform = true;
    }
    return board;
}

/// Scores θ_i = φ + Δ_i for every update against one probe batch.
template <typename T>
ScoreBoard fedmid_scores(const nn::Model<T>& global, std::span<const nn::ParamVector<T>> updates, const Tensor<T>& probe,
                         std::span<const std::size_t> taps = {}, std::size_t threads = 1) {
    const auto phi = global.flatten();
    std::vector<std::vector<DistanceMatrix>> sig(updates.size());
    parallel_for(updates.size(), threads, [&](std::size_t i) {
        sig[i] = relational_signature(global.with_params(phi + updates[i]), probe, taps);
    });
    return score_signatures(sig, threads);
}

struct FedMidParams {
    std::size_t probe_samples = 200;
    std::vector<std::size_t> taps;  // empty = every tap point
    std::size_t threads = 0;        // 0 = default_thread_count()
};

class FedMidAggregator final : public fl::Aggregator {
public:
    explicit FedMidAggregator(FedMidParams params = {}) : params_(std::move(params)) {
        if (params_.probe_samples < 2) throw std::invalid_argument("probe_samples must be at least 2");
    }

    std::string name() const override { return "fedmid"; }

    fl::AggregationResult aggregate(const fl::RoundContext& ctx) override {
        ctx.validate();
        if (!ctx.model) throw std::invalid_argument("fedmid needs the model architecture");
        if (ctx.size() < 2) throw std::invalid_argument("fedmid needs at least 2 participating clients");
        const auto global = ctx.model->with_params(*ctx.global);
        const auto probe = make_probe(ctx.seed, ctx.round, global.arch().input_shape, params_.probe_samples);
        const std::size_t threads = params_.threads ? params_.threads : default_thread_count();
        auto board = fedmid_scores<float>(global, ctx.updates, probe, params_.taps, threads);
        fl::AggregationResult r;
        r.weights = board.final_weights;
        r.weights_final = true;
        r.diagnostics = board.to_json();
        if (board.fallback_uniform) r.diagnostics["warning"] = "all weights zero; uniform fallback";
        return r;
    }

private:
    FedMidParams params_;
};

}  // namespace fedmid::defenses
