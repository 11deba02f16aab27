#pragma once

// Similarity-driven baselines: FoolsGold, ResidualBase, FLTrust and FedCPA.

#include <algorithm>
#include <cmath>
#include <limits>
#include <iterator>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedmid/defenses/robust_stats.hpp"

namespace fedmid::defenses {

namespace detail {

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return (saa == sbb) ? 1.0 : 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

/// FoolsGold weighting on per-client history vectors (pardoning, rescale,
/// logit), following the reference implementation. Output in [0, 1].
inline std::vector<double> foolsgold_weights(const std::vector<std::vector<double>>& history) {
    const std::size_t n = history.size();
    if (n == 0) throw std::invalid_argument("foolsgold needs at least one client");
    if (n == 1) return {1.0};
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = std::sqrt(std::inner_product(history[i].begin(), history[i].end(), history[i].begin(), 0.0));
    }
    std::vector<double> cs(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) cs[i * n + j] = cs[j * n + i] = detail::cosine(history[i], history[j]);
    }
    std::vector<double> maxcs(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) maxcs[i] = std::max(maxcs[i], cs[i * n + j]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i != j && maxcs[i] < maxcs[j] && maxcs[j] != 0.0) cs[i * n + j] *= maxcs[i] / maxcs[j];
        }
    }
    std::vector<double> wv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) m = std::max(m, cs[i * n + j]);
        }
        wv[i] = norms[i] == 0.0 ? 1.0 : std::clamp(1.0 - m, 0.0, 1.0);
    }
    const double top = *std::max_element(wv.begin(), wv.end());
    if (top == 0.0) return std::vector<double>(n, 0.0);
    for (auto& w : wv) {
        w /= top;
        if (w == 1.0) w = 0.99;
        w = w == 0.0 ? 0.0 : std::clamp(std::log(w / (1.0 - w)) + 0.5, 0.0, 1.0);
    }
    return wv;
}

/// Keeps a running sum of every client's submitted updates.
class FoolsGoldHistory {
public:
    template <typename T>
    void add(std::size_t client, const nn::ParamVector<T>& update) {
        auto& h = sums_[client];
        if (h.empty()) h.assign(update.size(), 0.0);
        if (h.size() != update.size()) throw std::invalid_argument("foolsgold history layout changed");
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += update[i];
    }
    const std::vector<double>& get(std::size_t client) const { return sums_.at(client); }
    void clear() { sums_.clear(); }

private:
    std::map<std::size_t, std::vector<double>> sums_;
};

struct ResidualBaseParams {
    double confidence = 2.0;
    double clip_threshold = 0.05;
};

/// Reweighting factor for a standardized residual: 1 inside the confidence
/// interval, decaying as confidence/|e| outside it, zeroed below the clip.
inline double residual_weight(double e, const ResidualBaseParams& p) {
    const double a = std::abs(e);
    const double w = a <= p.confidence ? 1.0 : p.confidence / a;
    return w < p.clip_threshold ? 0.0 : w;
}

/// Per coordinate: sort client values, fit a repeated-median line of value
/// against rank, standardize residuals by 1.4826·MAD and average with the
/// residual weights.
template <typename T>
nn::ParamVector<T> residual_base(Updates<T> updates, const ResidualBaseParams& params = {}) {
    detail::require_common_layout(updates, 3, "residual base");
    const std::size_t n = updates.size();
    nn::ParamVector<T> out(updates.front().layout());
    std::vector<double> y(n), inner, slopes(n), icpt(n), r(n), absr(n);
    for (std::size_t c = 0; c < out.size(); ++c) {
        for (std::size_t k = 0; k < n; ++k) y[k] = updates[k][c];
        std::sort(y.begin(), y.end());
        for (std::size_t i = 0; i < n; ++i) {
            inner.clear();
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) inner.push_back((y[j] - y[i]) / (static_cast<double>(j) - static_cast<double>(i)));
            }
            slopes[i] = detail::median_inplace(inner);
        }
        auto sl = slopes;
        const double slope = detail::median_inplace(sl);
        for (std::size_t i = 0; i < n; ++i) icpt[i] = y[i] - slope * static_cast<double>(i);
        const double intercept = detail::median_inplace(icpt);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = y[i] - (intercept + slope * static_cast<double>(i));
            absr[i] = std::abs(r[i]);
        }
        const double scale = 1.4826 * detail::median_inplace(absr);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0;
            if (scale > 0.0) {
                e = r[i] / scale;
            } else if (r[i] != 0.0) {
                e = std::numeric_limits<double>::infinity();
            }
            const double w = residual_weight(e, params);
            num += w * y[i];
            den += w;
        }
        out[c] = static_cast<T>(den > 0.0 ? num / den : 0.0);
    }
    return out;
}

template <typename T>
struct FlTrustResult {
    nn::ParamVector<T> delta;
    std::vector<double> trust;
};

/// Σ TS_i·(‖g₀‖/‖g_i‖)·g_i / Σ TS_i with TS_i = max(0, cos(g₀, g_i)).
template <typename T>
FlTrustResult<T> fltrust(Updates<T> updates, const nn::ParamVector<T>& server) {
    detail::require_common_layout(updates, 1, "fltrust");
    server.require_same_layout(updates.front());
    const double g0 = server.norm();
    if (g0 == 0.0) throw std::invalid_argument("fltrust server update has zero norm");
    FlTrustResult<T> out{nn::ParamVector<T>(server.layout()), std::vector<double>(updates.size(), 0.0)};
    std::vector<double> acc(server.size(), 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < updates.size(); ++k) {
        const double gi = updates[k].norm();
        if (gi == 0.0) continue;
        const double ts = std::max(0.0, server.dot(updates[k]) / (g0 * gi));
        out.trust[k] = ts;
        if (ts == 0.0) continue;
        total += ts;
        const double scale = ts * g0 / gi;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * static_cast<double>(updates[k][i]);
    }
    if (total > 0.0) {
        for (std::size_t i = 0; i < acc.size(); ++i) out.delta[i] = static_cast<T>(acc[i] / total);
    }
    return out;
}

struct FedCpaParams {
    double k_frac = 0.01;
};

inline double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::vector<std::size_t> inter, uni;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
    return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

template <typename T>
struct FedCpaResult {
    std::vector<double> weights;
    std::vector<double> scores;
    std::vector<double> similarity;  // n × n, row-major
};

/// Critical-parameter agreement. Importance p_i = |Δ_i ⊙ θ_i| over trainable
/// coordinates, θ_i = φ + Δ_i.
template <typename T>
FedCpaResult<T> fedcpa(Updates<T> updates, const nn::ParamVector<T>& global, const FedCpaParams& params = {}) {
    detail::require_common_layout(updates, 2, "fedcpa");
    global.require_same_layout(updates.front());
    const auto mask = global.layout()->trainable_mask();
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) coords.push_back(i);
    }
    const std::size_t dim = coords.size();
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(params.k_frac * static_cast<double>(dim)));
    if (2 * k > dim) throw std::invalid_argument("fedcpa k exceeds half the dimension");
    const std::size_t n = updates.size();

    std::vector<std::vector<double>> imp(n, std::vector<double>(dim));
    std::vector<std::vector<std::size_t>> top(n), bottom(n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = updates[c][coords[j]];
            imp[c][j] = std::abs(d * (static_cast<double>(global[coords[j]]) + d));
        }
        std::vector<std::size_t> order(dim);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return imp[c][a] > imp[c][b]; });
        top[c].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        bottom[c].assign(order.end() - static_cast<std::ptrdiff_t>(k), order.end());
        std::sort(top[c].begin(), top[c].end());
        std::sort(bottom[c].begin(), bottom[c].end());
    }

    FedCpaResult<T> out;
    out.similarity.assign(n * n, 1.0);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            const double jac = 0.5 * (jaccard(top[a], top[b]) + jaccard(bottom[a], bottom[b]));
            std::vector<std::size_t> uni;
            std::set_union(top[a].begin(), top[a].end(), top[b].begin(), top[b].end(), std::back_inserter(uni));
            std::vector<double> va, vb;
            for (const auto j : uni) {
                va.push_back(imp[a][j]);
                vb.push_back(imp[b][j]);
            }
            const double rho = detail::pearson(detail::ranks(va), detail::ranks(vb));
            out.similarity[a * n + b] = out.similarity[b * n + a] = 0.5 * (jac + rho);
        }
    }
    out.scores.assign(n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            if (a != b) out.scores[a] += out.similarity[a * n + b];
        }
        out.scores[a] /= static_cast<double>(n - 1);
    }
    const auto [lo, hi] = std::minmax_element(out.scores.begin(), out.scores.end());
    out.weights.resize(n);
    for (std::size_t a = 0; a < n; ++a) out.weights[a] = *hi > *lo ? (out.scores[a] - *lo) / (*hi - *lo) : 1.0;
    return out;
}

}  // namespace fedmid::defenses
