#pragma once

// Coordinate-wise and distance-based robust aggregation rules. All of them
// take the round's updates and return an aggregated update directly.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "fedmid/core/rng.hpp"
#include "fedmid/nn/param_vector.hpp"

namespace fedmid::defenses {

template <typename T>
using Updates = std::span<const nn::ParamVector<T>>;

namespace detail {

template <typename T>
void require_common_layout(Updates<T> updates, std::size_t min_count, const char* who) {
    if (updates.size() < min_count) {
        throw std::invalid_argument(std::string(who) + " needs at least " + std::to_string(min_count) + " updates");
    }
    for (const auto& u : updates) updates.front().require_same_layout(u);
}

/// Median of a scratch buffer; even counts average the two middle values.
inline double median_inplace(std::vector<double>& v) {
    const std::size_t n = v.size();
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(v.begin(), mid, v.end());
    const double hi = *mid;
    if (n % 2) return hi;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

template <typename T>
nn::ParamVector<T> mean_of(Updates<T> updates, std::span<const std::size_t> which) {
    nn::ParamVector<T> out(updates.front().layout());
    std::vector<double> acc(out.size(), 0.0);
    for (const auto k : which) {
        const auto v = updates[k].values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    const double inv = 1.0 / static_cast<double>(which.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] * inv);
    return out;
}

template <typename T>
std::vector<double> pairwise_sq_distances(Updates<T> updates) {
    const std::size_t n = updates.size();
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dist = updates[i].distance(updates[j]);
            d[i * n + j] = d[j * n + i] = dist * dist;
        }
    }
    return d;
}

}  // namespace detail

template <typename T>
nn::ParamVector<T> mean_update(Updates<T> updates) {
    detail::require_common_layout(updates, 1, "mean");
    std::vector<std::size_t> all(updates.size());
    std::iota(all.begin(), all.end(), 0);
    return detail::mean_of(updates, all);
}

template <typename T>
nn::ParamVector<T> coordinate_median(Updates<T> updates) {
    detail::require_common_layout(updates, 1, "median");
    nn::ParamVector<T> out(updates.front().layout());
    std::vector<double> col(updates.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t k = 0; k < updates.size(); ++k) col[k] = updates[k][i];
        out[i] = static_cast<T>(detail::median_inplace(col));
    }
    return out;
}

/// Per coordinate, drop the `trim` smallest and largest values and average
/// the rest.
template <typename T>
nn::ParamVector<T> trimmed_mean(Updates<T> updates, std::size_t trim) {
    detail::require_common_layout(updates, 1, "trimmed mean");
    if (2 * trim >= updates.size()) throw std::invalid_argument("trimmed mean would discard every value");
    nn::ParamVector<T> out(updates.front().layout());
    std::vector<double> col(updates.size());
    const double inv = 1.0 / static_cast<double>(updates.size() - 2 * trim);
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t k = 0; k < updates.size(); ++k) col[k] = updates[k][i];
        std::sort(col.begin(), col.end());
        double s = 0.0;
        for (std::size_t k = trim; k < col.size() - trim; ++k) s += col[k];
        out[i] = static_cast<T>(s * inv);
    }
    return out;
}

/// Neighbourhood size n − f − 2, clipped into [1, n − 1] when the classical
/// n ≥ 2f + 3 condition does not hold.
inline std::size_t krum_neighbours(std::size_t n, std::size_t f) {
    const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(n) - static_cast<std::ptrdiff_t>(f) - 2;
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 1, static_cast<std::ptrdiff_t>(n) - 1));
}

/// Krum score: sum of squared distances to the closest neighbours.
template <typename T>
std::vector<double> krum_scores(Updates<T> updates, std::size_t f) {
    detail::require_common_layout(updates, 2, "krum");
    const std::size_t n = updates.size();
    const std::size_t k = krum_neighbours(n, f);
    const auto d = detail::pairwise_sq_distances(updates);
    std::vector<double> scores(n);
    std::vector<double> row;
    for (std::size_t i = 0; i < n; ++i) {
        row.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) row.push_back(d[i * n + j]);
        }
        std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
        scores[i] = std::accumulate(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
    }
    return scores;
}

template <typename T>
struct SelectionResult {
    nn::ParamVector<T> delta;
    std::vector<std::size_t> selected;  // ascending
};

/// Averages the `m` lowest-scoring updates (ties by index). m = 0 means n − f.
template <typename T>
SelectionResult<T> multi_krum(Updates<T> updates, std::size_t f, std::size_t m = 0) {
    const auto scores = krum_scores(updates, f);
    const std::size_t n = updates.size();
    if (m == 0) m = n > f ? n - f : 1;
    m = std::clamp<std::size_t>(m, 1, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    return {detail::mean_of(updates, order), order};
}

template <typename T>
struct GeometricMedianResult {
    nn::ParamVector<T> median;
    std::vector<double> objective;  // Σ‖u_i − v‖ after each iterate, starting with the initial point
    std::size_t iterations = 0;
};

/// Smoothed Weiszfeld iteration started at the coordinate-wise mean:
/// v ← Σ w_i u_i / Σ w_i, w_i = 1 / max(‖u_i − v‖, smoothing). Stops after
/// `max_iter` steps or when ‖Δv‖ ≤ tol·max(‖v‖, 1).
template <typename T>
GeometricMedianResult<T> geometric_median(Updates<T> updates, double smoothing = 1e-6, std::size_t max_iter = 100,
                                          double tol = 1e-6) {
    detail::require_common_layout(updates, 1, "geometric median");
    const std::size_t n = updates.size(), d = updates.front().size();
    std::vector<double> v(d, 0.0);
    for (const auto& u : updates) {
        for (std::size_t i = 0; i < d; ++i) v[i] += u[i];
    }
    for (auto& x : v) x /= static_cast<double>(n);

    auto distances = [&](const std::vector<double>& at) {
        std::vector<double> dist(n);
        for (std::size_t k = 0; k < n; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double diff = static_cast<double>(updates[k][i]) - at[i];
                s += diff * diff;
            }
            dist[k] = std::sqrt(s);
        }
        return dist;
    };

    GeometricMedianResult<T> out{nn::ParamVector<T>(updates.front().layout()), {}, 0};
    auto dist = distances(v);
    out.objective.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
    std::vector<double> next(d);
    for (std::size_t it = 0; it < max_iter; ++it) {
        double wsum = 0.0;
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            const double w = 1.0 / std::max(dist[k], smoothing);
            wsum += w;
            for (std::size_t i = 0; i < d; ++i) next[i] += w * static_cast<double>(updates[k][i]);
        }
        double move = 0.0, norm = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            next[i] /= wsum;
            move += (next[i] - v[i]) * (next[i] - v[i]);
            norm += next[i] * next[i];
        }
        v.swap(next);
        dist = distances(v);
        out.objective.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
        out.iterations = it + 1;
        if (std::sqrt(move) <= tol * std::max(std::sqrt(norm), 1.0)) break;
    }
    for (std::size_t i = 0; i < d; ++i) out.median[i] = static_cast<T>(v[i]);
    return out;
}

struct DncParams {
    std::size_t iterations = 1;
    double filter_multiplier = 1.0;  // c: removes ⌈c·n_mal⌉ per iteration
    std::size_t sub_dim = 10000;
    std::size_t n_mal = 0;
};

/// Outlier scores: squared projection of each centered update onto the top
/// right-singular vector of the stacked (n × d) matrix.
inline std::vector<double> spectral_scores(const Eigen::MatrixXd& centered) {
    const Eigen::MatrixXd gram = centered * centered.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const Eigen::VectorXd u = eig.eigenvectors().col(gram.rows() - 1);
    Eigen::VectorXd v = centered.transpose() * u;
    const double norm = v.norm();
    std::vector<double> scores(static_cast<std::size_t>(centered.rows()), 0.0);
    if (norm == 0.0) return scores;
    v /= norm;
    const Eigen::VectorXd proj = centered * v;
    for (Eigen::Index i = 0; i < proj.size(); ++i) scores[static_cast<std::size_t>(i)] = proj[i] * proj[i];
    return scores;
}

/// Divide-and-conquer: per iteration subsample coordinates, drop the
/// ⌈c·n_mal⌉ highest spectral scores; survivors of every iteration are averaged.
template <typename T>
SelectionResult<T> dnc(Updates<T> updates, const DncParams& params, Rng& rng) {
    detail::require_common_layout(updates, 2, "dnc");
    const std::size_t n = updates.size(), d = updates.front().size();
    const auto remove = static_cast<std::size_t>(std::ceil(params.filter_multiplier * static_cast<double>(params.n_mal) - 1e-12));
    if (remove >= n) throw std::invalid_argument("dnc would remove every update");
    std::vector<unsigned char> good(n, 1);
    std::vector<std::size_t> coords(d);
    std::iota(coords.begin(), coords.end(), 0);
    for (std::size_t it = 0; it < std::max<std::size_t>(params.iterations, 1); ++it) {
        std::vector<std::size_t> chosen = coords;
        if (params.sub_dim < d) {
            std::shuffle(chosen.begin(), chosen.end(), rng);
            chosen.resize(params.sub_dim);
            std::sort(chosen.begin(), chosen.end());
        }
        Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(chosen.size()));
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t j = 0; j < chosen.size(); ++j) x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = updates[k][chosen[j]];
        }
        const Eigen::RowVectorXd mu = x.colwise().mean();
        x.rowwise() -= mu;
        const auto scores = spectral_scores(x);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        for (std::size_t r = 0; r < remove; ++r) good[order[r]] = 0;
    }
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < n; ++k) {
        if (good[k]) kept.push_back(k);
    }
    if (kept.empty()) throw std::runtime_error("dnc removed every update");
    return {detail::mean_of(updates, kept), kept};
}

/// Shuffle, average within buckets of size ≤ s, then hand the bucket means to
/// `inner`.
template <typename T>
nn::ParamVector<T> bucketing(Updates<T> updates, std::size_t s, Rng& rng,
                             const std::function<nn::ParamVector<T>(Updates<T>)>& inner) {
    detail::require_common_layout(updates, 1, "bucketing");
    if (s == 0) throw std::invalid_argument("bucket size must be positive");
    const std::size_t n = updates.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<nn::ParamVector<T>> buckets;
    for (std::size_t start = 0; start < n; start += s) {
        const std::size_t end = std::min(n, start + s);
        buckets.push_back(detail::mean_of(updates, std::span<const std::size_t>(order.data() + start, end - start)));
    }
    return inner(Updates<T>(buckets));
}

}  // namespace fedmid::defenses
