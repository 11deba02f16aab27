#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/data/dataset.hpp"
#include "fedmid/nn/model.hpp"

namespace fedmid::fl {

using Update = nn::ParamVector<float>;
using Model = nn::Model<float>;

struct Hyperparams {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    std::size_t batch_size = 64;
};

struct LocalVariant {
    enum class Kind { FedAvg, FedProx } kind = Kind::FedAvg;
    double mu = 0.01;

    static LocalVariant fedavg() { return {}; }
    static LocalVariant fedprox(double mu) { return {Kind::FedProx, mu}; }
};

/// Extra differentiable loss added on every local step (used by the adaptive
/// attacker). Adds its gradient into `grad` and returns its loss value.
using StepHook = std::function<double(const Model& local, std::span<double> grad)>;

/// Minibatch index lists for one epoch. A trailing batch of a single sample
/// is merged into the previous one so batch statistics stay defined.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

/// θ ← φ, `epochs` passes of minibatch momentum SGD on `data`, Δ = θ − φ.
/// FedProx adds (μ/2)‖θ − φ‖² over trainable coordinates, handled by a
/// proximal step after each gradient step.
inline Update local_train(const Model& global, const data::Dataset& data, std::size_t epochs, const Hyperparams& hp,
                          const LocalVariant& variant, Rng& rng, const StepHook& hook = {}) {
    if (data.empty()) throw std::invalid_argument("local_train on an empty dataset");
    if (epochs < 1) throw std::invalid_argument("local_train needs at least one epoch");
    Model local = global;
    nn::Sgd<float> opt(hp.lr, hp.momentum, hp.weight_decay);
    const auto mask = global.layout()->trainable_mask();
    const auto anchor = global.params();
    for (std::size_t e = 0; e < epochs; ++e) {
        for (const auto& idx : epoch_batches(data.size(), hp.batch_size, rng)) {
            const auto x = data.batch(idx);
            const auto y = data.batch_labels(idx);
            auto trace = nn::forward_train(local, x);
            auto [loss, grad_logits] = nn::softmax_cross_entropy(trace.activations.back(), y);
            auto grad = nn::backward(local, trace, grad_logits);
            if (hook) hook(local, grad);
            opt.step(local, grad);
            if (variant.kind == LocalVariant::Kind::FedProx) {
                // Exact proximal step for the quadratic term; stable for any μ.
                const double shrink = 1.0 / (1.0 + hp.lr * variant.mu);
                auto p = local.params();
                for (std::size_t i = 0; i < p.size(); ++i) {
                    if (!mask[i]) continue;
                    const double a = anchor[i];
                    p[i] = static_cast<float>(a + (static_cast<double>(p[i]) - a) * shrink);
                }
            }
        }
    }
    return local.flatten() - global.flatten();
}

/// FedAvg weights |D_i| / Σ|D_j|, or uniform 1/n when `size_weighted` is off.
inline std::vector<double> fedavg_weights(std::span<const std::size_t> sizes, bool size_weighted) {
    if (sizes.empty()) throw std::invalid_argument("no participants");
    std::vector<double> w(sizes.size(), 1.0 / static_cast<double>(sizes.size()));
    if (size_weighted) {
        const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
        if (total <= 0.0) throw std::invalid_argument("participants hold no data");
        for (std::size_t i = 0; i < sizes.size(); ++i) w[i] = static_cast<double>(sizes[i]) / total;
    }
    return w;
}

/// φ' = φ + Σ w_i Δ_i. Weights are used exactly as given (no renormalization).
inline Update weighted_aggregate(const Update& global, std::span<const Update> updates, std::span<const double> weights) {
    if (updates.size() != weights.size()) throw std::invalid_argument("one weight per update required");
    Update next = global;
    std::vector<double> acc(global.size(), 0.0);
    for (std::size_t k = 0; k < updates.size(); ++k) {
        global.require_same_layout(updates[k]);
        if (!(weights[k] >= 0.0)) throw std::invalid_argument("aggregation weights must be non-negative");
        if (weights[k] == 0.0) continue;
        const auto u = updates[k].values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[k] * static_cast<double>(u[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) next[i] = static_cast<float>(static_cast<double>(global[i]) + acc[i]);
    return next;
}

}  // namespace fedmid::fl
