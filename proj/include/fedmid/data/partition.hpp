#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/data/dataset.hpp"

namespace fedmid::data {

struct PartitionSpec {
    std::size_t clients = 20;
    double beta = 0.5;
    std::uint64_t seed = 0;
};

/// Non-IID split: for each class, proportions p ~ Dir(β·1_N) and the class's
/// (shuffled) samples are cut at the cumulative proportions of p. Clients
/// that end up empty take one sample from the currently largest client.
/// Returns per-client index lists into `dataset`.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(const Dataset& dataset, const PartitionSpec& spec) {
    if (spec.clients < 2) throw std::invalid_argument("dirichlet_partition needs at least 2 clients");
    if (!(spec.beta > 0.0)) throw std::invalid_argument("dirichlet concentration beta must be positive");
    if (dataset.size() < spec.clients) throw std::invalid_argument("dataset has fewer samples than clients");

    Rng rng = make_rng(spec.seed, Stream::Partition);
    std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);

    std::vector<std::vector<std::size_t>> parts(spec.clients);
    std::gamma_distribution<double> gamma(spec.beta, 1.0);
    std::vector<double> p(spec.clients);
    for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        double total = 0.0;
        for (auto& v : p) {
            v = gamma(rng);
            total += v;
        }
        if (!(total > 0.0)) {
            // Every gamma draw underflowed (tiny β): put the class on one client.
            std::fill(p.begin(), p.end(), 0.0);
            p[std::uniform_int_distribution<std::size_t>(0, spec.clients - 1)(rng)] = 1.0;
            total = 1.0;
        }
        // Cut the shuffled class list at the cumulative proportions.
        const std::size_t n = members.size();
        double cum = 0.0;
        std::size_t cursor = 0;
        for (std::size_t c = 0; c < spec.clients; ++c) {
            cum += p[c] / total;
            const std::size_t end = c + 1 == spec.clients
                                        ? n
                                        : std::min(n, static_cast<std::size_t>(cum * static_cast<double>(n)));
            if (end > cursor) {
                parts[c].insert(parts[c].end(), members.begin() + static_cast<std::ptrdiff_t>(cursor),
                                members.begin() + static_cast<std::ptrdiff_t>(end));
                cursor = end;
            }
        }
    }

    for (std::size_t c = 0; c < spec.clients; ++c) {
        while (parts[c].empty()) {
            std::size_t largest = 0;
            for (std::size_t k = 1; k < spec.clients; ++k) {
                if (parts[k].size() > parts[largest].size()) largest = k;
            }
            parts[c].push_back(parts[largest].back());
            parts[largest].pop_back();
        }
    }
    for (auto& part : parts) std::sort(part.begin(), part.end());
    return parts;
}

/// `count` distinct client ids out of [0, n), sorted ascending.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
    if (count > n) throw std::invalid_argument("cannot sample more clients than exist");
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace fedmid::data
