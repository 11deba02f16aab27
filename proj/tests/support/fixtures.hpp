#pragma once

#include <memory>
#include <random>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/core/tensor.hpp"
#include "fedmid/nn/model.hpp"
#include "fedmid/nn/param_vector.hpp"

namespace fedmid::fixture {

inline nn::LayoutPtr flat_layout(std::size_t d) {
    auto l = std::make_shared<nn::Layout>();
    l->add(0, "w", {d}, true);
    return l;
}

inline std::vector<nn::ParamVector<float>> to_updates(const std::vector<std::vector<double>>& pts) {
    auto layout = flat_layout(pts.front().size());
    std::vector<nn::ParamVector<float>> out;
    for (const auto& p : pts) {
        nn::ParamVector<float> v(layout);
        for (std::size_t i = 0; i < p.size(); ++i) v[i] = static_cast<float>(p[i]);
        out.push_back(std::move(v));
    }
    return out;
}

/// Points rounded to float so oracles see exactly what the code sees.
inline std::vector<std::vector<double>> random_points(std::size_t n, std::size_t d, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<std::vector<double>> pts(n, std::vector<double>(d));
    for (auto& p : pts) {
        for (auto& v : p) v = static_cast<float>(dist(rng));
    }
    return pts;
}

inline std::vector<double> to_vec(const nn::ParamVector<float>& v) {
    return std::vector<double>(v.values().begin(), v.values().end());
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double mean = 0.0, double sd = 1.0) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(mean, sd);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

/// Relabels the hidden units of dense layer `first` by `perm`: its weight rows
/// and bias (W₁P), every per-unit parameter of `per_unit` layers (batchnorm),
/// and the matching input columns of dense layer `second` (PᵀW₂). The network
/// computes the same function afterwards.
template <typename T>
nn::Model<T> permute_hidden_units(const nn::Model<T>& model, std::size_t first, std::vector<std::size_t> per_unit,
                                  std::size_t second, const std::vector<std::size_t>& perm) {
    auto out = model;
    const auto& layout = *model.layout();
    const auto src = model.params();
    auto dst = out.params();
    const std::size_t h = perm.size();
    const auto& w1 = layout.find(first, "weight");
    const std::size_t in = w1.shape[1];
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < in; ++c) dst[w1.offset + r * in + c] = src[w1.offset + perm[r] * in + c];
    }
    const auto& b1 = layout.find(first, "bias");
    for (std::size_t r = 0; r < h; ++r) dst[b1.offset + r] = src[b1.offset + perm[r]];
    for (const auto layer : per_unit) {
        for (const auto& e : layout.entries()) {
            if (e.layer != layer) continue;
            for (std::size_t r = 0; r < h; ++r) dst[e.offset + r] = src[e.offset + perm[r]];
        }
    }
    const auto& w2 = layout.find(second, "weight");
    const std::size_t rows = w2.shape[0];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < h; ++c) dst[w2.offset + r * h + c] = src[w2.offset + r * h + perm[c]];
    }
    return out;
}

}  // namespace fedmid::fixture
