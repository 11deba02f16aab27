#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/data/dataset.hpp"
#include "fedmid/nn/model.hpp"

namespace fedmid::harness {

namespace detail {

inline std::vector<std::int32_t> predict_labels(const nn::Model<float>& model, const data::Dataset& ds,
                                                std::size_t chunk = 256) {
    std::vector<std::int32_t> out(ds.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        const std::size_t end = std::min(ds.size(), start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto logits = nn::predict(model, ds.batch(idx));
        const std::size_t c = logits.sample_size();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto* row = logits.data.data() + k * c;
            out[start + k] = static_cast<std::int32_t>(std::max_element(row, row + c) - row);
        }
    }
    return out;
}

}  // namespace detail

/// Top-1 accuracy under running batchnorm statistics.
inline double evaluate_acc(const nn::Model<float>& model, const data::Dataset& test) {
    if (test.empty()) throw std::invalid_argument("cannot evaluate on an empty test set");
    const auto pred = detail::predict_labels(model, test);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Fraction of triggered test samples (true class ≠ target) classified as the target.
inline double evaluate_asr(const nn::Model<float>& model, const data::Dataset& test, const attacks::TriggerPatch& trigger) {
    trigger.validate(test.sample_shape, test.num_classes);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (test.labels[i] != trigger.target) keep.push_back(i);
    }
    if (keep.empty()) throw std::invalid_argument("every test sample belongs to the target class");
    auto stamped = test.subset(keep);
    for (std::size_t i = 0; i < stamped.size(); ++i) trigger.stamp(stamped.sample(i), stamped.sample_shape);
    const auto pred = detail::predict_labels(model, stamped);
    std::size_t hit = 0;
    for (const auto p : pred) hit += p == trigger.target;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("mean_std of an empty series");
    MeanStd r;
    for (const auto x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    for (const auto x : v) r.std += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(v.size()));
    return r;
}

struct FinalMetrics {
    MeanStd acc;
    MeanStd asr;
    std::size_t window = 0;
};

/// Mean ± population std of the last `window` entries of each series.
inline FinalMetrics final_metrics(const std::vector<double>& acc, const std::vector<double>& asr, std::size_t window = 10) {
    if (window == 0) throw std::invalid_argument("window must be positive");
    if (acc.size() < window || asr.size() < window) throw std::invalid_argument("fewer rounds than the averaging window");
    auto tail = [window](const std::vector<double>& v) { return std::vector<double>(v.end() - static_cast<std::ptrdiff_t>(window), v.end()); };
    return {mean_std(tail(acc)), mean_std(tail(asr)), window};
}

/// Fractions shown as percentages, e.g. "70.00 ± 10.00".
inline std::string format_percent(const MeanStd& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * m.mean, 100.0 * m.std);
    return buf;
}

}  // namespace fedmid::harness
