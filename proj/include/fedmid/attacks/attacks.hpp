#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/data/dataset.hpp"
#include "fedmid/data/partition.hpp"
#include "fedmid/fl/federation.hpp"
#include "fedmid/nn/model.hpp"

namespace fedmid::attacks {

using fl::Model;
using fl::Update;

enum class Scenario { None, U1, T1, U2, T2, U3, T3 };

inline Scenario parse_scenario(const std::string& s) {
    if (s == "none") return Scenario::None;
    if (s == "1U" || s == "1u") return Scenario::U1;
    if (s == "1T" || s == "1t") return Scenario::T1;
    if (s == "2U" || s == "2u") return Scenario::U2;
    if (s == "2T" || s == "2t") return Scenario::T2;
    if (s == "3U" || s == "3u") return Scenario::U3;
    if (s == "3T" || s == "3t") return Scenario::T3;
    throw std::invalid_argument("unknown attack scenario '" + s + "' (expected none, 1U, 1T, 2U, 2T, 3U, 3T)");
}

inline std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::None: return "none";
        case Scenario::U1: return "1U";
        case Scenario::T1: return "1T";
        case Scenario::U2: return "2U";
        case Scenario::T2: return "2T";
        case Scenario::U3: return "3U";
        case Scenario::T3: return "3T";
    }
    return "none";
}

inline bool is_targeted(Scenario s) { return s == Scenario::T1 || s == Scenario::T2 || s == Scenario::T3; }
inline bool is_omniscient(Scenario s) { return s == Scenario::U2 || s == Scenario::T2; }
inline bool is_adaptive(Scenario s) { return s == Scenario::U3 || s == Scenario::T3; }

/// Square backdoor patch stamped into the bottom-right corner of every
/// channel. Pixel (r, c) is `high` when r + c is even, `low` otherwise.
struct TriggerPatch {
    std::size_t height = 5, width = 5;
    std::vector<float> values;  // height * width, row-major
    std::int32_t target = 0;

    static TriggerPatch checkerboard(std::size_t size, std::int32_t target, float high = 1.f, float low = 0.f) {
        TriggerPatch t;
        t.height = t.width = size;
        t.target = target;
        t.values.resize(size * size);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) t.values[r * size + c] = (r + c) % 2 == 0 ? high : low;
        }
        return t;
    }

    void validate(const Shape& sample_shape, std::size_t num_classes) const {
        if (sample_shape.size() != 3) throw std::invalid_argument("trigger needs (c, h, w) image inputs");
        if (height > sample_shape[1] || width > sample_shape[2]) throw std::invalid_argument("trigger patch larger than image");
        if (target < 0 || static_cast<std::size_t>(target) >= num_classes) throw std::invalid_argument("trigger target class out of range");
        if (values.size() != height * width) throw std::invalid_argument("trigger pixel count mismatch");
    }

    void stamp(std::span<float> image, const Shape& sample_shape) const {
        const std::size_t ch = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
        for (std::size_t c = 0; c < ch; ++c) {
            for (std::size_t r = 0; r < height; ++r) {
                for (std::size_t k = 0; k < width; ++k) {
                    image[(c * h + (h - height + r)) * w + (w - width + k)] = values[r * width + k];
                }
            }
        }
    }
};

struct AttackConfig {
    Scenario scenario = Scenario::None;
    double pollution = 0.5;      // γ_p
    double lie_z = 1.5;
    TriggerPatch trigger = TriggerPatch::checkerboard(4, 0);
    std::vector<std::size_t> adaptive_taps;  // empty = every tap
    std::size_t adaptive_probe_samples = 200;

    void validate() const {
        if (!(pollution > 0.0 && pollution <= 1.0)) throw std::invalid_argument("pollution_ratio must be in (0, 1]");
    }
};

/// ⌊γ_p·n⌋ with a minimum of one.
inline std::size_t poisoned_count(std::size_t n, double pollution) {
    if (!(pollution > 0.0 && pollution <= 1.0)) throw std::invalid_argument("pollution ratio must be in (0, 1]");
    if (n == 0) throw std::invalid_argument("cannot poison an empty dataset");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(pollution * static_cast<double>(n))));
}

/// Random label flipping: the chosen samples get a uniformly random label
/// different from their own. Inputs are untouched.
inline data::Dataset poison_untargeted(const data::Dataset& clean, double pollution, Rng& rng,
                                       std::vector<std::size_t>* touched = nullptr) {
    if (clean.num_classes < 2) throw std::invalid_argument("label flipping needs at least two classes");
    const std::size_t count = poisoned_count(clean.size(), pollution);
    auto chosen = data::sample_without_replacement(clean.size(), count, rng);
    data::Dataset out = clean;
    std::uniform_int_distribution<std::int32_t> pick(0, static_cast<std::int32_t>(clean.num_classes) - 2);
    for (const auto i : chosen) {
        std::int32_t y = pick(rng);
        if (y >= out.labels[i]) ++y;  // skip the original label
        out.labels[i] = y;
    }
    if (touched) *touched = std::move(chosen);
    return out;
}

/// Backdoor poisoning: the chosen samples get the trigger stamped and their
/// label set to the trigger's target class.
inline data::Dataset poison_targeted(const data::Dataset& clean, double pollution, const TriggerPatch& trigger, Rng& rng,
                                     std::vector<std::size_t>* touched = nullptr) {
    trigger.validate(clean.sample_shape, clean.num_classes);
    const std::size_t count = poisoned_count(clean.size(), pollution);
    auto chosen = data::sample_without_replacement(clean.size(), count, rng);
    data::Dataset out = clean;
    for (const auto i : chosen) {
        trigger.stamp(out.sample(i), out.sample_shape);
        out.labels[i] = trigger.target;
    }
    if (touched) *touched = std::move(chosen);
    return out;
}

struct BenignStatistics {
    Update mean;
    Update std;
};

/// Coordinate-wise mean and (unbiased) standard deviation of benign updates.
inline BenignStatistics benign_statistics(std::span<const Update> updates) {
    if (updates.empty()) throw std::invalid_argument("benign statistics need at least one update");
    const auto& layout = updates.front().layout();
    const std::size_t d = updates.front().size(), n = updates.size();
    for (const auto& u : updates) updates.front().require_same_layout(u);
    BenignStatistics s{Update(layout), Update(layout)};
    for (std::size_t i = 0; i < d; ++i) {
        double mean = 0.0;
        for (const auto& u : updates) mean += u[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (const auto& u : updates) var += (u[i] - mean) * (u[i] - mean);
        var = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
        s.mean[i] = static_cast<float>(mean);
        s.std[i] = static_cast<float>(std::sqrt(var));
    }
    return s;
}

/// Δ_a = mean + z·std, coordinate-wise. A negative z shifts the other way.
inline Update lie_calibrate(const Update& mean, const Update& std, double z) {
    mean.require_same_layout(std);
    Update out = mean;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (std[i] < 0.f) throw std::invalid_argument("standard deviation must be non-negative");
        out[i] = static_cast<float>(static_cast<double>(mean[i]) + z * static_cast<double>(std[i]));
    }
    return out;
}

/// Backdoor-preserving variant: the attacker's own poisoned update clipped
/// into [mean − |z|·std, mean + |z|·std] per coordinate.
inline Update lie_clip(const Update& poisoned, const Update& mean, const Update& std, double z) {
    poisoned.require_same_layout(mean);
    mean.require_same_layout(std);
    Update out = poisoned;
    const double a = std::abs(z);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double lo = mean[i] - a * std[i], hi = mean[i] + a * std[i];
        out[i] = static_cast<float>(std::clamp(static_cast<double>(poisoned[i]), lo, hi));
    }
    return out;
}

/// Synthetic standard-normal probe batch of `m` samples.
inline Tensor<float> standard_normal_probe(const Shape& sample_shape, std::size_t m, Rng& rng) {
    Shape shape{m};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor<float> t(std::move(shape));
    std::normal_distribution<float> dist(0.f, 1.f);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

/// Mimicry loss (1/M)·Σ_k ‖z_k,ref − z_k,local‖₂ summed over the chosen taps,
/// both models evaluated with the probe's own batch statistics.
template <typename T>
class AdaptiveRegularizer {
public:
    AdaptiveRegularizer(const nn::Model<T>& reference, Tensor<T> probe, std::vector<std::size_t> taps = {})
        : probe_(std::move(probe)), taps_(std::move(taps)), arch_(reference.arch_ptr()) {
        if (taps_.empty()) taps_ = reference.arch().taps;
        for (const auto t : taps_) {
            if (std::find(reference.arch().taps.begin(), reference.arch().taps.end(), t) == reference.arch().taps.end()) {
                throw std::invalid_argument("adaptive tap " + std::to_string(t) + " is not a model tap point");
            }
        }
        auto trace = nn::forward_traced(reference, probe_, nn::BnMode::CurrentBatchStats);
        for (const auto t : taps_) reference_.push_back(std::move(trace.activations[t + 1]));
    }

    const std::vector<std::size_t>& taps() const { return taps_; }

    double value(const nn::Model<T>& local) const {
        check(local);
        auto trace = nn::forward_traced(local, probe_, nn::BnMode::CurrentBatchStats);
        double total = 0.0;
        for (std::size_t k = 0; k < taps_.size(); ++k) total += tap_loss(reference_[k], trace.activations[taps_[k] + 1], nullptr);
        return total;
    }

    /// Loss value; adds d(loss)/d(params of `local`) into `grad`.
    double accumulate_gradient(const nn::Model<T>& local, std::span<double> grad) const {
        check(local);
        auto trace = nn::forward_traced(local, probe_, nn::BnMode::CurrentBatchStats);
        std::vector<nn::OutputGradient<T>> injected;
        double total = 0.0;
        for (std::size_t k = 0; k < taps_.size(); ++k) {
            nn::OutputGradient<T> og{taps_[k], Tensor<T>(trace.activations[taps_[k] + 1].shape)};
            total += tap_loss(reference_[k], trace.activations[taps_[k] + 1], &og.grad);
            injected.push_back(std::move(og));
        }
        const auto g = nn::backward(local, trace, Tensor<T>{}, injected);
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
        return total;
    }

private:
    void check(const nn::Model<T>& local) const {
        if (!same_layout(local.layout(), arch_->layout)) throw std::invalid_argument("adaptive regularizer: architecture mismatch");
    }

    double tap_loss(const Tensor<T>& ref, const Tensor<T>& cur, Tensor<T>* grad) const {
        const std::size_t m = ref.batch(), dim = ref.sample_size();
        const double inv_m = 1.0 / static_cast<double>(m);
        double total = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
            double sq = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double d = static_cast<double>(cur.data[s * dim + j]) - ref.data[s * dim + j];
                sq += d * d;
            }
            const double norm = std::sqrt(sq);
            total += norm * inv_m;
            if (grad && norm > 0.0) {
                for (std::size_t j = 0; j < dim; ++j) {
                    const double d = static_cast<double>(cur.data[s * dim + j]) - ref.data[s * dim + j];
                    grad->data[s * dim + j] = static_cast<T>(d / norm * inv_m);
                }
            }
        }
        return total;
    }

    Tensor<T> probe_;
    std::vector<std::size_t> taps_;
    nn::ArchitecturePtr arch_;
    std::vector<Tensor<T>> reference_;
};

/// Free-function form: L_reg between two models on a probe batch.
template <typename T>
double adaptive_regularizer(const Tensor<T>& probe, const nn::Model<T>& global_model, const nn::Model<T>& local_model,
                                   const std::vector<std::size_t>& taps = {}) {
    return AdaptiveRegularizer<T>(global_model, probe, taps).value(local_model);
}

}  // namespace fedmid::attacks
