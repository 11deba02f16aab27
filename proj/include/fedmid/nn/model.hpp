#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/core/tensor.hpp"
#include "fedmid/nn/layers.hpp"
#include "fedmid/nn/param_vector.hpp"

namespace fedmid::nn {

using LabelVector = std::vector<std::int32_t>;

/// Static description of a network: layers, per-sample shapes, tap points and
/// the parameter layout. Shared (immutable) between all models of one
/// architecture.
struct Architecture {
    Shape input_shape;                 // per sample, e.g. (1, 16, 16) or (256)
    std::vector<Layer> layers;
    std::vector<Shape> output_shapes;  // per sample, one per layer
    std::vector<std::size_t> taps;     // strictly increasing, last == layers.size() - 1
    LayoutPtr layout;
    std::size_t num_classes = 0;

    bool has_batchnorm() const {
        return std::any_of(layers.begin(), layers.end(),
                           [](const Layer& l) { return std::holds_alternative<BatchNorm>(l); });
    }
};

using ArchitecturePtr = std::shared_ptr<const Architecture>;

template <typename T>
class Model {
public:
    Model() = default;
    Model(ArchitecturePtr arch, std::vector<T> params) : arch_(std::move(arch)), params_(std::move(params)) {
        if (!arch_ || params_.size() != arch_->layout->size()) {
            throw std::invalid_argument("parameter buffer does not match architecture");
        }
    }

    const Architecture& arch() const { return *arch_; }
    const ArchitecturePtr& arch_ptr() const { return arch_; }
    const LayoutPtr& layout() const { return arch_->layout; }

    std::span<T> params() { return params_; }
    std::span<const T> params() const { return params_; }

    std::span<T> param(std::size_t layer, const std::string& name) {
        const auto& e = arch_->layout->find(layer, name);
        return {params_.data() + e.offset, e.size()};
    }
    std::span<const T> param(std::size_t layer, const std::string& name) const {
        const auto& e = arch_->layout->find(layer, name);
        return {params_.data() + e.offset, e.size()};
    }

    ParamVector<T> flatten() const { return ParamVector<T>(arch_->layout, params_); }

    void unflatten(const ParamVector<T>& v) {
        if (!same_layout(v.layout(), arch_->layout)) throw std::invalid_argument("parameter layout mismatch");
        params_ = v.raw();
    }

    /// Copy of this model with parameters taken from `v`.
    Model with_params(const ParamVector<T>& v) const {
        Model m = *this;
        m.unflatten(v);
        return m;
    }

private:
    ArchitecturePtr arch_;
    std::vector<T> params_;
};

/// Fluent construction of an Architecture plus He-uniform initialization.
class ModelBuilder {
public:
    explicit ModelBuilder(Shape input_shape) : arch_(std::make_shared<Architecture>()), layout_(std::make_shared<Layout>()) {
        arch_->input_shape = std::move(input_shape);
        current_ = arch_->input_shape;
    }

    ModelBuilder& dense(std::size_t out) {
        if (current_.size() != 1) throw std::invalid_argument("dense layer expects a flat input, got " + shape_to_string(current_));
        Dense d;
        d.in = current_[0];
        d.out = out;
        const auto idx = arch_->layers.size();
        d.weight = layout_->add(idx, "weight", {out, d.in}, true);
        d.bias = layout_->add(idx, "bias", {out}, true);
        push(d, {out});
        return *this;
    }

    ModelBuilder& conv2d(std::size_t out_channels, std::size_t kernel = 3, std::size_t padding = 1) {
        if (current_.size() != 3) throw std::invalid_argument("conv2d expects (c, h, w) input, got " + shape_to_string(current_));
        if (current_[1] + 2 * padding < kernel || current_[2] + 2 * padding < kernel) {
            throw std::invalid_argument("conv2d kernel larger than padded input");
        }
        Conv2d c;
        c.in_channels = current_[0];
        c.out_channels = out_channels;
        c.kernel = kernel;
        c.padding = padding;
        const auto idx = arch_->layers.size();
        c.weight = layout_->add(idx, "weight", {out_channels, c.in_channels, kernel, kernel}, true);
        c.bias = layout_->add(idx, "bias", {out_channels}, true);
        push(c, {out_channels, current_[1] + 2 * padding - kernel + 1, current_[2] + 2 * padding - kernel + 1});
        return *this;
    }

    ModelBuilder& batchnorm(double momentum = 0.1, double epsilon = 1e-5) {
        BatchNorm bn;
        bn.channels = current_.at(0);
        bn.momentum = momentum;
        bn.epsilon = epsilon;
        const auto idx = arch_->layers.size();
        bn.gamma = layout_->add(idx, "gamma", {bn.channels}, true);
        bn.beta = layout_->add(idx, "beta", {bn.channels}, true);
        bn.running_mean = layout_->add(idx, "running_mean", {bn.channels}, false);
        bn.running_var = layout_->add(idx, "running_var", {bn.channels}, false);
        push(bn, current_);
        return *this;
    }

    ModelBuilder& relu() {
        push(Relu{}, current_);
        return *this;
    }

    ModelBuilder& flatten() {
        push(Flatten{}, {shape_numel(current_)});
        return *this;
    }

    ModelBuilder& avgpool(std::size_t window = 2) {
        if (current_.size() != 3 || current_[1] < window || current_[2] < window) {
            throw std::invalid_argument("avgpool expects (c, h, w) input at least as large as the window");
        }
        push(AvgPool{window}, {current_[0], current_[1] / window, current_[2] / window});
        return *this;
    }

    /// Marks the most recently added layer as a tap point.
    ModelBuilder& tap() {
        if (arch_->layers.empty()) throw std::logic_error("tap() before any layer");
        const auto idx = arch_->layers.size() - 1;
        if (!arch_->taps.empty() && arch_->taps.back() >= idx) throw std::logic_error("tap points must be increasing");
        arch_->taps.push_back(idx);
        return *this;
    }

    template <typename T>
    Model<T> build(Rng& rng) {
        finalize();
        std::vector<T> params(layout_->size(), T{0});
        for (const auto& layer : arch_->layers) {
            std::visit([&](const auto& l) { init_layer(l, params, rng); }, layer);
        }
        return Model<T>(arch_, std::move(params));
    }

    ArchitecturePtr architecture() {
        finalize();
        return arch_;
    }

private:
    void push(Layer layer, Shape out) {
        arch_->layers.push_back(std::move(layer));
        arch_->output_shapes.push_back(out);
        current_ = std::move(out);
    }

    void finalize() {
        if (finalized_) return;
        if (arch_->layers.empty()) throw std::logic_error("architecture has no layers");
        const auto last = arch_->layers.size() - 1;
        if (arch_->taps.empty() || arch_->taps.back() != last) arch_->taps.push_back(last);
        if (current_.size() != 1) throw std::logic_error("network output must be a flat logit vector");
        arch_->num_classes = current_[0];
        arch_->layout = layout_;
        finalized_ = true;
    }

    template <typename T>
    static void he_uniform(std::span<T> w, std::size_t fan_in, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : w) v = static_cast<T>(dist(rng));
    }

    template <typename T>
    static void init_layer(const Dense& d, std::vector<T>& p, Rng& rng) {
        he_uniform(std::span<T>(p.data() + d.weight, d.in * d.out), d.in, rng);
    }
    template <typename T>
    static void init_layer(const Conv2d& c, std::vector<T>& p, Rng& rng) {
        const std::size_t fan_in = c.in_channels * c.kernel * c.kernel;
        he_uniform(std::span<T>(p.data() + c.weight, c.out_channels * fan_in), fan_in, rng);
    }
    template <typename T>
    static void init_layer(const BatchNorm& bn, std::vector<T>& p, Rng&) {
        std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(bn.gamma), bn.channels, T{1});
        std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(bn.running_var), bn.channels, T{1});
    }
    template <typename T, typename L>
    static void init_layer(const L&, std::vector<T>&, Rng&) {}

    std::shared_ptr<Architecture> arch_;
    std::shared_ptr<Layout> layout_;
    Shape current_;
    bool finalized_ = false;
};

/// Everything the forward pass keeps for backward: the input to every layer
/// (activations[i] feeds layer i, activations.back() is the logits) and the
/// batchnorm caches.
template <typename T>
struct Trace {
    std::vector<Tensor<T>> activations;
    std::vector<BnCache<T>> bn;  // indexed by layer, empty for non-batchnorm layers
};

/// Embeddings exported at one tap point: (M, dim), sample-major.
template <typename T>
struct TapActivation {
    std::size_t layer = 0;
    Tensor<T> embeddings;
};

template <typename T>
using ActivationSet = std::vector<TapActivation<T>>;

namespace detail {

template <typename T>
void check_input(const Architecture& arch, const Tensor<T>& batch) {
    const Shape sample(batch.shape.begin() + (batch.shape.empty() ? 0 : 1), batch.shape.end());
    if (batch.shape.empty() || batch.batch() == 0 || sample != arch.input_shape) {
        throw std::invalid_argument("batch shape " + shape_to_string(batch.shape) + " does not match model input " +
                                    shape_to_string(arch.input_shape));
    }
}

/// Runs every layer. `running` (may be empty) receives batchnorm running
/// statistic updates; it aliases the model's own parameter buffer during
/// training.
template <typename T>
Trace<T> run(const Architecture& arch, std::span<const T> params, const Tensor<T>& batch, BnMode mode,
             std::span<T> running, bool keep_caches) {
    check_input(arch, batch);
    Trace<T> trace;
    trace.activations.reserve(arch.layers.size() + 1);
    trace.activations.push_back(batch);
    if (keep_caches) trace.bn.resize(arch.layers.size());
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const Tensor<T>& x = trace.activations.back();
        Tensor<T> y;
        const Layer& layer = arch.layers[i];
        if (const auto* d = std::get_if<Dense>(&layer)) {
            kernels::dense_forward(*d, params, x, y);
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            kernels::conv_forward(*c, params, x, y);
        } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
            kernels::batchnorm_forward(*bn, params, x, mode, running, y, keep_caches ? &trace.bn[i] : nullptr);
        } else if (std::holds_alternative<Relu>(layer)) {
            kernels::relu_forward(x, y);
        } else if (std::holds_alternative<Flatten>(layer)) {
            y = Tensor<T>({x.batch(), x.sample_size()}, x.data);
        } else if (const auto* pool = std::get_if<AvgPool>(&layer)) {
            kernels::avgpool_forward(*pool, x, y);
        }
        if (!y.all_finite()) {
            throw std::runtime_error("non-finite activation at layer " + std::to_string(i) + " (" + layer_kind(layer) + ")");
        }
        trace.activations.push_back(std::move(y));
    }
    return trace;
}

}  // namespace detail

/// Per-layer gradient injected at a layer's output during backward, used for
/// losses defined on intermediate activations.
template <typename T>
struct OutputGradient {
    std::size_t layer = 0;
    Tensor<T> grad;
};

/// Backpropagates `grad_logits` (may be empty for no logit loss) plus any
/// injected intermediate gradients. Returns d(loss)/d(params) in the model's
/// layout; non-trainable coordinates stay zero.
template <typename T>
std::vector<double> backward(const Model<T>& model, const Trace<T>& trace, const Tensor<T>& grad_logits,
                             const std::vector<OutputGradient<T>>& injected = {}) {
    const Architecture& arch = model.arch();
    if (trace.bn.size() != arch.layers.size()) throw std::logic_error("trace was recorded without caches");
    std::vector<double> grad(arch.layout->size(), 0.0);
    const auto params = model.params();
    Tensor<T> dy = grad_logits.data.empty() ? Tensor<T>(trace.activations.back().shape) : grad_logits;
    if (dy.shape != trace.activations.back().shape) throw std::invalid_argument("logit gradient shape mismatch");
    for (std::size_t li = arch.layers.size(); li-- > 0;) {
        for (const auto& inj : injected) {
            if (inj.layer != li) continue;
            if (inj.grad.shape != dy.shape) throw std::invalid_argument("injected gradient shape mismatch");
            for (std::size_t k = 0; k < dy.numel(); ++k) dy.data[k] += inj.grad.data[k];
        }
        const Tensor<T>& x = trace.activations[li];
        Tensor<T> dx;
        const bool need_dx = li > 0;
        const Layer& layer = arch.layers[li];
        if (const auto* d = std::get_if<Dense>(&layer)) {
            kernels::dense_backward(*d, params, x, dy, grad, need_dx ? &dx : nullptr);
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            kernels::conv_backward(*c, params, x, dy, grad, need_dx ? &dx : nullptr);
        } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
            kernels::batchnorm_backward(*bn, params, dy, trace.bn[li], grad, need_dx ? &dx : nullptr);
        } else if (std::holds_alternative<Relu>(layer)) {
            kernels::relu_backward(x, dy, dx);
        } else if (std::holds_alternative<Flatten>(layer)) {
            dx = Tensor<T>(x.shape, std::move(dy.data));
        } else if (const auto* pool = std::get_if<AvgPool>(&layer)) {
            kernels::avgpool_backward(*pool, x, dy, dx);
        }
        dy = std::move(dx);
    }
    return grad;
}

/// Forward pass exporting one flattened embedding per sample at every tap
/// point. Never mutates the model: under CurrentBatchStats the probe batch is
/// normalized with its own statistics and running statistics are left alone.
template <typename T>
ActivationSet<T> forward_with_taps(const Model<T>& model, const Tensor<T>& batch, BnMode mode) {
    const Architecture& arch = model.arch();
    if (mode == BnMode::CurrentBatchStats && batch.batch() < 2 && arch.has_batchnorm()) {
        throw std::invalid_argument("current batch statistics need a batch of at least 2 samples");
    }
    auto trace = detail::run<T>(arch, model.params(), batch, mode, {}, false);
    ActivationSet<T> out;
    out.reserve(arch.taps.size());
    for (const auto tap : arch.taps) {
        auto& act = trace.activations[tap + 1];
        const std::size_t n = act.batch();
        const std::size_t dim = act.sample_size();
        out.push_back({tap, Tensor<T>({n, dim}, std::move(act.data))});
    }
    return out;
}

/// Logits under running statistics (inference).
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& batch) {
    auto trace = detail::run<T>(model.arch(), model.params(), batch, BnMode::RunningStats, {}, false);
    return std::move(trace.activations.back());
}

/// Training-mode forward: batch statistics, running statistics updated in
/// place, caches kept for backward.
template <typename T>
Trace<T> forward_train(Model<T>& model, const Tensor<T>& batch) {
    auto params = model.params();
    // The running-stat slots are written while the kernels read other slots of
    // the same buffer; the two sets of coordinates are disjoint.
    return detail::run<T>(model.arch(), std::span<const T>(params.data(), params.size()), batch,
                          BnMode::CurrentBatchStats, params, true);
}

/// Forward with caches under a chosen mode and without touching running
/// statistics; used for differentiable losses on probe batches.
template <typename T>
Trace<T> forward_traced(const Model<T>& model, const Tensor<T>& batch, BnMode mode) {
    return detail::run<T>(model.arch(), model.params(), batch, mode, {}, true);
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
template <typename T>
std::pair<double, Tensor<T>> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    const std::size_t n = logits.batch(), c = logits.sample_size();
    if (labels.size() != n) throw std::invalid_argument("label count does not match batch size");
    Tensor<T> grad(logits.shape);
    double loss = 0.0;
    std::vector<double> prob(c);
    for (std::size_t s = 0; s < n; ++s) {
        const auto label = labels[s];
        if (label < 0 || static_cast<std::size_t>(label) >= c) {
            throw std::invalid_argument("label " + std::to_string(label) + " outside class range [0, " + std::to_string(c) + ")");
        }
        const auto row = logits.sample(s);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            prob[k] = std::exp(static_cast<double>(row[k]) - mx);
            z += prob[k];
        }
        loss += std::log(z) - (static_cast<double>(row[static_cast<std::size_t>(label)]) - mx);
        auto g = grad.sample(s);
        for (std::size_t k = 0; k < c; ++k) {
            const double p = prob[k] / z - (k == static_cast<std::size_t>(label) ? 1.0 : 0.0);
            g[k] = static_cast<T>(p / static_cast<double>(n));
        }
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
    return {loss, std::move(grad)};
}

/// Momentum SGD with L2 weight decay (velocity = μ·velocity + g + λ·w;
/// w -= lr·velocity). Only trainable coordinates move.
template <typename T>
class Sgd {
public:
    Sgd(double lr, double momentum, double weight_decay) : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    void step(Model<T>& model, std::span<const double> grad) {
        const auto& layout = *model.layout();
        if (grad.size() != layout.size()) throw std::invalid_argument("gradient size does not match model");
        if (velocity_.empty()) {
            velocity_.assign(layout.size(), 0.0);
            mask_ = layout.trainable_mask();
        }
        auto p = model.params();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!mask_[i]) continue;
            const double g = grad[i] + weight_decay_ * static_cast<double>(p[i]);
            velocity_[i] = momentum_ * velocity_[i] + g;
            p[i] = static_cast<T>(static_cast<double>(p[i]) - lr_ * velocity_[i]);
        }
    }

    double lr() const { return lr_; }

private:
    double lr_, momentum_, weight_decay_;
    std::vector<double> velocity_;
    std::vector<unsigned char> mask_;
};

/// One training step on a labeled batch. Returns the mean batch loss.
template <typename T>
double backward_sgd_step(Model<T>& model, Sgd<T>& opt, const Tensor<T>& batch, std::span<const std::int32_t> labels) {
    auto trace = forward_train(model, batch);
    auto [loss, grad_logits] = softmax_cross_entropy(trace.activations.back(), labels);
    const auto grad = backward(model, trace, grad_logits);
    opt.step(model, grad);
    return loss;
}

}  // namespace fedmid::nn
