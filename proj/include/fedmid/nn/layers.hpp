#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedmid/core/tensor.hpp"

namespace fedmid::nn {

enum class BnMode { RunningStats, CurrentBatchStats };

// Layer descriptors. Offsets index into the owning model's flat parameter
// buffer; shapes of the blocks are recorded in the model's Layout.

struct Dense {
    std::size_t in = 0, out = 0;
    std::size_t weight = 0, bias = 0;  // weight is (out, in)
};

struct Conv2d {
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t kernel = 3, padding = 1;
    std::size_t weight = 0, bias = 0;  // weight is (out, in, k, k)
};

struct BatchNorm {
    std::size_t channels = 0;
    double momentum = 0.1;
    double epsilon = 1e-5;
    std::size_t gamma = 0, beta = 0, running_mean = 0, running_var = 0;
};

struct Relu {};
struct Flatten {};
struct AvgPool {
    std::size_t window = 2;
};

using Layer = std::variant<Dense, Conv2d, BatchNorm, Relu, Flatten, AvgPool>;

inline std::string layer_kind(const Layer& layer) {
    struct Visitor {
        std::string operator()(const Dense&) const { return "dense"; }
        std::string operator()(const Conv2d&) const { return "conv2d"; }
        std::string operator()(const BatchNorm&) const { return "batchnorm"; }
        std::string operator()(const Relu&) const { return "relu"; }
        std::string operator()(const Flatten&) const { return "flatten"; }
        std::string operator()(const AvgPool&) const { return "avgpool"; }
    };
    return std::visit(Visitor{}, layer);
}

/// Batchnorm values saved by the forward pass for backward.
template <typename T>
struct BnCache {
    std::vector<double> normalized;  // x̂, same size as the layer input
    std::vector<double> inv_std;     // per channel
    bool batch_stats = false;
};

namespace kernels {

template <typename T>
void dense_forward(const Dense& d, std::span<const T> p, const Tensor<T>& x, Tensor<T>& y) {
    const std::size_t n = x.batch();
    y = Tensor<T>({n, d.out});
    const T* w = p.data() + d.weight;
    const T* b = p.data() + d.bias;
    for (std::size_t s = 0; s < n; ++s) {
        const T* xs = x.data.data() + s * d.in;
        T* ys = y.data.data() + s * d.out;
        for (std::size_t o = 0; o < d.out; ++o) {
            double acc = static_cast<double>(b[o]);
            const T* wo = w + o * d.in;
            for (std::size_t i = 0; i < d.in; ++i) acc += static_cast<double>(wo[i]) * static_cast<double>(xs[i]);
            ys[o] = static_cast<T>(acc);
        }
    }
}

template <typename T>
void dense_backward(const Dense& d, std::span<const T> p, const Tensor<T>& x, const Tensor<T>& dy,
                    std::span<double> grad, Tensor<T>* dx) {
    const std::size_t n = x.batch();
    const T* w = p.data() + d.weight;
    double* gw = grad.data() + d.weight;
    double* gb = grad.data() + d.bias;
    std::vector<double> dxs(d.in);
    if (dx) *dx = Tensor<T>(x.shape);
    for (std::size_t s = 0; s < n; ++s) {
        const T* xs = x.data.data() + s * d.in;
        const T* dys = dy.data.data() + s * d.out;
        std::fill(dxs.begin(), dxs.end(), 0.0);
        for (std::size_t o = 0; o < d.out; ++o) {
            const double g = dys[o];
            if (g == 0.0) continue;
            gb[o] += g;
            double* gwo = gw + o * d.in;
            const T* wo = w + o * d.in;
            for (std::size_t i = 0; i < d.in; ++i) {
                gwo[i] += g * static_cast<double>(xs[i]);
                dxs[i] += g * static_cast<double>(wo[i]);
            }
        }
        if (dx) {
            T* out = dx->data.data() + s * d.in;
            for (std::size_t i = 0; i < d.in; ++i) out[i] = static_cast<T>(dxs[i]);
        }
    }
}

template <typename T>
void conv_forward(const Conv2d& c, std::span<const T> p, const Tensor<T>& x, Tensor<T>& y) {
    const std::size_t n = x.batch(), h = x.shape[2], w = x.shape[3];
    const std::size_t k = c.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(c.padding);
    const std::size_t oh = h + 2 * c.padding - k + 1, ow = w + 2 * c.padding - k + 1;
    y = Tensor<T>({n, c.out_channels, oh, ow});
    const T* wt = p.data() + c.weight;
    const T* b = p.data() + c.bias;
    std::vector<double> plane(oh * ow);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t o = 0; o < c.out_channels; ++o) {
            std::fill(plane.begin(), plane.end(), static_cast<double>(b[o]));
            for (std::size_t ci = 0; ci < c.in_channels; ++ci) {
                const T* xin = x.data.data() + ((s * c.in_channels + ci) * h) * w;
                for (std::size_t kh = 0; kh < k; ++kh) {
                    for (std::size_t kw = 0; kw < k; ++kw) {
                        const double wv = wt[((o * c.in_channels + ci) * k + kh) * k + kw];
                        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - pad;
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - pad;
                        const std::size_t y0 = dh < 0 ? static_cast<std::size_t>(-dh) : 0;
                        const std::size_t y1 = std::min<std::ptrdiff_t>(oh, static_cast<std::ptrdiff_t>(h) - dh);
                        const std::size_t x0 = dw < 0 ? static_cast<std::size_t>(-dw) : 0;
                        const std::size_t x1 = std::min<std::ptrdiff_t>(ow, static_cast<std::ptrdiff_t>(w) - dw);
                        for (std::size_t r = y0; r < y1; ++r) {
                            const T* row = xin + (r + dh) * w + dw;
                            double* prow = plane.data() + r * ow;
                            for (std::size_t col = x0; col < x1; ++col) prow[col] += wv * static_cast<double>(row[col]);
                        }
                    }
                }
            }
            T* out = y.data.data() + ((s * c.out_channels + o) * oh) * ow;
            for (std::size_t i = 0; i < plane.size(); ++i) out[i] = static_cast<T>(plane[i]);
        }
    }
}

template <typename T>
void conv_backward(const Conv2d& c, std::span<const T> p, const Tensor<T>& x, const Tensor<T>& dy,
                   std::span<double> grad, Tensor<T>* dx) {
    const std::size_t n = x.batch(), h = x.shape[2], w = x.shape[3];
    const std::size_t k = c.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(c.padding);
    const std::size_t oh = dy.shape[2], ow = dy.shape[3];
    const T* wt = p.data() + c.weight;
    double* gw = grad.data() + c.weight;
    double* gb = grad.data() + c.bias;
    std::vector<double> dxs(c.in_channels * h * w);
    if (dx) *dx = Tensor<T>(x.shape);
    for (std::size_t s = 0; s < n; ++s) {
        std::fill(dxs.begin(), dxs.end(), 0.0);
        for (std::size_t o = 0; o < c.out_channels; ++o) {
            const T* g = dy.data.data() + ((s * c.out_channels + o) * oh) * ow;
            double bsum = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) bsum += g[i];
            gb[o] += bsum;
            for (std::size_t ci = 0; ci < c.in_channels; ++ci) {
                const T* xin = x.data.data() + ((s * c.in_channels + ci) * h) * w;
                double* dxin = dxs.data() + ci * h * w;
                for (std::size_t kh = 0; kh < k; ++kh) {
                    for (std::size_t kw = 0; kw < k; ++kw) {
                        const std::size_t widx = ((o * c.in_channels + ci) * k + kh) * k + kw;
                        const double wv = wt[widx];
                        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - pad;
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - pad;
                        const std::size_t y0 = dh < 0 ? static_cast<std::size_t>(-dh) : 0;
                        const std::size_t y1 = std::min<std::ptrdiff_t>(oh, static_cast<std::ptrdiff_t>(h) - dh);
                        const std::size_t x0 = dw < 0 ? static_cast<std::size_t>(-dw) : 0;
                        const std::size_t x1 = std::min<std::ptrdiff_t>(ow, static_cast<std::ptrdiff_t>(w) - dw);
                        double gacc = 0.0;
                        for (std::size_t r = y0; r < y1; ++r) {
                            const T* row = xin + (r + dh) * w + dw;
                            double* drow = dxin + (r + dh) * w + dw;
                            const T* grow = g + r * ow;
                            for (std::size_t col = x0; col < x1; ++col) {
                                const double gv = grow[col];
                                gacc += gv * static_cast<double>(row[col]);
                                drow[col] += gv * wv;
                            }
                        }
                        gw[widx] += gacc;
                    }
                }
            }
        }
        if (dx) {
            T* out = dx->data.data() + s * dxs.size();
            for (std::size_t i = 0; i < dxs.size(); ++i) out[i] = static_cast<T>(dxs[i]);
        }
    }
}

/// Batchnorm forward. With batch statistics it normalizes by the batch's own
/// (biased) mean and variance; `running` receives the momentum update when
/// non-null. With running statistics it reads the stored mean and variance.
template <typename T>
void batchnorm_forward(const BatchNorm& bn, std::span<const T> p, const Tensor<T>& x, BnMode mode,
                       std::span<T> running, Tensor<T>& y, BnCache<T>* cache) {
    const std::size_t n = x.batch();
    const std::size_t ch = bn.channels;
    const std::size_t spatial = x.sample_size() / ch;
    const std::size_t m = n * spatial;
    y = Tensor<T>(x.shape);
    const T* gamma = p.data() + bn.gamma;
    const T* beta = p.data() + bn.beta;
    const bool use_batch = mode == BnMode::CurrentBatchStats;
    if (use_batch && m < 2) {
        throw std::invalid_argument("batchnorm with current batch statistics needs at least 2 values per channel");
    }
    if (cache) {
        cache->normalized.assign(x.numel(), 0.0);
        cache->inv_std.assign(ch, 0.0);
        cache->batch_stats = use_batch;
    }
    for (std::size_t c = 0; c < ch; ++c) {
        double mean = 0.0, var = 0.0;
        if (use_batch) {
            for (std::size_t s = 0; s < n; ++s) {
                const T* src = x.data.data() + (s * ch + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) mean += src[i];
            }
            mean /= static_cast<double>(m);
            for (std::size_t s = 0; s < n; ++s) {
                const T* src = x.data.data() + (s * ch + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) {
                    const double d = src[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            if (!running.empty()) {
                const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
                T& rm = running[bn.running_mean + c];
                T& rv = running[bn.running_var + c];
                rm = static_cast<T>((1.0 - bn.momentum) * rm + bn.momentum * mean);
                rv = static_cast<T>((1.0 - bn.momentum) * rv + bn.momentum * unbiased);
            }
        } else {
            mean = p[bn.running_mean + c];
            var = p[bn.running_var + c];
            if (!(var > 0.0)) throw std::runtime_error("batchnorm running variance must be positive");
        }
        const double inv_std = 1.0 / std::sqrt(var + bn.epsilon);
        const double g = gamma[c], b = beta[c];
        if (cache) cache->inv_std[c] = inv_std;
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * ch + c) * spatial;
            const T* src = x.data.data() + base;
            T* dst = y.data.data() + base;
            for (std::size_t i = 0; i < spatial; ++i) {
                const double xhat = (src[i] - mean) * inv_std;
                if (cache) cache->normalized[base + i] = xhat;
                dst[i] = static_cast<T>(g * xhat + b);
            }
        }
    }
}

template <typename T>
void batchnorm_backward(const BatchNorm& bn, std::span<const T> p, const Tensor<T>& dy, const BnCache<T>& cache,
                        std::span<double> grad, Tensor<T>* dx) {
    const std::size_t n = dy.batch();
    const std::size_t ch = bn.channels;
    const std::size_t spatial = dy.sample_size() / ch;
    const double m = static_cast<double>(n * spatial);
    const T* gamma = p.data() + bn.gamma;
    if (dx) *dx = Tensor<T>(dy.shape);
    for (std::size_t c = 0; c < ch; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * ch + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const double g = dy.data[base + i];
                sum_dy += g;
                sum_dy_xhat += g * cache.normalized[base + i];
            }
        }
        grad[bn.gamma + c] += sum_dy_xhat;
        grad[bn.beta + c] += sum_dy;
        if (!dx) continue;
        const double scale = static_cast<double>(gamma[c]) * cache.inv_std[c];
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * ch + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const double g = dy.data[base + i];
                double v = scale * g;
                if (cache.batch_stats) {
                    v = scale * (g - sum_dy / m - cache.normalized[base + i] * sum_dy_xhat / m);
                }
                dx->data[base + i] = static_cast<T>(v);
            }
        }
    }
}

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = Tensor<T>(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > T{0} ? x.data[i] : T{0};
}

template <typename T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
    dx = Tensor<T>(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) dx.data[i] = x.data[i] > T{0} ? dy.data[i] : T{0};
}

template <typename T>
void avgpool_forward(const AvgPool& pool, const Tensor<T>& x, Tensor<T>& y) {
    const std::size_t n = x.batch(), ch = x.shape[1], h = x.shape[2], w = x.shape[3];
    const std::size_t k = pool.window, oh = h / k, ow = w / k;
    y = Tensor<T>({n, ch, oh, ow});
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t sc = 0; sc < n * ch; ++sc) {
        const T* src = x.data.data() + sc * h * w;
        T* dst = y.data.data() + sc * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < k; ++i) {
                    for (std::size_t j = 0; j < k; ++j) acc += src[(r * k + i) * w + c * k + j];
                }
                dst[r * ow + c] = static_cast<T>(acc * inv);
            }
        }
    }
}

template <typename T>
void avgpool_backward(const AvgPool& pool, const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
    const std::size_t n = x.batch(), ch = x.shape[1], h = x.shape[2], w = x.shape[3];
    const std::size_t k = pool.window, oh = h / k, ow = w / k;
    dx = Tensor<T>(x.shape);
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t sc = 0; sc < n * ch; ++sc) {
        const T* g = dy.data.data() + sc * oh * ow;
        T* dst = dx.data.data() + sc * h * w;
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                const T v = static_cast<T>(g[r * ow + c] * inv);
                for (std::size_t i = 0; i < k; ++i) {
                    for (std::size_t j = 0; j < k; ++j) dst[(r * k + i) * w + c * k + j] = v;
                }
            }
        }
    }
}

}  // namespace kernels
}  // namespace fedmid::nn
