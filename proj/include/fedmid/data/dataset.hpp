#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/core/rng.hpp"
#include "fedmid/core/tensor.hpp"
#include "fedmid/nn/model.hpp"

namespace fedmid::data {

using nn::LabelVector;

/// Labeled samples stored contiguously, sample-major.
struct Dataset {
    Shape sample_shape;
    std::size_t num_classes = 0;
    std::vector<float> inputs;
    LabelVector labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::size_t sample_size() const { return shape_numel(sample_shape); }

    std::span<const float> sample(std::size_t i) const { return {inputs.data() + i * sample_size(), sample_size()}; }
    std::span<float> sample(std::size_t i) { return {inputs.data() + i * sample_size(), sample_size()}; }

    void push_back(std::span<const float> x, std::int32_t label) {
        if (x.size() != sample_size()) throw std::invalid_argument("sample size mismatch");
        inputs.insert(inputs.end(), x.begin(), x.end());
        labels.push_back(label);
    }

    Tensor<float> batch(std::span<const std::size_t> indices) const {
        Shape shape{indices.size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor<float> t(std::move(shape));
        const std::size_t n = sample_size();
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const auto src = sample(indices[k]);
            std::copy(src.begin(), src.end(), t.data.begin() + static_cast<std::ptrdiff_t>(k * n));
        }
        return t;
    }

    LabelVector batch_labels(std::span<const std::size_t> indices) const {
        LabelVector y(indices.size());
        for (std::size_t k = 0; k < indices.size(); ++k) y[k] = labels[indices[k]];
        return y;
    }

    Tensor<float> all_inputs() const {
        Shape shape{size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        return Tensor<float>(std::move(shape), inputs);
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out{sample_shape, num_classes, {}, {}};
        out.inputs.reserve(indices.size() * sample_size());
        out.labels.reserve(indices.size());
        for (const auto i : indices) out.push_back(sample(i), labels[i]);
        return out;
    }

    std::vector<std::size_t> class_histogram() const {
        std::vector<std::size_t> h(num_classes, 0);
        for (const auto y : labels) ++h[static_cast<std::size_t>(y)];
        return h;
    }
};

struct DeskDatasetSpec {
    std::size_t num_classes = 4;
    std::size_t image_size = 16;
    std::size_t channels = 1;
    std::size_t train_samples = 2000;
    std::size_t test_samples = 400;
    double noise_std = 0.15;
    std::uint64_t seed = 0;
    float low = 0.f, high = 1.f;  // template pixel values
    double smoothing = 0.0;       // Gaussian blur σ (pixels) before thresholding; 0 = i.i.d. pixels
};

namespace detail {

/// Binary template: a Gaussian-blurred white-noise field thresholded at its
/// median, per channel. With zero blur every pixel is an independent coin.
inline std::vector<float> draw_template(const DeskDatasetSpec& spec, Rng& rng) {
    const std::size_t side = spec.image_size, plane = side * side;
    std::vector<float> t(spec.channels * plane);
    if (spec.smoothing <= 0.0) {
        std::bernoulli_distribution coin(0.5);
        for (auto& v : t) v = coin(rng) ? spec.high : spec.low;
        return t;
    }
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int radius = static_cast<int>(std::ceil(3.0 * spec.smoothing));
    std::vector<double> kernel(2 * radius + 1);
    for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (spec.smoothing * spec.smoothing));
    const auto s = static_cast<int>(side);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        std::vector<double> field(plane), tmp(plane, 0.0), out(plane, 0.0);
        for (auto& v : field) v = gauss(rng);
        // Separable blur with wrap-around borders.
        for (int r = 0; r < s; ++r) {
            for (int q = 0; q < s; ++q) {
                for (int k = -radius; k <= radius; ++k) tmp[r * s + q] += kernel[k + radius] * field[r * s + ((q + k) % s + s) % s];
            }
        }
        for (int r = 0; r < s; ++r) {
            for (int q = 0; q < s; ++q) {
                for (int k = -radius; k <= radius; ++k) out[r * s + q] += kernel[k + radius] * tmp[(((r + k) % s + s) % s) * s + q];
            }
        }
        auto sorted = out;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(plane / 2), sorted.end());
        const double median = sorted[plane / 2];
        for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = out[i] >= median ? spec.high : spec.low;
    }
    return t;
}

}  // namespace detail

struct TrainTest {
    Dataset train;
    Dataset test;
    std::vector<std::vector<float>> templates;
};

/// Synthetic, class-separable image data: one binary template per class
/// (optionally spatially smooth blobs),
/// samples are template + Gaussian pixel noise. Templates are redrawn until
/// every pair is at least 4·σ·√dim apart.
inline TrainTest make_desk_dataset(const DeskDatasetSpec& spec) {
    if (spec.num_classes < 2) throw std::invalid_argument("desk dataset needs at least 2 classes");
    if (spec.noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
    const Shape shape{spec.channels, spec.image_size, spec.image_size};
    const std::size_t dim = shape_numel(shape);
    Rng rng = make_rng(spec.seed, Stream::DeskData);
    const double min_sep = 4.0 * spec.noise_std * std::sqrt(static_cast<double>(dim));

    std::vector<std::vector<float>> templates;
    for (int attempt = 0;; ++attempt) {
        if (attempt == 1000) throw std::invalid_argument("cannot draw separable templates; lower noise_std or enlarge images");
        templates.assign(spec.num_classes, std::vector<float>(dim));
        for (auto& t : templates) t = detail::draw_template(spec, rng);
        bool ok = true;
        for (std::size_t a = 0; a < spec.num_classes && ok; ++a) {
            for (std::size_t b = a + 1; b < spec.num_classes && ok; ++b) {
                double d = 0.0;
                for (std::size_t i = 0; i < dim; ++i) d += (templates[a][i] - templates[b][i]) * (templates[a][i] - templates[b][i]);
                ok = std::sqrt(d) >= min_sep;
            }
        }
        if (ok) break;
    }

    std::normal_distribution<double> noise(0.0, spec.noise_std);
    auto generate = [&](std::size_t n) {
        Dataset ds{shape, spec.num_classes, {}, {}};
        ds.inputs.reserve(n * dim);
        ds.labels.reserve(n);
        std::vector<float> x(dim);
        for (std::size_t i = 0; i < n; ++i) {
            const auto label = static_cast<std::int32_t>(i % spec.num_classes);
            const auto& t = templates[static_cast<std::size_t>(label)];
            for (std::size_t k = 0; k < dim; ++k) x[k] = static_cast<float>(t[k] + noise(rng));
            ds.push_back(x, label);
        }
        return ds;
    };
    TrainTest out;
    out.train = generate(spec.train_samples);
    out.test = generate(spec.test_samples);
    out.templates = std::move(templates);
    return out;
}

/// Reads `label,p0,p1,...` rows. Blank lines and lines starting with '#' are
/// skipped. Labels must lie in [0, num_classes).
inline Dataset load_csv_dataset(const std::string& path, const Shape& sample_shape, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
    Dataset ds{sample_shape, num_classes, {}, {}};
    const std::size_t dim = shape_numel(sample_shape);
    std::string line;
    std::size_t line_no = 0;
    std::vector<float> x;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        x.clear();
        std::int32_t label = -1;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            try {
                if (first) {
                    label = static_cast<std::int32_t>(std::stol(cell));
                    first = false;
                } else {
                    x.push_back(std::stof(cell));
                }
            } catch (const std::exception&) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed value '" + cell + "'");
            }
        }
        if (x.size() != dim) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                                     " pixel values, got " + std::to_string(x.size()));
        }
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": label out of range");
        }
        ds.push_back(x, label);
    }
    if (ds.empty()) throw std::runtime_error("dataset file '" + path + "' has no samples");
    return ds;
}

}  // namespace fedmid::data
