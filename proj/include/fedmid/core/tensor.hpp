#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedmid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major tensor. The leading dimension is the batch axis everywhere
/// in the engine; `sample(i)` views one batch entry.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_to_string(shape));
        }
    }

    std::size_t numel() const { return data.size(); }
    std::size_t batch() const { return shape.empty() ? 0 : shape.front(); }
    std::size_t sample_size() const { return batch() == 0 ? 0 : data.size() / batch(); }
    Shape sample_shape() const { return Shape(shape.begin() + 1, shape.end()); }

    std::span<T> sample(std::size_t i) {
        const auto n = sample_size();
        return {data.data() + i * n, n};
    }
    std::span<const T> sample(std::size_t i) const {
        const auto n = sample_size();
        return {data.data() + i * n, n};
    }

    bool all_finite() const {
        for (const auto v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

}  // namespace fedmid
