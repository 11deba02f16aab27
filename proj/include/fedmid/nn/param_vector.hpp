#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/core/tensor.hpp"

namespace fedmid::nn {

/// One named parameter block inside a flat parameter buffer.
struct ParamEntry {
    std::size_t layer = 0;
    std::string name;
    std::size_t offset = 0;
    Shape shape;
    bool trainable = true;  // false for batchnorm running statistics

    std::size_t size() const { return shape_numel(shape); }
    bool operator==(const ParamEntry&) const = default;
};

class Layout {
public:
    Layout() = default;

    std::size_t add(std::size_t layer, std::string name, Shape shape, bool trainable) {
        ParamEntry e{layer, std::move(name), total_, std::move(shape), trainable};
        total_ += e.size();
        entries_.push_back(std::move(e));
        return entries_.back().offset;
    }

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::size_t size() const { return total_; }

    const ParamEntry& find(std::size_t layer, const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.layer == layer && e.name == name) return e;
        }
        throw std::out_of_range("no parameter '" + name + "' at layer " + std::to_string(layer));
    }

    /// Per-coordinate mask, 1 where the coordinate is trainable.
    std::vector<unsigned char> trainable_mask() const {
        std::vector<unsigned char> mask(total_, 0);
        for (const auto& e : entries_) {
            if (!e.trainable) continue;
            std::fill(mask.begin() + static_cast<std::ptrdiff_t>(e.offset),
                      mask.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size()), 1);
        }
        return mask;
    }

    bool operator==(const Layout& other) const {
        return total_ == other.total_ && entries_ == other.entries_;
    }

private:
    std::vector<ParamEntry> entries_;
    std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

inline bool same_layout(const LayoutPtr& a, const LayoutPtr& b) {
    if (a == b) return true;
    if (!a || !b) return false;
    return *a == *b;
}

/// Flat model parameters (or an update Δ) with the layout that gives the
/// coordinates meaning. Batchnorm running statistics are part of the vector.
template <typename T>
class ParamVector {
public:
    using value_type = T;

    ParamVector() = default;
    explicit ParamVector(LayoutPtr layout, T fill = T{0})
        : layout_(std::move(layout)), values_(layout_ ? layout_->size() : 0, fill) {}
    ParamVector(LayoutPtr layout, std::vector<T> values) : layout_(std::move(layout)), values_(std::move(values)) {
        if (!layout_ || values_.size() != layout_->size()) {
            throw std::invalid_argument("parameter vector size does not match its layout");
        }
    }

    const LayoutPtr& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }
    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }
    std::vector<T>& raw() { return values_; }
    const std::vector<T>& raw() const { return values_; }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    void require_same_layout(const ParamVector& other) const {
        if (!same_layout(layout_, other.layout_)) {
            throw std::invalid_argument("parameter layout mismatch");
        }
    }

    ParamVector& operator+=(const ParamVector& other) {
        require_same_layout(other);
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
        return *this;
    }
    ParamVector& operator-=(const ParamVector& other) {
        require_same_layout(other);
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
        return *this;
    }
    ParamVector& operator*=(T s) {
        for (auto& v : values_) v *= s;
        return *this;
    }
    friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
    friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
    friend ParamVector operator*(ParamVector a, T s) { return a *= s; }

    /// this += s * other, accumulated in double.
    void axpy(double s, const ParamVector& other) {
        require_same_layout(other);
        for (std::size_t i = 0; i < values_.size(); ++i) {
            values_[i] = static_cast<T>(static_cast<double>(values_[i]) + s * static_cast<double>(other.values_[i]));
        }
    }

    double dot(const ParamVector& other) const {
        require_same_layout(other);
        double acc = 0.0;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            acc += static_cast<double>(values_[i]) * static_cast<double>(other.values_[i]);
        }
        return acc;
    }
    double norm() const { return std::sqrt(dot(*this)); }

    double distance(const ParamVector& other) const {
        require_same_layout(other);
        double acc = 0.0;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            const double d = static_cast<double>(values_[i]) - static_cast<double>(other.values_[i]);
            acc += d * d;
        }
        return std::sqrt(acc);
    }

    bool all_finite() const {
        for (const auto v : values_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool operator==(const ParamVector& other) const {
        return same_layout(layout_, other.layout_) && values_ == other.values_;
    }

private:
    LayoutPtr layout_;
    std::vector<T> values_;
};

}  // namespace fedmid::nn
