#pragma once

#include <stdexcept>
#include <string>

#include "fedmid/nn/model.hpp"

namespace fedmid::nn {

enum class ModelVariant { TinyBlockNet, Mlp };

inline ModelVariant parse_model_variant(const std::string& name) {
    if (name == "tiny_block_net") return ModelVariant::TinyBlockNet;
    if (name == "mlp") return ModelVariant::Mlp;
    throw std::invalid_argument("unknown model variant '" + name + "' (expected tiny_block_net or mlp)");
}

inline std::string to_string(ModelVariant v) { return v == ModelVariant::TinyBlockNet ? "tiny_block_net" : "mlp"; }

/// Two [conv3x3 -> batchnorm -> relu -> avgpool] blocks, then a dense
/// classifier. Taps sit after each block's relu and at the logits.
inline ModelBuilder tiny_block_net(const Shape& input_shape, std::size_t num_classes, std::size_t channels = 8,
                                   bool with_batchnorm = true) {
    if (input_shape.size() != 3) throw std::invalid_argument("tiny_block_net expects (c, h, w) inputs");
    ModelBuilder b(input_shape);
    for (int i = 0; i < 2; ++i) {
        b.conv2d(channels);
        if (with_batchnorm) b.batchnorm();
        b.relu().tap().avgpool(2);
    }
    b.flatten().dense(num_classes).tap();
    return b;
}

/// flatten -> [dense -> batchnorm -> relu] x 2 -> dense. Taps after each
/// hidden relu and at the logits.
inline ModelBuilder mlp(const Shape& input_shape, std::size_t num_classes, std::size_t hidden = 32,
                        bool with_batchnorm = true) {
    ModelBuilder b(input_shape);
    if (input_shape.size() != 1) b.flatten();
    for (int i = 0; i < 2; ++i) {
        b.dense(hidden);
        if (with_batchnorm) b.batchnorm();
        b.relu().tap();
    }
    b.dense(num_classes).tap();
    return b;
}

inline ModelBuilder make_builder(ModelVariant variant, const Shape& input_shape, std::size_t num_classes) {
    switch (variant) {
        case ModelVariant::TinyBlockNet: return tiny_block_net(input_shape, num_classes);
        case ModelVariant::Mlp: return mlp(input_shape, num_classes);
    }
    throw std::logic_error("unhandled model variant");
}

}  // namespace fedmid::nn
