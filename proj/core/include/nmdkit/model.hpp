#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "nmdkit/layers.hpp"
#include "nmdkit/tensor.hpp"

namespace nmdkit {

// Maps a global tapped-channel id to its (layer, channel-within-layer) pair.
struct ChannelIndex {
    std::vector<std::int32_t> layer;
    std::vector<std::int32_t> channel;
    int num_layers = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(layer.size()); }

    static ChannelIndex build(const std::vector<int>& channels_per_layer);
};

template <typename T>
struct ConvBlockT {
    ConvLayerParamsT<T> conv;
    // Absent for BN-free architectures; such models have no free-lunch
    // reference and must use dataset traversal.
    std::optional<BatchNormParamsT<T>> bn;
};

// Stack of conv(+BN+ReLU) blocks, one average pool, one fully connected
// head. Tapped channels are the conv outputs (the BN inputs), in block order.
template <typename T>
struct ConvNetModelT {
    std::vector<ConvBlockT<T>> blocks;
    int pool_kernel = 2;
    FcLayerParamsT<T> fc;

    bool has_bn() const {
        for (const auto& b : blocks) {
            if (!b.bn.has_value()) return false;
        }
        return !blocks.empty();
    }

    std::int64_t num_tapped_channels() const {
        std::int64_t n = 0;
        for (const auto& b : blocks) n += b.conv.out_channels();
        return n;
    }

    std::shared_ptr<const ChannelIndex> channel_index() const {
        std::vector<int> per_layer;
        per_layer.reserve(blocks.size());
        for (const auto& b : blocks) per_layer.push_back(static_cast<int>(b.conv.out_channels()));
        return std::make_shared<ChannelIndex>(ChannelIndex::build(per_layer));
    }

    template <typename U>
    ConvNetModelT<U> cast() const {
        ConvNetModelT<U> out;
        out.pool_kernel = pool_kernel;
        for (const auto& b : blocks) {
            ConvBlockT<U> nb;
            nb.conv.weights = b.conv.weights.template cast<U>();
            nb.conv.bias = b.conv.bias.template cast<U>();
            nb.conv.stride = b.conv.stride;
            nb.conv.padding = b.conv.padding;
            if (b.bn) {
                BatchNormParamsT<U> bn;
                bn.gamma = b.bn->gamma.template cast<U>();
                bn.beta = b.bn->beta.template cast<U>();
                bn.running_mean = b.bn->running_mean.template cast<U>();
                bn.running_var = b.bn->running_var.template cast<U>();
                bn.momentum = b.bn->momentum;
                bn.epsilon = b.bn->epsilon;
                nb.bn = std::move(bn);
            }
            out.blocks.push_back(std::move(nb));
        }
        out.fc.weights = fc.weights.template cast<U>();
        out.fc.bias = fc.bias.template cast<U>();
        return out;
    }
};

using ConvNetModel = ConvNetModelT<double>;
using ConvNetModelF = ConvNetModelT<float>;

// The 4-layer ConvNet: Conv(3,300,k4,s1), Conv(300,300,k4,s2),
// Conv(300,300,k4,s2), Conv(300,300,k3,s2), each with BN+ReLU, then
// AvgPool(k2) and FC(300,num_classes). Valid padding throughout; on 32x32
// input the spatial chain is 32->29->13->5->2->1.
ConvNetModel build_convnet4(int num_classes, std::uint64_t seed);

// Same topology with a reduced channel width; used where the full 300-wide
// network would be needlessly slow (small experiments, tests).
ConvNetModel build_convnet4_width(int width, int num_classes, std::uint64_t seed);

// Per-channel first and second moments of the tapped activations, averaged
// over the batch and all spatial positions. Element counts are kept so
// streaming accumulation over many batches stays exact.
struct ActivationStats {
    Tensor per_channel_mean;    // [C]
    Tensor per_channel_sqmean;  // [C]
    Tensor per_channel_count;   // [C]; batch * spatial elements behind each mean
    int batch_size = 0;
    std::shared_ptr<const ChannelIndex> channels;
};

// Plain inference pass (BN in eval mode).
template <typename T>
TensorT<T> forward(const ConvNetModelT<T>& model, const TensorT<T>& input);

// Single inference pass that also measures the per-channel activation means
// at every conv output (the tensor position whose statistics BN tracks).
// Logits are bit-identical to forward(): the stats are read off the same
// intermediate tensors.
template <typename T>
std::pair<TensorT<T>, ActivationStats> forward_with_stats(const ConvNetModelT<T>& model,
                                                          const TensorT<T>& input);

}  // namespace nmdkit
