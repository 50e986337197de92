#include "nmdkit/model.hpp"

#include <cmath>
#include <stdexcept>

#include "nmdkit/rng.hpp"

namespace nmdkit {

ChannelIndex ChannelIndex::build(const std::vector<int>& channels_per_layer) {
    ChannelIndex index;
    index.num_layers = static_cast<int>(channels_per_layer.size());
    for (int l = 0; l < index.num_layers; ++l) {
        for (int c = 0; c < channels_per_layer[l]; ++c) {
            index.layer.push_back(l);
            index.channel.push_back(c);
        }
    }
    return index;
}

namespace {

void kaiming_fill(Tensor& weights, std::int64_t fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::int64_t i = 0; i < weights.size(); ++i) weights[i] = dist(rng);
}

ConvBlockT<double> make_block(int in_ch, int out_ch, int kernel, int stride, Rng& rng) {
    ConvBlockT<double> block;
    block.conv = make_conv_params(in_ch, out_ch, kernel, stride, /*padding=*/0);
    kaiming_fill(block.conv.weights, static_cast<std::int64_t>(in_ch) * kernel * kernel, rng);
    block.bn = make_batchnorm_params(out_ch);
    return block;
}

}  // namespace

ConvNetModel build_convnet4_width(int width, int num_classes, std::uint64_t seed) {
    if (num_classes < 2) {
        throw std::invalid_argument("build_convnet4: need at least 2 classes");
    }
    if (width < 1) {
        throw std::invalid_argument("build_convnet4: channel width must be positive");
    }
    Rng rng = make_rng(seed, "model-init");
    ConvNetModel model;
    model.blocks.push_back(make_block(3, width, 4, 1, rng));
    model.blocks.push_back(make_block(width, width, 4, 2, rng));
    model.blocks.push_back(make_block(width, width, 4, 2, rng));
    model.blocks.push_back(make_block(width, width, 3, 2, rng));
    model.pool_kernel = 2;
    model.fc = make_fc_params(width, num_classes);
    kaiming_fill(model.fc.weights, width, rng);
    return model;
}

ConvNetModel build_convnet4(int num_classes, std::uint64_t seed) {
    return build_convnet4_width(300, num_classes, seed);
}

namespace {

// Mean and mean-of-squares per channel, accumulated in double regardless of
// the activation scalar type.
template <typename T>
void tap_stats(const TensorT<T>& act, std::int64_t offset, ActivationStats& stats) {
    const std::int64_t b = act.dim(0), c = act.dim(1), plane = act.dim(2) * act.dim(3);
    const double n = static_cast<double>(b * plane);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sumsq = 0.0;
        for (std::int64_t i = 0; i < b; ++i) {
            const T* ptr = act.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                const double v = static_cast<double>(ptr[j]);
                sum += v;
                sumsq += v * v;
            }
        }
        stats.per_channel_mean[offset + ch] = sum / n;
        stats.per_channel_sqmean[offset + ch] = sumsq / n;
        stats.per_channel_count[offset + ch] = n;
    }
}

template <typename T>
TensorT<T> run_forward(const ConvNetModelT<T>& model, const TensorT<T>& input,
                       ActivationStats* stats) {
    if (input.rank() != 4) {
        throw std::invalid_argument("forward: expected [B,C,H,W] input, got " +
                                    shape_string(input.shape()));
    }
    TensorT<T> x = input;
    std::int64_t offset = 0;
    for (const auto& block : model.blocks) {
        TensorT<T> pre = conv2d_forward(x, block.conv);
        if (stats) {
            tap_stats(pre, offset, *stats);
            offset += pre.dim(1);
        }
        if (block.bn) {
            // Running statistics only; inference never touches batch stats.
            auto bn = const_cast<BatchNormParamsT<T>&>(*block.bn);
            pre = batchnorm_forward(pre, bn, BnMode::eval).output;
        }
        x = relu(pre);
    }
    x = avgpool2d(x, model.pool_kernel);
    const std::int64_t flat = x.dim(1) * x.dim(2) * x.dim(3);
    if (flat != model.fc.in_features()) {
        throw std::invalid_argument("forward: wrong input spatial size; flattened features " +
                                    std::to_string(flat) + " do not match FC input " +
                                    std::to_string(model.fc.in_features()));
    }
    TensorT<T> flatx({x.dim(0), flat}, std::move(x.storage()));
    return fc_forward(flatx, model.fc);
}

}  // namespace

template <typename T>
TensorT<T> forward(const ConvNetModelT<T>& model, const TensorT<T>& input) {
    return run_forward(model, input, nullptr);
}

template <typename T>
std::pair<TensorT<T>, ActivationStats> forward_with_stats(const ConvNetModelT<T>& model,
                                                          const TensorT<T>& input) {
    const std::int64_t c = model.num_tapped_channels();
    ActivationStats stats;
    stats.per_channel_mean = Tensor({c});
    stats.per_channel_sqmean = Tensor({c});
    stats.per_channel_count = Tensor({c});
    stats.batch_size = static_cast<int>(input.dim(0));
    stats.channels = model.channel_index();
    TensorT<T> logits = run_forward(model, input, &stats);
    return {std::move(logits), std::move(stats)};
}

template TensorT<double> forward(const ConvNetModelT<double>&, const TensorT<double>&);
template TensorT<float> forward(const ConvNetModelT<float>&, const TensorT<float>&);
template std::pair<TensorT<double>, ActivationStats> forward_with_stats(
    const ConvNetModelT<double>&, const TensorT<double>&);
template std::pair<TensorT<float>, ActivationStats> forward_with_stats(const ConvNetModelT<float>&,
                                                                       const TensorT<float>&);

}  // namespace nmdkit
