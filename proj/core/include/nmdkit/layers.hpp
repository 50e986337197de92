#pragma once

#include <cstdint>
#include <vector>

#include "nmdkit/tensor.hpp"

namespace nmdkit {

template <typename T>
struct ConvLayerParamsT {
    TensorT<T> weights;  // [out_ch, in_ch, k, k]
    TensorT<T> bias;     // [out_ch]
    int stride = 1;
    int padding = 0;

    std::int64_t out_channels() const { return weights.dim(0); }
    std::int64_t in_channels() const { return weights.dim(1); }
    std::int64_t kernel() const { return weights.dim(2); }
};

template <typename T>
struct BatchNormParamsT {
    TensorT<T> gamma;         // [ch]
    TensorT<T> beta;          // [ch]
    TensorT<T> running_mean;  // [ch]
    TensorT<T> running_var;   // [ch]
    double momentum = 0.99;
    double epsilon = 1e-5;

    std::int64_t channels() const { return gamma.dim(0); }
};

template <typename T>
struct FcLayerParamsT {
    TensorT<T> weights;  // [out, in]
    TensorT<T> bias;     // [out]

    std::int64_t out_features() const { return weights.dim(0); }
    std::int64_t in_features() const { return weights.dim(1); }
};

using ConvLayerParams = ConvLayerParamsT<double>;
using BatchNormParams = BatchNormParamsT<double>;
using FcLayerParams = FcLayerParamsT<double>;

ConvLayerParams make_conv_params(int in_ch, int out_ch, int kernel, int stride, int padding);
BatchNormParams make_batchnorm_params(int channels);
FcLayerParams make_fc_params(int in_features, int out_features);

// Output spatial size of a valid/padded strided convolution.
std::int64_t conv_output_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                             std::int64_t padding);

// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k].
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const ConvLayerParamsT<T>& params);

enum class BnMode { train, eval };

template <typename T>
struct BnForwardResult {
    TensorT<T> output;
    TensorT<T> batch_mean;  // [C]; batch statistics (train mode only)
    TensorT<T> batch_var;   // [C]; biased variance
};

// Train mode normalizes by batch statistics and folds them into the running
// averages (mean <- momentum*mean + (1-momentum)*batch_mean, same for var).
// Eval mode normalizes by the stored running statistics and never mutates.
template <typename T>
BnForwardResult<T> batchnorm_forward(const TensorT<T>& input, BatchNormParamsT<T>& params,
                                     BnMode mode);

// Batch statistics of a [B,C,H,W] tensor per channel (biased variance).
template <typename T>
void batch_moments(const TensorT<T>& input, TensorT<T>& mean, TensorT<T>& var);

// Running-average update, exposed separately so training can normalize
// without mutating and commit the update afterwards.
template <typename T>
void update_running_stats(BatchNormParamsT<T>& params, const TensorT<T>& batch_mean,
                          const TensorT<T>& batch_var);

// Pure eval-mode normalization by the stored running statistics.
template <typename T>
TensorT<T> batchnorm_eval(const TensorT<T>& input, const BatchNormParamsT<T>& params);

template <typename T>
TensorT<T> relu(const TensorT<T>& input);

// Non-overlapping k x k window mean; H and W must be divisible by k.
template <typename T>
TensorT<T> avgpool2d(const TensorT<T>& input, int k);

template <typename T>
TensorT<T> fc_forward(const TensorT<T>& input, const FcLayerParamsT<T>& params);

struct CrossEntropyResult {
    double loss = 0.0;
    Tensor grad_logits;  // (softmax - onehot)/B
};

CrossEntropyResult cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);

// ---- backward operators (training path, double precision only) ----

struct ConvGrads {
    Tensor grad_input;
    Tensor grad_weights;
    Tensor grad_bias;
};

ConvGrads conv2d_backward(const Tensor& input, const ConvLayerParams& params,
                          const Tensor& grad_output, bool want_grad_input);

// Cache produced by the non-mutating train-mode normalization.
struct BnTrainCache {
    Tensor xhat;        // normalized pre-affine activations [B,C,H,W]
    Tensor inv_std;     // [C]
    Tensor batch_mean;  // [C]
    Tensor batch_var;   // [C]
};

Tensor batchnorm_train_normalize(const Tensor& input, const BatchNormParams& params,
                                 BnTrainCache& cache);

struct BnGrads {
    Tensor grad_input;
    Tensor grad_gamma;
    Tensor grad_beta;
};

BnGrads batchnorm_backward(const BnTrainCache& cache, const Tensor& gamma,
                           const Tensor& grad_output);

Tensor relu_backward(const Tensor& output, const Tensor& grad_output);

Tensor avgpool2d_backward(const Tensor& grad_output, int k, std::int64_t in_h, std::int64_t in_w);

struct FcGrads {
    Tensor grad_input;
    Tensor grad_weights;
    Tensor grad_bias;
};

FcGrads fc_backward(const Tensor& input, const FcLayerParams& params, const Tensor& grad_output);

}  // namespace nmdkit
