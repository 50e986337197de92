#include "nmdkit/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nmdkit/error.hpp"

namespace nmdkit {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

void require_4d(const std::vector<std::int64_t>& shape, const char* what) {
    if (shape.size() != 4) {
        throw std::invalid_argument(std::string(what) + ": expected a 4-D [B,C,H,W] tensor, got " +
                                    shape_string(shape));
    }
}

// Unfolds one image [Cin,H,W] into a column matrix [Cin*k*k, OH*OW]
// (column-major) so the convolution becomes a single GEMM.
template <typename T>
void im2col(const T* img, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* cols) {
    const std::int64_t patch = cin * k * k;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            T* col = cols + (oy * ow + ox) * patch;
            for (std::int64_t c = 0; c < cin; ++c) {
                const T* plane = img + c * h * w;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
                        *col++ = inside ? plane[iy * w + ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of grad columns back onto the padded input grid.
void col2im_add(const double* cols, std::int64_t cin, std::int64_t h, std::int64_t w,
                std::int64_t k, std::int64_t stride, std::int64_t pad, std::int64_t oh,
                std::int64_t ow, double* img) {
    const std::int64_t patch = cin * k * k;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            const double* col = cols + (oy * ow + ox) * patch;
            for (std::int64_t c = 0; c < cin; ++c) {
                double* plane = img + c * h * w;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            plane[iy * w + ix] += col[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

ConvLayerParams make_conv_params(int in_ch, int out_ch, int kernel, int stride, int padding) {
    if (kernel < 1 || stride < 1 || padding < 0) {
        throw std::invalid_argument("conv params: need kernel >= 1, stride >= 1, padding >= 0");
    }
    ConvLayerParams p;
    p.weights = Tensor({out_ch, in_ch, kernel, kernel});
    p.bias = Tensor({out_ch});
    p.stride = stride;
    p.padding = padding;
    return p;
}

BatchNormParams make_batchnorm_params(int channels) {
    BatchNormParams p;
    p.gamma = Tensor::full({channels}, 1.0);
    p.beta = Tensor({channels});
    p.running_mean = Tensor({channels});
    p.running_var = Tensor::full({channels}, 1.0);
    return p;
}

FcLayerParams make_fc_params(int in_features, int out_features) {
    FcLayerParams p;
    p.weights = Tensor({out_features, in_features});
    p.bias = Tensor({out_features});
    return p;
}

std::int64_t conv_output_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                             std::int64_t padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const ConvLayerParamsT<T>& params) {
    require_4d(input.shape(), "conv2d");
    const std::int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (cin != params.in_channels()) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(cin) +
                                    " channels but kernel expects " +
                                    std::to_string(params.in_channels()));
    }
    const std::int64_t k = params.kernel(), s = params.stride, p = params.padding;
    const std::int64_t oh = conv_output_dim(h, k, s, p);
    const std::int64_t ow = conv_output_dim(w, k, s, p);
    if (oh < 1 || ow < 1) {
        throw std::invalid_argument("conv2d: input " + shape_string(input.shape()) +
                                    " too small for kernel " + std::to_string(k));
    }
    const std::int64_t cout = params.out_channels();
    const std::int64_t patch = cin * k * k;

    TensorT<T> output({b, cout, oh, ow});
    Eigen::Map<const RowMat<T>> wmat(params.weights.data(), cout, patch);
    Eigen::Map<const Vec<T>> bias(params.bias.data(), cout);
    ColMat<T> cols(patch, oh * ow);

    for (std::int64_t i = 0; i < b; ++i) {
        im2col(input.data() + i * cin * h * w, cin, h, w, k, s, p, oh, ow, cols.data());
        Eigen::Map<RowMat<T>> out(output.data() + i * cout * oh * ow, cout, oh * ow);
        out.noalias() = wmat * cols;
        out.colwise() += bias;
    }
    return output;
}

template <typename T>
void batch_moments(const TensorT<T>& input, TensorT<T>& mean, TensorT<T>& var) {
    require_4d(input.shape(), "batch_moments");
    const std::int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t plane = h * w;
    const double n = static_cast<double>(b * plane);
    mean = TensorT<T>({c});
    var = TensorT<T>({c});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sumsq = 0.0;
        for (std::int64_t i = 0; i < b; ++i) {
            const T* ptr = input.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                const double v = static_cast<double>(ptr[j]);
                sum += v;
                sumsq += v * v;
            }
        }
        const double m = sum / n;
        mean[ch] = static_cast<T>(m);
        var[ch] = static_cast<T>(std::max(0.0, sumsq / n - m * m));
    }
}

template <typename T>
void update_running_stats(BatchNormParamsT<T>& params, const TensorT<T>& batch_mean,
                          const TensorT<T>& batch_var) {
    const double lambda = params.momentum;
    for (std::int64_t ch = 0; ch < params.channels(); ++ch) {
        params.running_mean[ch] =
            static_cast<T>(lambda * params.running_mean[ch] + (1.0 - lambda) * batch_mean[ch]);
        params.running_var[ch] =
            static_cast<T>(lambda * params.running_var[ch] + (1.0 - lambda) * batch_var[ch]);
    }
}

namespace {

template <typename T>
TensorT<T> bn_apply(const TensorT<T>& input, const TensorT<T>& mean, const TensorT<T>& var,
                    const BatchNormParamsT<T>& params) {
    const std::int64_t b = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
    TensorT<T> output(input.shape());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(var[ch]) + params.epsilon);
        const double g = static_cast<double>(params.gamma[ch]) * inv;
        const double shift = static_cast<double>(params.beta[ch]) -
                             g * static_cast<double>(mean[ch]);
        for (std::int64_t i = 0; i < b; ++i) {
            const T* in = input.data() + (i * c + ch) * plane;
            T* out = output.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                out[j] = static_cast<T>(g * static_cast<double>(in[j]) + shift);
            }
        }
    }
    return output;
}

}  // namespace

template <typename T>
BnForwardResult<T> batchnorm_forward(const TensorT<T>& input, BatchNormParamsT<T>& params,
                                     BnMode mode) {
    require_4d(input.shape(), "batchnorm");
    if (input.dim(1) != params.channels()) {
        throw std::invalid_argument("batchnorm: channel mismatch");
    }
    BnForwardResult<T> result;
    if (mode == BnMode::eval) {
        result.output = bn_apply(input, params.running_mean, params.running_var, params);
        return result;
    }
    if (input.dim(0) * input.dim(2) * input.dim(3) < 2) {
        throw std::invalid_argument("batchnorm: train mode needs at least 2 values per channel");
    }
    batch_moments(input, result.batch_mean, result.batch_var);
    if (!result.batch_mean.all_finite() || !result.batch_var.all_finite()) {
        throw NumericalError("batchnorm: non-finite batch statistics");
    }
    result.output = bn_apply(input, result.batch_mean, result.batch_var, params);
    update_running_stats(params, result.batch_mean, result.batch_var);
    return result;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
    TensorT<T> output(input.shape());
    const T* in = input.data();
    T* out = output.data();
    for (std::int64_t i = 0; i < input.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
    return output;
}

template <typename T>
TensorT<T> avgpool2d(const TensorT<T>& input, int k) {
    require_4d(input.shape(), "avgpool2d");
    const std::int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (k < 1 || h % k != 0 || w % k != 0) {
        throw std::invalid_argument("avgpool2d: spatial dims must be divisible by kernel");
    }
    const std::int64_t oh = h / k, ow = w / k;
    const double inv = 1.0 / (static_cast<double>(k) * k);
    TensorT<T> output({b, c, oh, ow});
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* in = input.data() + (i * c + ch) * h * w;
            T* out = output.data() + (i * c + ch) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double sum = 0.0;
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        for (std::int64_t kx = 0; kx < k; ++kx) {
                            sum += static_cast<double>(in[(oy * k + ky) * w + ox * k + kx]);
                        }
                    }
                    out[oy * ow + ox] = static_cast<T>(sum * inv);
                }
            }
        }
    }
    return output;
}

template <typename T>
TensorT<T> fc_forward(const TensorT<T>& input, const FcLayerParamsT<T>& params) {
    if (input.rank() != 2 || input.dim(1) != params.in_features()) {
        throw std::invalid_argument("fc: expected [B," + std::to_string(params.in_features()) +
                                    "] input, got " + shape_string(input.shape()));
    }
    const std::int64_t b = input.dim(0), in = params.in_features(), out = params.out_features();
    TensorT<T> output({b, out});
    Eigen::Map<const RowMat<T>> x(input.data(), b, in);
    Eigen::Map<const RowMat<T>> wmat(params.weights.data(), out, in);
    Eigen::Map<const Vec<T>> bias(params.bias.data(), out);
    Eigen::Map<RowMat<T>> y(output.data(), b, out);
    y.noalias() = x * wmat.transpose();
    y.rowwise() += bias.transpose();
    return output;
}

CrossEntropyResult cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw std::invalid_argument("cross_entropy: logits must be [B,K]");
    }
    const std::int64_t b = logits.dim(0), k = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw std::invalid_argument("cross_entropy: label count mismatch");
    }
    CrossEntropyResult result;
    result.grad_logits = Tensor({b, k});
    double total = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || labels[i] >= k) {
            throw std::invalid_argument("cross_entropy: label out of range");
        }
        const double* row = logits.data() + i * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double se = 0.0;
        for (std::int64_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
        const double lse = mx + std::log(se);
        total += lse - row[labels[i]];
        double* grad = result.grad_logits.data() + i * k;
        for (std::int64_t j = 0; j < k; ++j) {
            grad[j] = std::exp(row[j] - lse) / static_cast<double>(b);
        }
        grad[labels[i]] -= 1.0 / static_cast<double>(b);
    }
    result.loss = total / static_cast<double>(b);
    return result;
}

ConvGrads conv2d_backward(const Tensor& input, const ConvLayerParams& params,
                          const Tensor& grad_output, bool want_grad_input) {
    const std::int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t k = params.kernel(), s = params.stride, p = params.padding;
    const std::int64_t cout = params.out_channels();
    const std::int64_t oh = grad_output.dim(2), ow = grad_output.dim(3);
    const std::int64_t patch = cin * k * k;

    ConvGrads grads;
    grads.grad_weights = Tensor({cout, cin, k, k});
    grads.grad_bias = Tensor({cout});
    if (want_grad_input) grads.grad_input = Tensor(input.shape());

    Eigen::Map<RowMat<double>> gw(grads.grad_weights.data(), cout, patch);
    Eigen::Map<Vec<double>> gb(grads.grad_bias.data(), cout);
    Eigen::Map<const RowMat<double>> wmat(params.weights.data(), cout, patch);
    ColMat<double> cols(patch, oh * ow);
    ColMat<double> gcols(patch, oh * ow);

    for (std::int64_t i = 0; i < b; ++i) {
        Eigen::Map<const RowMat<double>> go(grad_output.data() + i * cout * oh * ow, cout, oh * ow);
        im2col(input.data() + i * cin * h * w, cin, h, w, k, s, p, oh, ow, cols.data());
        gw.noalias() += go * cols.transpose();
        gb.noalias() += go.rowwise().sum();
        if (want_grad_input) {
            gcols.noalias() = wmat.transpose() * go;
            col2im_add(gcols.data(), cin, h, w, k, s, p, oh, ow,
                       grads.grad_input.data() + i * cin * h * w);
        }
    }
    return grads;
}

Tensor batchnorm_train_normalize(const Tensor& input, const BatchNormParams& params,
                                 BnTrainCache& cache) {
    require_4d(input.shape(), "batchnorm");
    batch_moments(input, cache.batch_mean, cache.batch_var);
    if (!cache.batch_mean.all_finite() || !cache.batch_var.all_finite()) {
        throw NumericalError("batchnorm: non-finite batch statistics");
    }
    const std::int64_t b = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
    cache.inv_std = Tensor({c});
    cache.xhat = Tensor(input.shape());
    Tensor output(input.shape());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(cache.batch_var[ch] + params.epsilon);
        cache.inv_std[ch] = inv;
        const double m = cache.batch_mean[ch];
        const double g = params.gamma[ch], beta = params.beta[ch];
        for (std::int64_t i = 0; i < b; ++i) {
            const double* in = input.data() + (i * c + ch) * plane;
            double* xh = cache.xhat.data() + (i * c + ch) * plane;
            double* out = output.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                xh[j] = (in[j] - m) * inv;
                out[j] = g * xh[j] + beta;
            }
        }
    }
    return output;
}

BnGrads batchnorm_backward(const BnTrainCache& cache, const Tensor& gamma,
                           const Tensor& grad_output) {
    const std::int64_t b = grad_output.dim(0), c = grad_output.dim(1);
    const std::int64_t plane = grad_output.dim(2) * grad_output.dim(3);
    const double n = static_cast<double>(b * plane);

    BnGrads grads;
    grads.grad_input = Tensor(grad_output.shape());
    grads.grad_gamma = Tensor({c});
    grads.grad_beta = Tensor({c});

    for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t i = 0; i < b; ++i) {
            const double* go = grad_output.data() + (i * c + ch) * plane;
            const double* xh = cache.xhat.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                sum_g += go[j];
                sum_gx += go[j] * xh[j];
            }
        }
        grads.grad_beta[ch] = sum_g;
        grads.grad_gamma[ch] = sum_gx;
        const double scale = gamma[ch] * cache.inv_std[ch] / n;
        for (std::int64_t i = 0; i < b; ++i) {
            const double* go = grad_output.data() + (i * c + ch) * plane;
            const double* xh = cache.xhat.data() + (i * c + ch) * plane;
            double* gi = grads.grad_input.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                gi[j] = scale * (n * go[j] - sum_g - xh[j] * sum_gx);
            }
        }
    }
    return grads;
}

Tensor relu_backward(const Tensor& output, const Tensor& grad_output) {
    Tensor grad(grad_output.shape());
    for (std::int64_t i = 0; i < grad.size(); ++i) {
        grad[i] = output[i] > 0.0 ? grad_output[i] : 0.0;
    }
    return grad;
}

Tensor avgpool2d_backward(const Tensor& grad_output, int k, std::int64_t in_h, std::int64_t in_w) {
    const std::int64_t b = grad_output.dim(0), c = grad_output.dim(1);
    const std::int64_t oh = grad_output.dim(2), ow = grad_output.dim(3);
    const double inv = 1.0 / (static_cast<double>(k) * k);
    Tensor grad({b, c, in_h, in_w});
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const double* go = grad_output.data() + (i * c + ch) * oh * ow;
            double* gi = grad.data() + (i * c + ch) * in_h * in_w;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const double v = go[oy * ow + ox] * inv;
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        for (std::int64_t kx = 0; kx < k; ++kx) {
                            gi[(oy * k + ky) * in_w + ox * k + kx] = v;
                        }
                    }
                }
            }
        }
    }
    return grad;
}

FcGrads fc_backward(const Tensor& input, const FcLayerParams& params, const Tensor& grad_output) {
    const std::int64_t b = input.dim(0), in = params.in_features(), out = params.out_features();
    FcGrads grads;
    grads.grad_input = Tensor({b, in});
    grads.grad_weights = Tensor({out, in});
    grads.grad_bias = Tensor({out});

    Eigen::Map<const RowMat<double>> x(input.data(), b, in);
    Eigen::Map<const RowMat<double>> wmat(params.weights.data(), out, in);
    Eigen::Map<const RowMat<double>> go(grad_output.data(), b, out);
    Eigen::Map<RowMat<double>> gx(grads.grad_input.data(), b, in);
    Eigen::Map<RowMat<double>> gw(grads.grad_weights.data(), out, in);
    Eigen::Map<Vec<double>> gb(grads.grad_bias.data(), out);

    gx.noalias() = go * wmat;
    gw.noalias() = go.transpose() * x;
    gb.noalias() = go.colwise().sum().transpose();
    return grads;
}

// The float instantiations back the opt-in 32-bit inference path.
template TensorT<double> conv2d_forward(const TensorT<double>&, const ConvLayerParamsT<double>&);
template TensorT<float> conv2d_forward(const TensorT<float>&, const ConvLayerParamsT<float>&);
template void batch_moments(const TensorT<double>&, TensorT<double>&, TensorT<double>&);
template void batch_moments(const TensorT<float>&, TensorT<float>&, TensorT<float>&);
template void update_running_stats(BatchNormParamsT<double>&, const TensorT<double>&,
                                   const TensorT<double>&);
template void update_running_stats(BatchNormParamsT<float>&, const TensorT<float>&,
                                   const TensorT<float>&);
template BnForwardResult<double> batchnorm_forward(const TensorT<double>&,
                                                   BatchNormParamsT<double>&, BnMode);
template BnForwardResult<float> batchnorm_forward(const TensorT<float>&, BatchNormParamsT<float>&,
                                                  BnMode);
template TensorT<double> relu(const TensorT<double>&);
template TensorT<float> relu(const TensorT<float>&);
template TensorT<double> avgpool2d(const TensorT<double>&, int);
template TensorT<float> avgpool2d(const TensorT<float>&, int);
template TensorT<double> fc_forward(const TensorT<double>&, const FcLayerParamsT<double>&);
template TensorT<float> fc_forward(const TensorT<float>&, const FcLayerParamsT<float>&);

}  // namespace nmdkit
