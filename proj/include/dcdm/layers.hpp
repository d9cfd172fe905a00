#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dcdm/tensor.hpp"

namespace dcdm {

using Rng = std::mt19937_64;

enum class LayerKind { Conv3x3, MaxPool2x2, Relu, Flatten, Dense, Dropout, Softmax };

std::string to_string(LayerKind kind);

/// Description of one layer. Convolutions are always 3x3, stride 1, zero
/// padding 1; pooling is always 2x2, stride 2.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in = 0;   // channels (conv) or units (dense)
    std::size_t out = 0;
    double dropout_p = 0.0;

    static LayerSpec conv3x3(std::size_t in_channels, std::size_t out_channels);
    static LayerSpec maxpool2x2();
    static LayerSpec relu();
    static LayerSpec flatten();
    static LayerSpec dense(std::size_t in_units, std::size_t out_units);
    static LayerSpec dropout(double p);
    static LayerSpec softmax();

    bool has_params() const { return kind == LayerKind::Conv3x3 || kind == LayerKind::Dense; }
    Shape weight_shape() const;
    Shape bias_shape() const;
    void validate() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <typename T>
struct LayerParams {
    Tensor<T> weights;  // conv: [out, in, 3, 3]; dense: [out, in]
    Tensor<T> bias;     // [out]

    std::size_t count() const { return weights.numel() + bias.numel(); }
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// State a forward pass leaves behind for the matching backward call. Only
/// filled when forward runs in training mode.
template <typename T>
struct ForwardCache {
    LayerKind kind = LayerKind::Relu;
    bool valid = false;
    Tensor<T> input;                   // conv, dense, relu
    Shape input_shape;                 // maxpool, flatten
    std::vector<std::size_t> argmax;   // maxpool: flat input index per output cell
    Tensor<T> mask;                    // dropout: 0 or 1/(1-p) per element
    Tensor<T> probs;                   // softmax cross-entropy
    std::vector<std::size_t> targets;  // softmax cross-entropy
};

template <typename T>
struct Gradients {
    Tensor<T> dx;
    Tensor<T> dweights;  // empty for parameter-free layers
    Tensor<T> dbias;
};

// Forward passes. Spatial layers take [C,H,W] or a batch [N,C,H,W]; dense
// takes [in] or [N,in]. Pass a cache to record what backward needs.

template <typename T>
Tensor<T> conv3x3_forward(const Tensor<T>& x, const LayerParams<T>& params, ForwardCache<T>* cache = nullptr);

template <typename T>
Tensor<T> maxpool2x2_forward(const Tensor<T>& x, ForwardCache<T>* cache = nullptr);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, ForwardCache<T>* cache = nullptr);

/// [N,C,H,W] -> [N,C*H*W]; a single [C,H,W] image becomes [C*H*W].
template <typename T>
Tensor<T> flatten_forward(const Tensor<T>& x, ForwardCache<T>* cache = nullptr);

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const LayerParams<T>& params, ForwardCache<T>* cache = nullptr);

/// Inverted dropout. With training off the input is returned unchanged.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double p, bool training, Rng& rng, ForwardCache<T>* cache = nullptr);

/// Numerically stable softmax over the last axis of [K] or [N,K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
struct SoftmaxLoss {
    double loss = 0.0;  // mean over the batch
    Tensor<T> probs;
};

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, std::size_t target, ForwardCache<T>* cache = nullptr);

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                                     ForwardCache<T>* cache = nullptr);

/// Gradients of one layer given the upstream gradient dy. For the softmax
/// layer dy is a single element scaling d(mean loss)/d(logits).
template <typename T>
Gradients<T> backward(const LayerSpec& spec, const ForwardCache<T>& cache, const Tensor<T>& dy,
                      const LayerParams<T>* params = nullptr);

enum class InitScheme { He, Glorot };

template <typename T>
LayerParams<T> init_params(const LayerSpec& spec, InitScheme scheme, Rng& rng);

// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-4;
    double momentum = 0.9;  // sgd
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> first;   // adam m, or sgd velocity
    std::vector<Tensor<T>> second;  // adam v
    std::uint64_t step = 0;
};

/// One update over a set of parameter tensors. State buffers are created on
/// the first call and must mirror the parameter shapes afterwards.
template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                    OptimizerState<T>& state, const OptimizerConfig& config);

}  // namespace dcdm
