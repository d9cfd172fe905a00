#include "dcdm/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dcdm {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv3x3: return "conv3x3";
        case LayerKind::MaxPool2x2: return "maxpool2x2";
        case LayerKind::Relu: return "relu";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Dense: return "dense";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Softmax: return "softmax";
    }
    return "unknown";
}

LayerSpec LayerSpec::conv3x3(std::size_t in_channels, std::size_t out_channels) {
    LayerSpec s{LayerKind::Conv3x3, in_channels, out_channels, 0.0};
    s.validate();
    return s;
}
LayerSpec LayerSpec::maxpool2x2() { return {LayerKind::MaxPool2x2, 0, 0, 0.0}; }
LayerSpec LayerSpec::relu() { return {LayerKind::Relu, 0, 0, 0.0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, 0, 0, 0.0}; }
LayerSpec LayerSpec::dense(std::size_t in_units, std::size_t out_units) {
    LayerSpec s{LayerKind::Dense, in_units, out_units, 0.0};
    s.validate();
    return s;
}
LayerSpec LayerSpec::dropout(double p) {
    LayerSpec s{LayerKind::Dropout, 0, 0, p};
    s.validate();
    return s;
}
LayerSpec LayerSpec::softmax() { return {LayerKind::Softmax, 0, 0, 0.0}; }

void LayerSpec::validate() const {
    if (has_params() && (in == 0 || out == 0)) throw DataError(to_string(kind) + " layer needs positive in/out sizes");
    if (kind == LayerKind::Dropout && !(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw DataError("dropout probability must be in [0,1), got " + std::to_string(dropout_p));
    }
}

Shape LayerSpec::weight_shape() const {
    if (kind == LayerKind::Conv3x3) return Shape{out, in, 3, 3};
    if (kind == LayerKind::Dense) return Shape{out, in};
    throw DataError(to_string(kind) + " layer has no parameters");
}

Shape LayerSpec::bias_shape() const {
    if (!has_params()) throw DataError(to_string(kind) + " layer has no parameters");
    return Shape{out};
}

namespace {

// Views a [C,H,W] or [N,C,H,W] tensor as a batch.
struct Spatial {
    std::size_t n, c, h, w;
    bool batched;
};

Spatial spatial_dims(const Shape& s, const char* who) {
    if (s.rank() == 3) return {1, s[0], s[1], s[2], false};
    if (s.rank() == 4) return {s[0], s[1], s[2], s[3], true};
    throw ShapeError(std::string(who) + " expects [C,H,W] or [N,C,H,W], got " + s.to_string());
}

Shape spatial_shape(const Spatial& d, std::size_t c, std::size_t h, std::size_t w) {
    return d.batched ? Shape{d.n, c, h, w} : Shape{c, h, w};
}

template <typename T>
void require_cache(const ForwardCache<T>& cache, LayerKind kind) {
    if (!cache.valid) throw Error("backward(" + to_string(kind) + "): no cache from a training-mode forward pass");
    if (cache.kind != kind) {
        throw Error("backward(" + to_string(kind) + "): cache was produced by " + to_string(cache.kind));
    }
}

template <typename T>
void require_params(const LayerParams<T>* params, const LayerSpec& spec) {
    if (params == nullptr) throw Error("backward(" + to_string(spec.kind) + "): layer parameters are required");
    if (params->weights.shape() != spec.weight_shape() || params->bias.shape() != spec.bias_shape()) {
        throw ShapeError("backward(" + to_string(spec.kind) + "): parameters " + params->weights.shape().to_string() +
                         " do not match spec " + spec.weight_shape().to_string());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// convolution

template <typename T>
Tensor<T> conv3x3_forward(const Tensor<T>& x, const LayerParams<T>& params, ForwardCache<T>* cache) {
    const Spatial d = spatial_dims(x.shape(), "conv3x3");
    if (params.weights.rank() != 4 || params.weights.dim(2) != 3 || params.weights.dim(3) != 3) {
        throw ShapeError("conv3x3 weights must be [out,in,3,3], got " + params.weights.shape().to_string());
    }
    const std::size_t out_c = params.weights.dim(0);
    if (params.weights.dim(1) != d.c) {
        throw ShapeError("conv3x3 channel mismatch: input has " + std::to_string(d.c) + " channels, weights expect " +
                         std::to_string(params.weights.dim(1)));
    }
    if (params.bias.shape() != Shape{out_c}) throw ShapeError("conv3x3 bias must be [" + std::to_string(out_c) + "]");

    const std::size_t hw = d.h * d.w, k = d.c * 9;
    Tensor<T> y(spatial_shape(d, out_c, d.h, d.w));
    std::vector<T> cols(k * hw);
    for (std::size_t n = 0; n < d.n; ++n) {
        kernels::im2col3x3(x.ptr() + n * d.c * hw, d.c, d.h, d.w, cols.data());
        T* yn = y.ptr() + n * out_c * hw;
        for (std::size_t o = 0; o < out_c; ++o) std::fill(yn + o * hw, yn + (o + 1) * hw, params.bias[o]);
        kernels::gemm(out_c, hw, k, params.weights.ptr(), k, false, cols.data(), hw, false, yn, hw, true);
    }
    check_finite(y, "conv3x3_forward");
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Conv3x3;
        cache->valid = true;
        cache->input = x;
    }
    return y;
}

namespace {

template <typename T>
Gradients<T> conv3x3_backward(const ForwardCache<T>& cache, const Tensor<T>& dy, const LayerParams<T>& params) {
    const Tensor<T>& x = cache.input;
    const Spatial d = spatial_dims(x.shape(), "conv3x3 backward");
    const std::size_t out_c = params.weights.dim(0), hw = d.h * d.w, k = d.c * 9;
    if (dy.shape() != spatial_shape(d, out_c, d.h, d.w)) {
        throw ShapeError("conv3x3 backward: dy " + dy.shape().to_string() + " does not match forward output");
    }
    Gradients<T> g;
    g.dx = Tensor<T>(x.shape());
    g.dweights = Tensor<T>(params.weights.shape());
    g.dbias = Tensor<T>(params.bias.shape());
    std::vector<T> cols(k * hw), dcols(k * hw);
    for (std::size_t n = 0; n < d.n; ++n) {
        const T* dyn = dy.ptr() + n * out_c * hw;
        kernels::im2col3x3(x.ptr() + n * d.c * hw, d.c, d.h, d.w, cols.data());
        // dW += dy_n * cols^T
        kernels::gemm(out_c, k, hw, dyn, hw, false, cols.data(), hw, true, g.dweights.ptr(), k, true);
        // dcols = W^T * dy_n
        kernels::gemm(k, hw, out_c, params.weights.ptr(), k, true, dyn, hw, false, dcols.data(), hw, false);
        kernels::col2im3x3(dcols.data(), d.c, d.h, d.w, g.dx.ptr() + n * d.c * hw);
        for (std::size_t o = 0; o < out_c; ++o) {
            T s = T(0);
            for (std::size_t i = 0; i < hw; ++i) s += dyn[o * hw + i];
            g.dbias[o] += s;
        }
    }
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// pooling, relu, flatten

template <typename T>
Tensor<T> maxpool2x2_forward(const Tensor<T>& x, ForwardCache<T>* cache) {
    const Spatial d = spatial_dims(x.shape(), "maxpool2x2");
    if (d.h < 2 || d.w < 2) throw ShapeError("maxpool2x2 needs H,W >= 2, got " + x.shape().to_string());
    const std::size_t oh = d.h / 2, ow = d.w / 2;
    Tensor<T> y(spatial_shape(d, d.c, oh, ow));
    std::vector<std::size_t> idx(y.numel());
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
        const std::size_t base = plane * d.h * d.w;
        for (std::size_t yy = 0; yy < oh; ++yy) {
            for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
                // Row-major window scan; strict > keeps the first maximum.
                std::size_t best = base + (2 * yy) * d.w + 2 * xx;
                for (std::size_t wy = 0; wy < 2; ++wy) {
                    for (std::size_t wx = 0; wx < 2; ++wx) {
                        const std::size_t at = base + (2 * yy + wy) * d.w + 2 * xx + wx;
                        if (x[at] > x[best]) best = at;
                    }
                }
                y[o] = x[best];
                idx[o] = best;
            }
        }
    }
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::MaxPool2x2;
        cache->valid = true;
        cache->input_shape = x.shape();
        cache->argmax = std::move(idx);
    }
    return y;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, ForwardCache<T>* cache) {
    Tensor<T> y = relu(x);
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Relu;
        cache->valid = true;
        cache->input = x;
    }
    return y;
}

template <typename T>
Tensor<T> flatten_forward(const Tensor<T>& x, ForwardCache<T>* cache) {
    Tensor<T> y;
    if (x.rank() == 4) {
        y = x.reshaped(Shape{x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)});
    } else if (x.rank() == 3) {
        y = x.reshaped(Shape{x.numel()});
    } else {
        throw ShapeError("flatten expects [C,H,W] or [N,C,H,W], got " + x.shape().to_string());
    }
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Flatten;
        cache->valid = true;
        cache->input_shape = x.shape();
    }
    return y;
}

// ---------------------------------------------------------------------------
// dense

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const LayerParams<T>& params, ForwardCache<T>* cache) {
    if (params.weights.rank() != 2) throw ShapeError("dense weights must be 2-D, got " + params.weights.shape().to_string());
    const std::size_t out = params.weights.dim(0), in = params.weights.dim(1);
    std::size_t batch = 0;
    if (x.rank() == 1) {
        batch = 1;
    } else if (x.rank() == 2) {
        batch = x.dim(0);
    } else {
        throw ShapeError("dense expects [in] or [N,in], got " + x.shape().to_string());
    }
    if (x.numel() / batch != in) {
        throw ShapeError("dense input length " + std::to_string(x.numel() / batch) + " does not match in_units " +
                         std::to_string(in));
    }
    if (params.bias.shape() != Shape{out}) throw ShapeError("dense bias must be [" + std::to_string(out) + "]");
    Tensor<T> y(x.rank() == 1 ? Shape{out} : Shape{batch, out});
    for (std::size_t n = 0; n < batch; ++n) std::copy(params.bias.ptr(), params.bias.ptr() + out, y.ptr() + n * out);
    // y = x * W^T + b
    kernels::gemm(batch, out, in, x.ptr(), in, false, params.weights.ptr(), in, true, y.ptr(), out, true);
    check_finite(y, "dense_forward");
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Dense;
        cache->valid = true;
        cache->input = x;
    }
    return y;
}

// ---------------------------------------------------------------------------
// dropout

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double p, bool training, Rng& rng, ForwardCache<T>* cache) {
    if (!(p >= 0.0 && p < 1.0)) throw DataError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (!training) {
        if (cache) *cache = ForwardCache<T>{};
        return x;
    }
    Tensor<T> mask(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::bernoulli_distribution keep(1.0 - p);
    for (T& m : mask.data()) m = keep(rng) ? keep_scale : T(0);
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= mask[i];
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Dropout;
        cache->valid = true;
        cache->mask = std::move(mask);
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("softmax expects [K] or [N,K]");
    const std::size_t k = logits.shape()[logits.rank() - 1];
    const std::size_t rows = logits.numel() / k;
    Tensor<T> probs(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = logits.ptr() + r * k;
        T* p = probs.ptr() + r * k;
        const T zmax = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(z[i] - zmax));
        for (std::size_t i = 0; i < k; ++i) p[i] = static_cast<T>(std::exp(static_cast<double>(z[i] - zmax)) / sum);
    }
    check_finite(probs, "softmax");
    return probs;
}

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, std::size_t target, ForwardCache<T>* cache) {
    const std::size_t t[1] = {target};
    if (logits.rank() != 1) throw ShapeError("softmax_cross_entropy with one target expects [K] logits");
    return softmax_cross_entropy(logits, std::span<const std::size_t>(t), cache);
}

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                                     ForwardCache<T>* cache) {
    if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("softmax_cross_entropy expects [K] or [N,K]");
    const std::size_t k = logits.shape()[logits.rank() - 1];
    const std::size_t rows = logits.numel() / k;
    if (k < 2) throw ShapeError("softmax_cross_entropy needs at least 2 classes");
    if (targets.size() != rows) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    for (std::size_t t : targets) {
        if (t >= k) throw DataError("target class " + std::to_string(t) + " out of range for K=" + std::to_string(k));
    }
    SoftmaxLoss<T> out;
    out.probs = Tensor<T>(logits.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = logits.ptr() + r * k;
        T* p = out.probs.ptr() + r * k;
        const double zmax = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) sum += std::exp(z[i] - zmax);
        const double log_sum = std::log(sum);
        for (std::size_t i = 0; i < k; ++i) p[i] = static_cast<T>(std::exp(z[i] - zmax) / sum);
        // -log softmax computed in log space so tiny probabilities keep precision.
        total += log_sum - (z[targets[r]] - zmax);
    }
    out.loss = total / static_cast<double>(rows);
    if (!std::isfinite(out.loss)) throw NumericError("softmax_cross_entropy produced a non-finite loss");
    if (cache) {
        *cache = ForwardCache<T>{};
        cache->kind = LayerKind::Softmax;
        cache->valid = true;
        cache->probs = out.probs;
        cache->targets.assign(targets.begin(), targets.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
Gradients<T> backward(const LayerSpec& spec, const ForwardCache<T>& cache, const Tensor<T>& dy,
                      const LayerParams<T>* params) {
    require_cache(cache, spec.kind);
    Gradients<T> g;
    switch (spec.kind) {
        case LayerKind::Conv3x3:
            require_params(params, spec);
            return conv3x3_backward(cache, dy, *params);

        case LayerKind::Dense: {
            require_params(params, spec);
            const Tensor<T>& x = cache.input;
            const std::size_t in = spec.in, out = spec.out, batch = x.numel() / in;
            if (dy.numel() != batch * out) throw ShapeError("dense backward: dy " + dy.shape().to_string());
            g.dx = Tensor<T>(x.shape());
            g.dweights = Tensor<T>(params->weights.shape());
            g.dbias = Tensor<T>(params->bias.shape());
            // dx = dy * W, dW = dy^T * x, db = column sums of dy
            kernels::gemm(batch, in, out, dy.ptr(), out, false, params->weights.ptr(), in, false, g.dx.ptr(), in, false);
            kernels::gemm(out, in, batch, dy.ptr(), out, true, x.ptr(), in, false, g.dweights.ptr(), in, false);
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t o = 0; o < out; ++o) g.dbias[o] += dy[n * out + o];
            return g;
        }

        case LayerKind::MaxPool2x2: {
            if (dy.numel() != cache.argmax.size()) throw ShapeError("maxpool backward: dy " + dy.shape().to_string());
            g.dx = Tensor<T>(cache.input_shape);
            for (std::size_t o = 0; o < cache.argmax.size(); ++o) g.dx[cache.argmax[o]] += dy[o];
            return g;
        }

        case LayerKind::Relu: {
            if (dy.shape() != cache.input.shape()) throw ShapeError("relu backward: dy " + dy.shape().to_string());
            g.dx = dy;
            for (std::size_t i = 0; i < dy.numel(); ++i)
                if (!(cache.input[i] > T(0))) g.dx[i] = T(0);
            return g;
        }

        case LayerKind::Flatten:
            g.dx = dy.reshaped(cache.input_shape);
            return g;

        case LayerKind::Dropout: {
            if (dy.shape() != cache.mask.shape()) throw ShapeError("dropout backward: dy " + dy.shape().to_string());
            g.dx = dy;
            for (std::size_t i = 0; i < dy.numel(); ++i) g.dx[i] *= cache.mask[i];
            return g;
        }

        case LayerKind::Softmax: {
            const T upstream = dy.empty() ? T(1) : dy[0];
            const std::size_t rows = cache.targets.size();
            const std::size_t k = cache.probs.numel() / rows;
            g.dx = cache.probs;
            for (std::size_t r = 0; r < rows; ++r) g.dx[r * k + cache.targets[r]] -= T(1);
            const T s = upstream / static_cast<T>(rows);
            for (T& v : g.dx.data()) v *= s;
            return g;
        }
    }
    throw Error("backward: unknown layer kind");
}

// ---------------------------------------------------------------------------
// init

template <typename T>
LayerParams<T> init_params(const LayerSpec& spec, InitScheme scheme, Rng& rng) {
    if (!spec.has_params()) throw DataError(to_string(spec.kind) + " layer has no parameters to initialize");
    const std::size_t taps = spec.kind == LayerKind::Conv3x3 ? 9 : 1;
    const double fan_in = static_cast<double>(spec.in * taps);
    const double fan_out = static_cast<double>(spec.out * taps);
    LayerParams<T> p{Tensor<T>(spec.weight_shape()), Tensor<T>(spec.bias_shape())};
    if (scheme == InitScheme::He) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (T& w : p.weights.data()) w = static_cast<T>(dist(rng));
    } else {
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (T& w : p.weights.data()) w = static_cast<T>(dist(rng));
    }
    return p;
}

// ---------------------------------------------------------------------------
// optimizers

template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                    OptimizerState<T>& state, const OptimizerConfig& config) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    }
    const bool adam = config.kind == OptimizerKind::Adam;
    if (state.first.empty()) {
        for (const Tensor<T>* p : params) {
            state.first.emplace_back(p->shape());
            if (adam) state.second.emplace_back(p->shape());
        }
    }
    if (state.first.size() != params.size() || (adam && state.second.size() != params.size())) {
        throw ShapeError("optimizer_step: state holds " + std::to_string(state.first.size()) + " buffers for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i]->shape() || state.first[i].shape() != params[i]->shape() ||
            (adam && state.second[i].shape() != params[i]->shape())) {
            throw ShapeError("optimizer_step: parameter " + std::to_string(i) + " " + params[i]->shape().to_string() +
                             " disagrees with its gradient or state " + grads[i]->shape().to_string());
        }
    }

    ++state.step;
    const bool move = config.lr != 0.0;
    if (adam) {
        const double b1 = config.beta1, b2 = config.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->data();
            auto g = grads[i]->data();
            auto m = state.first[i].data();
            auto v = state.second[i].data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = g[j];
                const double mj = b1 * m[j] + (1.0 - b1) * gj;
                const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                if (move) p[j] -= static_cast<T>(config.lr * (mj / c1) / (std::sqrt(vj / c2) + config.epsilon));
            }
        }
    } else {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->data();
            auto g = grads[i]->data();
            auto vel = state.first[i].data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                vel[j] = static_cast<T>(config.momentum * vel[j] - config.lr * g[j]);
                if (move) p[j] += vel[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------

#define DCDM_INSTANTIATE_LAYERS(T)                                                                               \
    template Tensor<T> conv3x3_forward(const Tensor<T>&, const LayerParams<T>&, ForwardCache<T>*);               \
    template Tensor<T> maxpool2x2_forward(const Tensor<T>&, ForwardCache<T>*);                                   \
    template Tensor<T> relu_forward(const Tensor<T>&, ForwardCache<T>*);                                         \
    template Tensor<T> flatten_forward(const Tensor<T>&, ForwardCache<T>*);                                      \
    template Tensor<T> dense_forward(const Tensor<T>&, const LayerParams<T>&, ForwardCache<T>*);                 \
    template Tensor<T> dropout_forward(const Tensor<T>&, double, bool, Rng&, ForwardCache<T>*);                  \
    template Tensor<T> softmax(const Tensor<T>&);                                                                \
    template SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>&, std::size_t, ForwardCache<T>*);              \
    template SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::size_t>,                \
                                                  ForwardCache<T>*);                                             \
    template Gradients<T> backward(const LayerSpec&, const ForwardCache<T>&, const Tensor<T>&,                   \
                                   const LayerParams<T>*);                                                       \
    template LayerParams<T> init_params(const LayerSpec&, InitScheme, Rng&);                                     \
    template void optimizer_step(std::span<Tensor<T>* const>, std::span<const Tensor<T>* const>, OptimizerState<T>&, \
                                 const OptimizerConfig&);

DCDM_INSTANTIATE_LAYERS(float)
DCDM_INSTANTIATE_LAYERS(double)

}  // namespace dcdm
