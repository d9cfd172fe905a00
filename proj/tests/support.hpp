#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "dcdm/imaging.hpp"
#include "dcdm/layers.hpp"
#include "dcdm/model.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "dcdm") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

// Class c gets its own base color and stripe orientation; `variant` moves the
// stripe phase and adds mild per-pixel noise so no two images are identical.
inline dcdm::ImageBuffer synthetic_leaf(std::size_t cls, std::size_t variant, std::size_t width, std::size_t height) {
    static const std::uint8_t palette[8][3] = {{40, 150, 40},  {170, 60, 40},  {60, 70, 170}, {180, 170, 50},
                                               {120, 40, 140}, {40, 160, 160}, {200, 120, 30}, {90, 90, 90}};
    const auto* base = palette[cls % 8];
    std::mt19937_64 rng(cls * 1000003u + variant);
    std::uniform_int_distribution<int> jitter(-12, 12);
    dcdm::ImageBuffer img(width, height);
    const std::size_t phase = variant % 7;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            std::size_t coord = 0;
            switch (cls % 4) {
                case 0: coord = x; break;
                case 1: coord = y; break;
                case 2: coord = x + y; break;
                default: coord = (x / 4 + y / 4) * 4; break;
            }
            const bool stripe = ((coord + phase) / 4) % 2 == 0;
            for (std::size_t c = 0; c < 3; ++c) {
                const int v = base[c] + (stripe ? 50 : -50) + jitter(rng);
                img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
            }
        }
    return img;
}

template <typename T>
dcdm::InMemorySamples<T> synthetic_samples(std::size_t classes, std::size_t per_class, dcdm::InputSize hw,
                                           std::size_t variant_offset = 0) {
    dcdm::InMemorySamples<T> out;
    for (std::size_t i = 0; i < per_class; ++i)
        for (std::size_t c = 0; c < classes; ++c)
            out.add(dcdm::to_tensor<T>(synthetic_leaf(c, variant_offset + i, hw.width, hw.height)), c);
    return out;
}

template <typename T>
dcdm::Tensor<T> random_tensor(dcdm::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    dcdm::Tensor<T> t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

// Values with magnitude at least `gap` away from zero, so ReLU kinks stay
// outside the finite-difference stencil.
inline dcdm::Tensor<double> away_from_zero(dcdm::Shape shape, std::mt19937_64& rng, double gap = 0.05) {
    dcdm::Tensor<double> t(shape);
    std::uniform_real_distribution<double> mag(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
    return t;
}

// Distinct values spaced by `gap` in random order, so every pooling window
// has a unique maximum that a small perturbation cannot change.
inline dcdm::Tensor<double> distinct_values(dcdm::Shape shape, std::mt19937_64& rng, double gap = 0.01) {
    dcdm::Tensor<double> t(shape);
    std::vector<std::size_t> order(t.numel());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const double offset = -gap * static_cast<double>(order.size()) / 2.0;
    for (std::size_t i = 0; i < order.size(); ++i) t[order[i]] = offset + gap * static_cast<double>(i);
    return t;
}

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

// Central differences of a scalar function over every element of `x`.
inline std::vector<double> numeric_gradient(dcdm::Tensor<double>& x, const std::function<double()>& f,
                                            double eps = 1e-5) {
    std::vector<double> g(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x[i];
        x[i] = saved + eps;
        const double up = f();
        x[i] = saved - eps;
        const double down = f();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

inline double max_relative_error(const dcdm::Tensor<double>& analytic, const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
    return worst;
}

inline double weighted_sum(const dcdm::Tensor<double>& y, const dcdm::Tensor<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
}

// Worst relative error between backward() and central differences for one
// random instance of the layer (input, and parameters when present). The
// probe loss is a random linear functional of the output, except for the
// softmax layer whose own cross-entropy is the loss.
inline double layer_gradient_error(dcdm::LayerKind kind, std::uint64_t seed, double eps = 1e-5) {
    using namespace dcdm;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> small(1, 3);
    const std::size_t batch = small(rng);

    LayerSpec spec;
    Tensor<double> x;
    std::optional<LayerParams<double>> params;
    switch (kind) {
        case LayerKind::Conv3x3: {
            const std::size_t cin = small(rng), cout = small(rng), h = 2 + small(rng), w = 2 + small(rng);
            spec = LayerSpec::conv3x3(cin, cout);
            x = random_tensor<double>(Shape{batch, cin, h, w}, rng);
            params = LayerParams<double>{random_tensor<double>(spec.weight_shape(), rng),
                                         random_tensor<double>(spec.bias_shape(), rng)};
            break;
        }
        case LayerKind::Dense: {
            const std::size_t in = 2 + small(rng) * 3, out = 1 + small(rng) * 2;
            spec = LayerSpec::dense(in, out);
            x = random_tensor<double>(Shape{batch, in}, rng);
            params = LayerParams<double>{random_tensor<double>(spec.weight_shape(), rng),
                                         random_tensor<double>(spec.bias_shape(), rng)};
            break;
        }
        case LayerKind::MaxPool2x2:
            spec = LayerSpec::maxpool2x2();
            x = distinct_values(Shape{batch, small(rng), 2 * small(rng) + (seed & 1), 2 * small(rng)}, rng);
            break;
        case LayerKind::Relu:
            spec = LayerSpec::relu();
            x = away_from_zero(Shape{batch, small(rng), 3, 4}, rng);
            break;
        case LayerKind::Flatten:
            spec = LayerSpec::flatten();
            x = random_tensor<double>(Shape{batch, small(rng), 3, 2}, rng);
            break;
        case LayerKind::Dropout:
            spec = LayerSpec::dropout(0.3);
            x = random_tensor<double>(Shape{batch, 10 + small(rng)}, rng);
            break;
        case LayerKind::Softmax: {
            spec = LayerSpec::softmax();
            x = random_tensor<double>(Shape{batch, 2 + small(rng) * 2}, rng, -3.0, 3.0);
            break;
        }
    }

    std::vector<std::size_t> targets;
    if (kind == LayerKind::Softmax) {
        std::uniform_int_distribution<std::size_t> pick(0, x.dim(1) - 1);
        for (std::size_t n = 0; n < batch; ++n) targets.push_back(pick(rng));
    }
    const std::uint64_t mask_seed = rng();

    auto run = [&](ForwardCache<double>* cache) -> Tensor<double> {
        switch (kind) {
            case LayerKind::Conv3x3: return conv3x3_forward(x, *params, cache);
            case LayerKind::Dense: return dense_forward(x, *params, cache);
            case LayerKind::MaxPool2x2: return maxpool2x2_forward(x, cache);
            case LayerKind::Relu: return relu_forward(x, cache);
            case LayerKind::Flatten: return flatten_forward(x, cache);
            case LayerKind::Dropout: {
                Rng mask_rng(mask_seed);
                return dropout_forward(x, spec.dropout_p, true, mask_rng, cache);
            }
            case LayerKind::Softmax: {
                const auto l = softmax_cross_entropy(x, targets, cache);
                return Tensor<double>(Shape{1}, std::vector<double>{l.loss});
            }
        }
        return {};
    };

    ForwardCache<double> cache;
    const Tensor<double> y = run(&cache);
    const Tensor<double> probe =
        kind == LayerKind::Softmax ? Tensor<double>(Shape{1}, 1.0) : random_tensor<double>(y.shape(), rng);
    const Gradients<double> g =
        backward(spec, cache, kind == LayerKind::Softmax ? Tensor<double>() : probe, params ? &*params : nullptr);
    auto loss = [&] { return weighted_sum(run(nullptr), probe); };

    double worst = max_relative_error(g.dx, numeric_gradient(x, loss, eps));
    if (params) {
        worst = std::max(worst, max_relative_error(g.dweights, numeric_gradient(params->weights, loss, eps)));
        worst = std::max(worst, max_relative_error(g.dbias, numeric_gradient(params->bias, loss, eps)));
    }
    return worst;
}

inline const std::vector<dcdm::LayerKind>& all_layer_kinds() {
    static const std::vector<dcdm::LayerKind> kinds = {
        dcdm::LayerKind::Conv3x3, dcdm::LayerKind::MaxPool2x2, dcdm::LayerKind::Relu,   dcdm::LayerKind::Flatten,
        dcdm::LayerKind::Dense,   dcdm::LayerKind::Dropout,    dcdm::LayerKind::Softmax};
    return kinds;
}

}  // namespace testsupport
