#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dcdm/error.hpp"
#include "dcdm/imaging.hpp"

namespace dcdm {

namespace {

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Bilinear tap at pixel-index coordinates; neighbours outside the image read 0.
double sample_zero(const ImageBuffer& img, double sx, double sy, std::size_t c) {
    const double fx0 = std::floor(sx), fy0 = std::floor(sy);
    const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
    const double fx = sx - fx0, fy = sy - fy0;
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    auto px = [&](long x, long y) -> double {
        if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
        return img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
    };
    double v = (1.0 - fx) * (1.0 - fy) * px(x0, y0);
    if (fx != 0.0) v += fx * (1.0 - fy) * px(x0 + 1, y0);
    if (fy != 0.0) v += (1.0 - fx) * fy * px(x0, y0 + 1);
    if (fx != 0.0 && fy != 0.0) v += fx * fy * px(x0 + 1, y0 + 1);
    return v;
}

template <typename Map>
ImageBuffer warp(const ImageBuffer& img, Map&& inverse) {
    ImageBuffer out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            const auto [sx, sy] = inverse(static_cast<double>(x), static_cast<double>(y));
            if (sx <= -1.0 || sy <= -1.0 || sx >= static_cast<double>(img.width) ||
                sy >= static_cast<double>(img.height)) {
                continue;
            }
            for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = to_byte(sample_zero(img, sx, sy, c));
        }
    }
    return out;
}

// Exact values at multiples of 90 degrees so quarter turns are lossless.
std::pair<double, double> sin_cos_deg(double deg) {
    const double q = deg / 90.0;
    if (q == std::round(q)) {
        static const double s[4] = {0, 1, 0, -1};
        static const double c[4] = {1, 0, -1, 0};
        const long k = ((static_cast<long>(q) % 4) + 4) % 4;
        return {s[k], c[k]};
    }
    const double rad = deg * std::numbers::pi / 180.0;
    return {std::sin(rad), std::cos(rad)};
}

ImageBuffer rotate(const ImageBuffer& img, double deg) {
    const auto [s, c] = sin_cos_deg(deg);
    const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
    return warp(img, [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        return std::pair{cx + c * dx + s * dy, cy - s * dx + c * dy};
    });
}

ImageBuffer crop(const ImageBuffer& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    ImageBuffer out(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        const auto* src = &img.pixels[((y0 + y) * img.width + x0) * 3];
        std::copy(src, src + w * 3, &out.pixels[y * w * 3]);
    }
    return out;
}

// Largest axis-aligned rectangle inside a w x h rectangle rotated by deg,
// clipped to the original frame.
std::pair<std::size_t, std::size_t> inscribed_size(std::size_t w, std::size_t h, double deg) {
    const auto [s0, c0] = sin_cos_deg(deg);
    const double sa = std::abs(s0), ca = std::abs(c0);
    const double W = static_cast<double>(w), H = static_cast<double>(h);
    const bool wide = W >= H;
    const double longer = wide ? W : H, shorter = wide ? H : W;
    double wr, hr;
    if (shorter <= 2.0 * sa * ca * longer || std::abs(sa - ca) < 1e-10) {
        const double half = 0.5 * shorter;
        wr = wide ? half / sa : half / ca;
        hr = wide ? half / ca : half / sa;
    } else {
        const double cos2 = ca * ca - sa * sa;
        wr = (W * ca - H * sa) / cos2;
        hr = (H * ca - W * sa) / cos2;
    }
    auto fit = [](double v, std::size_t limit) {
        const double f = std::floor(v + 1e-9);
        return std::clamp<std::size_t>(f < 1.0 ? 1 : static_cast<std::size_t>(f), 1, limit);
    };
    return {fit(wr, w), fit(hr, h)};
}

ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    if (sigma == 0.0) return img;
    const double side = std::exp(-1.0 / (2.0 * sigma * sigma));
    const double k[3] = {side / (1.0 + 2.0 * side), 1.0 / (1.0 + 2.0 * side), side / (1.0 + 2.0 * side)};
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    std::vector<double> tmp(img.pixels.size());
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 0.0;
                for (long d = -1; d <= 1; ++d) {
                    const long xx = std::clamp(x + d, 0L, w - 1);
                    v += k[d + 1] * img.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(y), c);
                }
                tmp[(static_cast<std::size_t>(y * w + x)) * 3 + c] = v;
            }
        }
    }
    ImageBuffer out(img.width, img.height);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 0.0;
                for (long d = -1; d <= 1; ++d) {
                    const long yy = std::clamp(y + d, 0L, h - 1);
                    v += k[d + 1] * tmp[static_cast<std::size_t>(yy * w + x) * 3 + c];
                }
                out.pixels[static_cast<std::size_t>(y * w + x) * 3 + c] = to_byte(v);
            }
        }
    }
    return out;
}

ImageBuffer scale_proportional(const ImageBuffer& img, double factor) {
    const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(factor * img.width)));
    const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(factor * img.height)));
    const ImageBuffer scaled = resize_bilinear(img, sh, sw);
    const long ox = (static_cast<long>(sw) - static_cast<long>(img.width)) / 2;
    const long oy = (static_cast<long>(sh) - static_cast<long>(img.height)) / 2;
    ImageBuffer out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        const long sy = static_cast<long>(y) + oy;
        if (sy < 0 || sy >= static_cast<long>(sh)) continue;
        for (std::size_t x = 0; x < img.width; ++x) {
            const long sx = static_cast<long>(x) + ox;
            if (sx < 0 || sx >= static_cast<long>(sw)) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                out.at(x, y, c) = scaled.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), c);
            }
        }
    }
    return out;
}

std::size_t crop_side(double fraction, std::size_t side) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(side))), 1, side);
}

}  // namespace

ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t height, std::size_t width) {
    if (img.empty()) throw DataError("cannot resize an empty image");
    if (height == 0 || width == 0) throw DataError("resize target must be non-empty");
    if (height == img.height && width == img.width) return img;

    struct Tap {
        std::size_t i0, i1;
        double f;
    };
    auto taps = [](std::size_t out_n, std::size_t in_n) {
        std::vector<Tap> t(out_n);
        const double ratio = static_cast<double>(in_n) / static_cast<double>(out_n);
        for (std::size_t i = 0; i < out_n; ++i) {
            double s = (static_cast<double>(i) + 0.5) * ratio - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
            const std::size_t i0 = static_cast<std::size_t>(std::floor(s));
            t[i] = {i0, std::min(i0 + 1, in_n - 1), s - static_cast<double>(i0)};
        }
        return t;
    };
    const auto tx = taps(width, img.width);
    const auto ty = taps(height, img.height);
    ImageBuffer out(width, height);
    for (std::size_t y = 0; y < height; ++y) {
        const Tap& a = ty[y];
        for (std::size_t x = 0; x < width; ++x) {
            const Tap& b = tx[x];
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = (1.0 - b.f) * img.at(b.i0, a.i0, c) + b.f * img.at(b.i1, a.i0, c);
                const double bottom = (1.0 - b.f) * img.at(b.i0, a.i1, c) + b.f * img.at(b.i1, a.i1, c);
                out.at(x, y, c) = to_byte((1.0 - a.f) * top + a.f * bottom);
            }
        }
    }
    return out;
}

ImageBuffer register_image(const ImageBuffer& img, std::size_t height, std::size_t width) {
    return resize_bilinear(img, height, width);
}

std::string to_string(AugmentOp op) {
    switch (op) {
        case AugmentOp::HFlip: return "hflip";
        case AugmentOp::VFlip: return "vflip";
        case AugmentOp::Rotate: return "rotate";
        case AugmentOp::RotateNoPad: return "rotate_no_pad";
        case AugmentOp::Blur: return "blur";
        case AugmentOp::GaussianNoise: return "gaussian_noise";
        case AugmentOp::RandomContrast: return "random_contrast";
        case AugmentOp::RandomBright: return "random_bright";
        case AugmentOp::RandomCrop: return "random_crop";
        case AugmentOp::DeterministicCrop: return "deterministic_crop";
        case AugmentOp::ScaleProportional: return "scale_proportional";
        case AugmentOp::ShearX: return "shear_x";
        case AugmentOp::ShearY: return "shear_y";
    }
    return "?";
}

const std::vector<AugmentOp>& all_augment_ops() {
    static const std::vector<AugmentOp> ops = {
        AugmentOp::HFlip,          AugmentOp::VFlip,        AugmentOp::Rotate,           AugmentOp::RotateNoPad,
        AugmentOp::Blur,           AugmentOp::GaussianNoise, AugmentOp::RandomContrast,  AugmentOp::RandomBright,
        AugmentOp::RandomCrop,     AugmentOp::DeterministicCrop, AugmentOp::ScaleProportional, AugmentOp::ShearX,
        AugmentOp::ShearY,
    };
    return ops;
}

AugmentOp parse_augment_op(const std::string& name) {
    for (AugmentOp op : all_augment_ops())
        if (to_string(op) == name) return op;
    throw DataError("unknown augmentation op '" + name + "'");
}

void AugmentSpec::validate() const {
    auto bad = [&](const std::string& what) { throw DataError(to_string(op) + ": " + what); };
    switch (op) {
        case AugmentOp::Rotate:
        case AugmentOp::RotateNoPad:
            if (!(angle_deg >= -180.0 && angle_deg <= 180.0)) bad("angle must be in [-180,180]");
            break;
        case AugmentOp::Blur:
        case AugmentOp::GaussianNoise:
            if (!(sigma >= 0.0) || !std::isfinite(sigma)) bad("sigma must be >= 0");
            break;
        case AugmentOp::RandomContrast:
        case AugmentOp::RandomBright:
        case AugmentOp::ScaleProportional:
            if (!(factor > 0.0) || !std::isfinite(factor)) bad("factor must be > 0");
            break;
        case AugmentOp::RandomCrop:
        case AugmentOp::DeterministicCrop:
            if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) bad("crop fraction must be in (0,1]");
            break;
        case AugmentOp::ShearX:
        case AugmentOp::ShearY:
            if (!std::isfinite(shear)) bad("shear must be finite");
            break;
        default: break;
    }
}

AugmentSpec random_spec(AugmentOp op, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(-30.0, 30.0), factor(0.7, 1.3), shear(-0.2, 0.2);
    AugmentSpec s;
    s.op = op;
    s.angle_deg = angle(rng);
    s.factor = factor(rng);
    s.shear = shear(rng);
    s.sigma = op == AugmentOp::Blur ? 1.0 : 10.0;
    s.crop_fraction = 0.8;
    s.seed = rng();
    return s;
}

ImageBuffer augment(const ImageBuffer& img, const AugmentSpec& spec) {
    spec.validate();
    if (img.empty()) throw DataError("cannot augment an empty image");
    const std::size_t w = img.width, h = img.height;
    switch (spec.op) {
        case AugmentOp::HFlip: {
            ImageBuffer out(w, h);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(w - 1 - x, y, c);
            return out;
        }
        case AugmentOp::VFlip: {
            ImageBuffer out(w, h);
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(&img.pixels[(h - 1 - y) * w * 3], w * 3, &out.pixels[y * w * 3]);
            return out;
        }
        case AugmentOp::Rotate: return rotate(img, spec.angle_deg);
        case AugmentOp::RotateNoPad: {
            const ImageBuffer rotated = rotate(img, spec.angle_deg);
            const auto [cw, ch] = inscribed_size(w, h, spec.angle_deg);
            return resize_bilinear(crop(rotated, (w - cw) / 2, (h - ch) / 2, cw, ch), h, w);
        }
        case AugmentOp::Blur: return gaussian_blur(img, spec.sigma);
        case AugmentOp::GaussianNoise: {
            std::mt19937_64 rng(spec.seed);
            std::normal_distribution<double> noise(0.0, spec.sigma);
            ImageBuffer out(w, h);
            for (std::size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = to_byte(img.pixels[i] + noise(rng));
            return out;
        }
        case AugmentOp::RandomContrast: {
            double mean = 0.0;
            for (std::uint8_t v : img.pixels) mean += v;
            mean /= static_cast<double>(img.pixels.size());
            ImageBuffer out(w, h);
            for (std::size_t i = 0; i < img.pixels.size(); ++i) {
                out.pixels[i] = to_byte(mean + spec.factor * (img.pixels[i] - mean));
            }
            return out;
        }
        case AugmentOp::RandomBright: {
            const double offset = (spec.factor - 1.0) * 255.0;
            ImageBuffer out(w, h);
            for (std::size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = to_byte(img.pixels[i] + offset);
            return out;
        }
        case AugmentOp::RandomCrop:
        case AugmentOp::DeterministicCrop: {
            const std::size_t cw = crop_side(spec.crop_fraction, w), ch = crop_side(spec.crop_fraction, h);
            std::size_t x0 = (w - cw) / 2, y0 = (h - ch) / 2;
            if (spec.op == AugmentOp::RandomCrop) {
                std::mt19937_64 rng(spec.seed);
                x0 = std::uniform_int_distribution<std::size_t>(0, w - cw)(rng);
                y0 = std::uniform_int_distribution<std::size_t>(0, h - ch)(rng);
            }
            return resize_bilinear(crop(img, x0, y0, cw, ch), h, w);
        }
        case AugmentOp::ScaleProportional: return scale_proportional(img, spec.factor);
        case AugmentOp::ShearX: {
            const double cy = (static_cast<double>(h) - 1.0) / 2.0;
            return warp(img, [&](double x, double y) { return std::pair{x - spec.shear * (y - cy), y}; });
        }
        case AugmentOp::ShearY: {
            const double cx = (static_cast<double>(w) - 1.0) / 2.0;
            return warp(img, [&](double x, double y) { return std::pair{x, y - spec.shear * (x - cx)}; });
        }
    }
    throw DataError("unhandled augmentation op");
}

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img) {
    if (img.empty()) throw DataError("cannot convert an empty image");
    const std::size_t plane = img.width * img.height;
    Tensor<T> t(Shape{3, img.height, img.width});
    T* d = t.ptr();
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) d[c * plane + i] = static_cast<T>(img.pixels[i * 3 + c]) / T(255);
    return t;
}

template <typename T>
ImageBuffer from_tensor(const Tensor<T>& t) {
    if (t.rank() != 3 || (t.dim(0) != 3 && t.dim(0) != 1)) {
        throw ShapeError("from_tensor expects [3,H,W] or [1,H,W], got " + t.shape().to_string());
    }
    const std::size_t h = t.dim(1), w = t.dim(2), plane = w * h;
    ImageBuffer img(w, h);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = t.dim(0) == 3 ? c : 0;
            img.pixels[i * 3 + c] = to_byte(std::clamp<double>(t.ptr()[src * plane + i], 0.0, 1.0) * 255.0);
        }
    return img;
}

template Tensor<float> to_tensor<float>(const ImageBuffer&);
template Tensor<double> to_tensor<double>(const ImageBuffer&);
template ImageBuffer from_tensor<float>(const Tensor<float>&);
template ImageBuffer from_tensor<double>(const Tensor<double>&);

}  // namespace dcdm
