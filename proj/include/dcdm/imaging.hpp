#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcdm/tensor.hpp"

namespace dcdm {

/// 8-bit RGB raster, row-major, three bytes per pixel.
struct ImageBuffer {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    ImageBuffer() = default;
    ImageBuffer(std::size_t w, std::size_t h, std::uint8_t fill = 0);

    bool empty() const { return width == 0 || height == 0; }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

enum class ImageFormat { Unknown, Png, Jpeg, Pnm };

std::string to_string(ImageFormat format);

/// Guess the container from magic bytes.
ImageFormat sniff_format(std::span<const std::uint8_t> bytes);

/// PNG, JPEG or PPM/PGM (P2, P3, P5, P6). Grayscale is replicated into RGB,
/// alpha is dropped. Throws DecodeError naming the format on failure.
ImageBuffer decode_image(std::span<const std::uint8_t> bytes);
ImageBuffer read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const ImageBuffer& img);
std::vector<std::uint8_t> encode_ppm(const ImageBuffer& img);
void write_png(const ImageBuffer& img, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Bilinear resample with half-pixel centers. Same size in, same image out.
ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t height, std::size_t width);

/// Plain (aspect-ignoring) resize to the network input size.
ImageBuffer register_image(const ImageBuffer& img, std::size_t height = 272, std::size_t width = 363);

enum class AugmentOp {
    HFlip,
    VFlip,
    Rotate,
    RotateNoPad,
    Blur,
    GaussianNoise,
    RandomContrast,
    RandomBright,
    RandomCrop,
    DeterministicCrop,
    ScaleProportional,
    ShearX,
    ShearY,
};

std::string to_string(AugmentOp op);
AugmentOp parse_augment_op(const std::string& name);
const std::vector<AugmentOp>& all_augment_ops();

struct AugmentSpec {
    AugmentOp op = AugmentOp::HFlip;
    double angle_deg = 0.0;      // rotate, rotate_no_pad
    double sigma = 10.0;         // gaussian_noise (0-255 units), blur (pixels)
    double factor = 1.0;         // contrast, brightness, scale_proportional
    double crop_fraction = 0.8;  // crops
    double shear = 0.0;          // shear_x, shear_y
    std::uint64_t seed = 0;      // noise, random_crop

    void validate() const;
};

/// Draws magnitudes for `op` from the default ranges: angle in [-30,30],
/// noise sigma 10, blur sigma 1, contrast/brightness/scale factor in
/// [0.7,1.3], crop fraction 0.8, shear in [-0.2,0.2].
AugmentSpec random_spec(AugmentOp op, std::uint64_t seed);

/// Output dimensions always equal the input dimensions.
ImageBuffer augment(const ImageBuffer& img, const AugmentSpec& spec);

/// [3,H,W] channels-first, values / 255.
template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img);

/// Inverse of to_tensor with rounding and clamping.
template <typename T>
ImageBuffer from_tensor(const Tensor<T>& t);

}  // namespace dcdm
