#include <png.h>
#include <jpeglib.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dcdm/error.hpp"
#include "dcdm/imaging.hpp"

namespace dcdm {

namespace {

constexpr std::size_t kMaxPixels = std::size_t{1} << 28;

void check_dims(std::size_t w, std::size_t h, const char* format) {
    if (w == 0 || h == 0) throw DecodeError(std::string(format) + ": image has zero size");
    if (w > kMaxPixels / h) throw DecodeError(std::string(format) + ": image dimensions too large");
}

// ---------------------------------------------------------------------------
// PNG

ImageBuffer decode_png(std::span<const std::uint8_t> bytes) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw DecodeError(std::string("PNG: ") + image.message);
    }
    check_dims(image.width, image.height, "PNG");
    image.format = PNG_FORMAT_RGBA;
    std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw DecodeError("PNG: " + msg);
    }
    if (image.warning_or_error != 0 && (image.warning_or_error & PNG_IMAGE_ERROR) != 0) {
        throw DecodeError(std::string("PNG: ") + image.message);
    }
    ImageBuffer out(image.width, image.height);
    for (std::size_t i = 0, n = out.width * out.height; i < n; ++i) {
        out.pixels[i * 3 + 0] = rgba[i * 4 + 0];
        out.pixels[i * 3 + 1] = rgba[i * 4 + 1];
        out.pixels[i * 3 + 2] = rgba[i * 4 + 2];
    }
    return out;
}

// ---------------------------------------------------------------------------
// JPEG

struct JpegError {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

// Corrupt-data warnings (e.g. premature end of data) are treated as errors so
// a truncated file never yields a half-gray image.
void jpeg_message(j_common_ptr cinfo, int level) {
    if (level < 0) jpeg_fail(cinfo);
}

// Only trivially destructible locals live between setjmp and longjmp here.
bool decode_jpeg_raw(const std::uint8_t* data, std::size_t size, std::vector<std::uint8_t>* out, std::size_t* w,
                     std::size_t* h, char* message) {
    jpeg_decompress_struct cinfo;
    JpegError err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_fail;
    err.mgr.emit_message = jpeg_message;
    if (setjmp(err.jump)) {
        std::strcpy(message, err.message);
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.jpeg_color_space == JCS_CMYK || cinfo.jpeg_color_space == JCS_YCCK) {
        std::strcpy(message, "CMYK images are not supported");
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    *w = cinfo.output_width;
    *h = cinfo.output_height;
    if (*w == 0 || *h == 0 || *w > kMaxPixels / *h) {
        std::strcpy(message, "image dimensions out of range");
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    out->resize(*w * *h * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out->data() + static_cast<std::size_t>(cinfo.output_scanline) * *w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;
}

ImageBuffer decode_jpeg(std::span<const std::uint8_t> bytes) {
    ImageBuffer out;
    char message[JMSG_LENGTH_MAX] = {0};
    if (!decode_jpeg_raw(bytes.data(), bytes.size(), &out.pixels, &out.width, &out.height, message)) {
        throw DecodeError(std::string("JPEG: ") + message);
    }
    return out;
}

// ---------------------------------------------------------------------------
// PPM / PGM

class PnmReader {
public:
    explicit PnmReader(std::span<const std::uint8_t> b) : bytes_(b) {}

    std::size_t pos() const { return pos_; }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = static_cast<char>(bytes_[pos_]);
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) throw DecodeError(std::string("PPM: expected ") + what);
        std::size_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_++] - '0');
            if (v > (std::size_t{1} << 32)) throw DecodeError(std::string("PPM: ") + what + " out of range");
        }
        return v;
    }

    void single_whitespace() {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw DecodeError("PPM: malformed header");
        ++pos_;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

ImageBuffer decode_pnm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P') throw DecodeError("PPM: bad magic");
    const char kind = static_cast<char>(bytes[1]);
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
        throw DecodeError(std::string("PPM: unsupported variant P") + kind);
    }
    const bool color = kind == '3' || kind == '6';
    const bool ascii = kind == '2' || kind == '3';
    PnmReader r(bytes.subspan(2));
    const std::size_t w = r.number("width");
    const std::size_t h = r.number("height");
    const std::size_t maxval = r.number("maxval");
    if (maxval == 0 || maxval > 65535) throw DecodeError("PPM: maxval out of range");
    check_dims(w, h, "PPM");

    const std::size_t channels = color ? 3 : 1;
    const std::size_t samples = w * h * channels;
    std::vector<std::size_t> values(samples);
    if (ascii) {
        for (auto& v : values) {
            v = r.number("sample");
            if (v > maxval) throw DecodeError("PPM: sample exceeds maxval");
        }
    } else {
        r.single_whitespace();
        const std::size_t width = maxval < 256 ? 1 : 2;
        const std::size_t start = 2 + r.pos();
        if (bytes.size() < start + samples * width) throw DecodeError("PPM: truncated pixel data");
        for (std::size_t i = 0; i < samples; ++i) {
            const std::uint8_t* p = bytes.data() + start + i * width;
            values[i] = width == 1 ? p[0] : (std::size_t{p[0]} << 8 | p[1]);
            if (values[i] > maxval) throw DecodeError("PPM: sample exceeds maxval");
        }
    }
    ImageBuffer out(w, h);
    auto scale = [&](std::size_t v) {
        return static_cast<std::uint8_t>(maxval == 255 ? v : (v * 255 + maxval / 2) / maxval);
    };
    for (std::size_t i = 0; i < w * h; ++i) {
        for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = scale(values[i * channels + (color ? c : 0)]);
    }
    return out;
}

}  // namespace

ImageBuffer::ImageBuffer(std::size_t w, std::size_t h, std::uint8_t fill) : width(w), height(h), pixels(w * h * 3, fill) {}

std::string to_string(ImageFormat format) {
    switch (format) {
        case ImageFormat::Png: return "PNG";
        case ImageFormat::Jpeg: return "JPEG";
        case ImageFormat::Pnm: return "PPM";
        default: return "unknown";
    }
}

ImageFormat sniff_format(std::span<const std::uint8_t> bytes) {
    static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return ImageFormat::Png;
    if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::Jpeg;
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '1' && bytes[1] <= '7') return ImageFormat::Pnm;
    return ImageFormat::Unknown;
}

ImageBuffer decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw DecodeError("empty image data");
    switch (sniff_format(bytes)) {
        case ImageFormat::Png: return decode_png(bytes);
        case ImageFormat::Jpeg: return decode_jpeg(bytes);
        case ImageFormat::Pnm: return decode_pnm(bytes);
        default: throw DecodeError("unrecognized image format (expected PNG, JPEG or PPM)");
    }
}

ImageBuffer read_image(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_image(bytes);
    } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const ImageBuffer& img) {
    if (img.empty()) throw DataError("cannot encode an empty image");
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encode: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encode: ") + image.message);
    }
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> encode_ppm(const ImageBuffer& img) {
    if (img.empty()) throw DataError("cannot encode an empty image");
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

void write_png(const ImageBuffer& img, const std::filesystem::path& path) {
    write_file_bytes(path, encode_png(img));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace dcdm
