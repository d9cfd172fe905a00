#include <algorithm>

#include "dcdm/tensor.hpp"

namespace dcdm {
namespace kernels {

// Row (c*9 + ky*3 + kx) of the column matrix holds, for every output pixel
// (y, x), the input value at (c, y+ky-1, x+kx-1).
template <typename T>
void im2col3x3(const T* x, std::size_t channels, std::size_t height, std::size_t width, T* cols) {
    const std::size_t hw = height * width;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = x + c * hw;
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                T* row = cols + (c * 9 + ky * 3 + kx) * hw;
                for (std::size_t y = 0; y < height; ++y) {
                    T* out = row + y * width;
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
                        std::fill(out, out + width, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(sy) * width;
                    // kx == 0 reads x-1, kx == 2 reads x+1.
                    if (kx == 1) {
                        std::copy(src, src + width, out);
                    } else if (kx == 0) {
                        out[0] = T(0);
                        std::copy(src, src + width - 1, out + 1);
                    } else {
                        std::copy(src + 1, src + width, out);
                        out[width - 1] = T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im3x3(const T* cols, std::size_t channels, std::size_t height, std::size_t width, T* x) {
    const std::size_t hw = height * width;
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = x + c * hw;
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const T* row = cols + (c * 9 + ky * 3 + kx) * hw;
                for (std::size_t y = 0; y < height; ++y) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
                    T* dst = plane + static_cast<std::size_t>(sy) * width;
                    const T* in = row + y * width;
                    if (kx == 1) {
                        for (std::size_t i = 0; i < width; ++i) dst[i] += in[i];
                    } else if (kx == 0) {
                        for (std::size_t i = 1; i < width; ++i) dst[i - 1] += in[i];
                    } else {
                        for (std::size_t i = 0; i + 1 < width; ++i) dst[i + 1] += in[i];
                    }
                }
            }
        }
    }
}

template void im2col3x3(const float*, std::size_t, std::size_t, std::size_t, float*);
template void im2col3x3(const double*, std::size_t, std::size_t, std::size_t, double*);
template void col2im3x3(const float*, std::size_t, std::size_t, std::size_t, float*);
template void col2im3x3(const double*, std::size_t, std::size_t, std::size_t, double*);

}  // namespace kernels

template <typename T>
Tensor<T> im2col(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("im2col expects a [C,H,W] tensor, got " + x.shape().to_string());
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> cols(Shape{c * 9, h * w});
    kernels::im2col3x3(x.ptr(), c, h, w, cols.ptr());
    return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t channels, std::size_t height, std::size_t width) {
    if (cols.shape() != Shape{channels * 9, height * width}) {
        throw ShapeError("col2im: column matrix " + cols.shape().to_string() + " does not match image (" +
                         std::to_string(channels) + ", " + std::to_string(height) + ", " + std::to_string(width) +
                         ")");
    }
    Tensor<T> x(Shape{channels, height, width});
    kernels::col2im3x3(cols.ptr(), channels, height, width, x.ptr());
    return x;
}

template Tensor<float> im2col(const Tensor<float>&);
template Tensor<double> im2col(const Tensor<double>&);
template Tensor<float> col2im(const Tensor<float>&, std::size_t, std::size_t, std::size_t);
template Tensor<double> col2im(const Tensor<double>&, std::size_t, std::size_t, std::size_t);

}  // namespace dcdm
