#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dcdm/error.hpp"

namespace dcdm {

enum class Precision : std::uint8_t { Single = 0, Double = 1 };

/// Dimensions of a dense row-major array, rank 1 to 4. A default-constructed
/// Shape has rank 0 and marks an unset tensor.
class Shape {
public:
    static constexpr std::size_t kMaxRank = 4;

    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims);
    explicit Shape(std::vector<std::size_t> dims);

    std::size_t rank() const { return dims_.size(); }
    std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t numel() const;

    std::string to_string() const;

    friend bool operator==(const Shape&, const Shape&) = default;

private:
    void validate() const;

    std::vector<std::size_t> dims_;
};

template <typename T>
class Tensor {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

public:
    using value_type = T;
    static constexpr Precision precision = std::is_same_v<T, float> ? Precision::Single : Precision::Double;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> data);

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }
    std::size_t rank() const { return shape_.rank(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Same data, new shape with the same element count.
    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Throws NumericError naming `what` if any element is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

// ---------------------------------------------------------------------------
// Threading. GEMM splits its output into fixed tiles and hands whole tiles to
// workers, so results are bitwise identical for any thread count.

/// Process-wide default worker count for kernels (initially 1).
void set_num_threads(int n);
/// Effective count on the calling thread: a ThreadScope override, else the default.
int num_threads();

/// Overrides the kernel worker count for the calling thread only.
class ThreadScope {
public:
    explicit ThreadScope(int n);
    ~ThreadScope();
    ThreadScope(const ThreadScope&) = delete;
    ThreadScope& operator=(const ThreadScope&) = delete;

private:
    int previous_;
};

// ---------------------------------------------------------------------------
// Kernels

/// C = op(A) * op(B), both 2-D. op transposes when the flag is set.
template <typename T>
Tensor<T> gemm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);

namespace kernels {

/// Raw GEMM on row-major buffers: C[m x n] (+)= op(A)[m x k] * op(B)[k x n].
/// lda/ldb are the row strides of A and B as stored.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, bool transpose_a, const T* b,
          std::size_t ldb, bool transpose_b, T* c, std::size_t ldc, bool accumulate);

/// 3x3 / stride 1 / pad 1 patch extraction of one [C,H,W] image into a
/// [C*9, H*W] column matrix.
template <typename T>
void im2col3x3(const T* x, std::size_t channels, std::size_t height, std::size_t width, T* cols);

/// Adjoint of im2col3x3: scatters columns back, accumulating into x.
template <typename T>
void col2im3x3(const T* cols, std::size_t channels, std::size_t height, std::size_t width, T* x);

}  // namespace kernels

/// x: [C,H,W] -> [(C*9), (H*W)]; out-of-bounds taps read zero.
template <typename T>
Tensor<T> im2col(const Tensor<T>& x);

/// Adjoint of im2col for an image of the given shape.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t channels, std::size_t height, std::size_t width);

enum class ElementwiseOp { Relu, Add, Scale, Clamp01 };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op);
template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op, T scalar);
template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op, const Tensor<T>& operand);

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return elementwise(x, ElementwiseOp::Relu); }
template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) { return elementwise(x, ElementwiseOp::Add, y); }
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) { return elementwise(x, ElementwiseOp::Scale, s); }
template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) { return elementwise(x, ElementwiseOp::Clamp01); }

}  // namespace dcdm
