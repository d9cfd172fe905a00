#include <algorithm>
#include <vector>

#include <omp.h>

#include "dcdm/tensor.hpp"

namespace dcdm {
namespace {

// Register tile sizes. NR spans a whole number of vector registers so the
// inner loop of the micro-kernel vectorizes cleanly.
template <typename T>
struct Blocking;

template <>
struct Blocking<float> {
#if defined(__AVX512F__)
    static constexpr std::size_t kMR = 8, kNR = 32;
#else
    static constexpr std::size_t kMR = 6, kNR = 16;
#endif
    static constexpr std::size_t kMC = 96, kNC = 256, kKC = 512;
};

template <>
struct Blocking<double> {
#if defined(__AVX512F__)
    static constexpr std::size_t kMR = 8, kNR = 16;
#else
    static constexpr std::size_t kMR = 6, kNR = 8;
#endif
    static constexpr std::size_t kMC = 96, kNC = 256, kKC = 512;
};

template <typename T, std::size_t MR, std::size_t NR>
inline void micro_kernel(std::size_t kc, const T* __restrict a, const T* __restrict b, T* __restrict out) {
    // One register row is NR values split into vectors of kVec lanes.
    constexpr std::size_t kVecBytes = 64 >= NR * sizeof(T) ? NR * sizeof(T) : 64;
    constexpr std::size_t kVec = kVecBytes / sizeof(T);
    constexpr std::size_t kPerRow = NR / kVec;
    typedef T Vec __attribute__((vector_size(kVecBytes), aligned(sizeof(T))));

    Vec acc[MR][kPerRow];
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t v = 0; v < kPerRow; ++v) acc[i][v] = Vec{};
    for (std::size_t p = 0; p < kc; ++p) {
        const T* ap = a + p * MR;
        Vec bv[kPerRow];
        for (std::size_t v = 0; v < kPerRow; ++v) bv[v] = *reinterpret_cast<const Vec*>(b + p * NR + v * kVec);
        for (std::size_t i = 0; i < MR; ++i) {
            const T av = ap[i];
            for (std::size_t v = 0; v < kPerRow; ++v) acc[i][v] += av * bv[v];
        }
    }
    for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t v = 0; v < kPerRow; ++v) *reinterpret_cast<Vec*>(out + i * NR + v * kVec) = acc[i][v];
}

struct GemmArgs {
    std::size_t m, n, k;
    std::size_t lda, ldb, ldc;
    bool ta, tb, accumulate;
};

// Packs op(A)[i0:i0+mc, p0:p0+kc] into MR-row panels, zero-padding the tail.
template <typename T, std::size_t MR>
void pack_a(const T* a, const GemmArgs& g, std::size_t i0, std::size_t mc, std::size_t p0, std::size_t kc, T* buf) {
    for (std::size_t ir = 0; ir < mc; ir += MR) {
        const std::size_t rows = std::min(MR, mc - ir);
        for (std::size_t p = 0; p < kc; ++p) {
            for (std::size_t i = 0; i < MR; ++i) {
                T v = T(0);
                if (i < rows) {
                    const std::size_t r = i0 + ir + i, c = p0 + p;
                    v = g.ta ? a[c * g.lda + r] : a[r * g.lda + c];
                }
                *buf++ = v;
            }
        }
    }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into NR-column panels, zero-padding the tail.
template <typename T, std::size_t NR>
void pack_b(const T* b, const GemmArgs& g, std::size_t p0, std::size_t kc, std::size_t j0, std::size_t nc, T* buf) {
    for (std::size_t jr = 0; jr < nc; jr += NR) {
        const std::size_t cols = std::min(NR, nc - jr);
        for (std::size_t p = 0; p < kc; ++p) {
            const std::size_t r = p0 + p;
            if (!g.tb && cols == NR) {
                const T* src = b + r * g.ldb + j0 + jr;
                std::copy(src, src + NR, buf);
                buf += NR;
                continue;
            }
            for (std::size_t j = 0; j < NR; ++j) {
                T v = T(0);
                if (j < cols) {
                    const std::size_t c = j0 + jr + j;
                    v = g.tb ? b[c * g.ldb + r] : b[r * g.ldb + c];
                }
                *buf++ = v;
            }
        }
    }
}

template <typename T>
void gemm_tile(const T* a, const T* b, T* c, const GemmArgs& g, std::size_t i0, std::size_t mc, std::size_t j0,
               std::size_t nc, std::vector<T>& abuf, std::vector<T>& bbuf) {
    using B = Blocking<T>;
    constexpr std::size_t MR = B::kMR, NR = B::kNR;
    T out[MR * NR];

    for (std::size_t p0 = 0; p0 < g.k; p0 += B::kKC) {
        const std::size_t kc = std::min(B::kKC, g.k - p0);
        pack_a<T, MR>(a, g, i0, mc, p0, kc, abuf.data());
        pack_b<T, NR>(b, g, p0, kc, j0, nc, bbuf.data());
        const bool first = p0 == 0 && !g.accumulate;

        for (std::size_t jr = 0; jr < nc; jr += NR) {
            const std::size_t cols = std::min(NR, nc - jr);
            const T* bp = bbuf.data() + (jr / NR) * kc * NR;
            for (std::size_t ir = 0; ir < mc; ir += MR) {
                const std::size_t rows = std::min(MR, mc - ir);
                const T* ap = abuf.data() + (ir / MR) * kc * MR;
                micro_kernel<T, MR, NR>(kc, ap, bp, out);
                for (std::size_t i = 0; i < rows; ++i) {
                    T* crow = c + (i0 + ir + i) * g.ldc + j0 + jr;
                    const T* orow = out + i * NR;
                    if (first) {
                        for (std::size_t j = 0; j < cols; ++j) crow[j] = orow[j];
                    } else {
                        for (std::size_t j = 0; j < cols; ++j) crow[j] += orow[j];
                    }
                }
            }
        }
    }
}

}  // namespace

namespace kernels {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, bool transpose_a, const T* b,
          std::size_t ldb, bool transpose_b, T* c, std::size_t ldc, bool accumulate) {
    using B = Blocking<T>;
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate)
            for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
        return;
    }
    const GemmArgs g{m, n, k, lda, ldb, ldc, transpose_a, transpose_b, accumulate};
    const std::size_t row_tiles = (m + B::kMC - 1) / B::kMC;
    const std::size_t col_tiles = (n + B::kNC - 1) / B::kNC;
    const std::size_t tiles = row_tiles * col_tiles;
    const int threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(num_threads()), tiles));

    // Each output tile is owned by exactly one worker and reduced over K in a
    // fixed order, so the schedule never changes the arithmetic.
#pragma omp parallel num_threads(threads) if (threads > 1)
    {
        std::vector<T> abuf(B::kMC * B::kKC);
        std::vector<T> bbuf(B::kKC * ((B::kNC + B::kNR - 1) / B::kNR) * B::kNR);
#pragma omp for schedule(static)
        for (std::size_t t = 0; t < tiles; ++t) {
            const std::size_t i0 = (t / col_tiles) * B::kMC;
            const std::size_t j0 = (t % col_tiles) * B::kNC;
            gemm_tile(a, b, c, g, i0, std::min(B::kMC, m - i0), j0, std::min(B::kNC, n - j0), abuf, bbuf);
        }
    }
}

template void gemm(std::size_t, std::size_t, std::size_t, const float*, std::size_t, bool, const float*, std::size_t,
                   bool, float*, std::size_t, bool);
template void gemm(std::size_t, std::size_t, std::size_t, const double*, std::size_t, bool, const double*, std::size_t,
                   bool, double*, std::size_t, bool);

}  // namespace kernels

template <typename T>
Tensor<T> gemm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("gemm needs 2-D operands, got " + a.shape().to_string() + " and " + b.shape().to_string());
    }
    const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
    const std::size_t ka = transpose_a ? a.dim(0) : a.dim(1);
    const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    if (ka != kb) {
        throw ShapeError("gemm inner dimensions disagree: " + a.shape().to_string() + (transpose_a ? "^T" : "") +
                         " x " + b.shape().to_string() + (transpose_b ? "^T" : ""));
    }
    Tensor<T> c(Shape{m, n});
    kernels::gemm(m, n, ka, a.ptr(), a.dim(1), transpose_a, b.ptr(), b.dim(1), transpose_b, c.ptr(), n, false);
    check_finite(c, "gemm");
    return c;
}

template Tensor<float> gemm(const Tensor<float>&, const Tensor<float>&, bool, bool);
template Tensor<double> gemm(const Tensor<double>&, const Tensor<double>&, bool, bool);

}  // namespace dcdm
