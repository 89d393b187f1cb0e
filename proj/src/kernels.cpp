#include "moadepth/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace moadepth::kern {

namespace {

// Per-output-row bodies shared by the serial reference and the OpenMP entry
// points. Sharing one inlined body is what makes the two paths bit-identical:
// the accumulation order for any given output element never changes, only the
// assignment of rows to threads does.

inline void matmul_nn_row(std::int64_t i, std::int64_t k, std::int64_t n,
                          const double* a, const double* b, double* c) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    for (std::int64_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void matmul_nt_row(std::int64_t i, std::int64_t k, std::int64_t n,
                          const double* a, const double* b, double* c) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] = acc;
    }
}

// A is [k, m] here; C[i,j] = sum_p A[p,i] * B[p,j].
inline void matmul_tn_row(std::int64_t i, std::int64_t m, std::int64_t k, std::int64_t n,
                          const double* a, const double* b, double* c) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    for (std::int64_t p = 0; p < k; ++p) {
        const double av = a[p * m + i];
        const double* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void softmax_row(std::int64_t cols, double tau, const double* x, double* y) {
    double mx = x[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
        y[j] = std::exp((x[j] - mx) / tau);
        denom += y[j];
    }
    const double inv = 1.0 / denom;
    for (std::int64_t j = 0; j < cols; ++j) y[j] *= inv;
}

inline void log_softmax_row(std::int64_t cols, double tau, const double* x, double* y) {
    double mx = x[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) denom += std::exp((x[j] - mx) / tau);
    const double lse = std::log(denom);
    for (std::int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mx) / tau - lse;
}

inline void layer_norm_row(std::int64_t cols, double eps, const double* x,
                           double* y, double* rstd) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) mean += x[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
        const double d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(cols);
    const double r = 1.0 / std::sqrt(var + eps);
    *rstd = r;
    for (std::int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * r;
}

inline void softmax_backward_row(std::int64_t cols, double tau, const double* y,
                                 const double* gy, double* gx) {
    double dot = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
    for (std::int64_t j = 0; j < cols; ++j) gx[j] = y[j] * (gy[j] - dot) / tau;
}

inline void log_softmax_backward_row(std::int64_t cols, double tau, const double* sm,
                                     const double* gy, double* gx) {
    double gsum = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) gsum += gy[j];
    for (std::int64_t j = 0; j < cols; ++j) gx[j] = (gy[j] - sm[j] * gsum) / tau;
}

inline void layer_norm_backward_row(std::int64_t cols, const double* y, double rstd,
                                    const double* gy, double* gx) {
    double gmean = 0.0;
    double gymean = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
        gmean += gy[j];
        gymean += gy[j] * y[j];
    }
    gmean /= static_cast<double>(cols);
    gymean /= static_cast<double>(cols);
    for (std::int64_t j = 0; j < cols; ++j) {
        gx[j] = (gy[j] - gmean - y[j] * gymean) * rstd;
    }
}

inline void avg_pool2d_plane(std::int64_t ci, std::int64_t h, std::int64_t w,
                             std::int64_t kh, std::int64_t kw,
                             const double* in, double* out) {
    const std::int64_t oh = h / kh;
    const std::int64_t ow = w / kw;
    const double* src = in + ci * h * w;
    double* dst = out + ci * oh * ow;
    const double inv = 1.0 / static_cast<double>(kh * kw);
    for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            double acc = 0.0;
            for (std::int64_t dy = 0; dy < kh; ++dy) {
                const double* row = src + (oy * kh + dy) * w + ox * kw;
                for (std::int64_t dx = 0; dx < kw; ++dx) acc += row[dx];
            }
            dst[oy * ow + ox] = acc * inv;
        }
    }
}

struct BilinearTap {
    std::int64_t lo;
    std::int64_t hi;
    double w_hi;  // weight on hi; weight on lo is 1 - w_hi
};

inline BilinearTap bilinear_tap(std::int64_t out_i, std::int64_t in_n, std::int64_t out_n) {
    // align_corners = false convention.
    const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
    double src = (static_cast<double>(out_i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    double fl = std::floor(src);
    std::int64_t lo = static_cast<std::int64_t>(fl);
    if (lo > in_n - 1) lo = in_n - 1;
    std::int64_t hi = std::min<std::int64_t>(lo + 1, in_n - 1);
    return {lo, hi, src - fl};
}

inline void upsample_plane(std::int64_t ci, std::int64_t in_h, std::int64_t in_w,
                           std::int64_t out_h, std::int64_t out_w,
                           const double* in, double* out) {
    const double* src = in + ci * in_h * in_w;
    double* dst = out + ci * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const BilinearTap ty = bilinear_tap(oy, in_h, out_h);
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const BilinearTap tx = bilinear_tap(ox, in_w, out_w);
            const double v00 = src[ty.lo * in_w + tx.lo];
            const double v01 = src[ty.lo * in_w + tx.hi];
            const double v10 = src[ty.hi * in_w + tx.lo];
            const double v11 = src[ty.hi * in_w + tx.hi];
            const double top = v00 * (1.0 - tx.w_hi) + v01 * tx.w_hi;
            const double bot = v10 * (1.0 - tx.w_hi) + v11 * tx.w_hi;
            dst[oy * out_w + ox] = top * (1.0 - ty.w_hi) + bot * ty.w_hi;
        }
    }
}

inline void reduce_sum_elem(std::int64_t o, std::int64_t axis_n, std::int64_t inner,
                            const double* in, double* out) {
    const std::int64_t oi = o / inner;
    const std::int64_t ii = o % inner;
    const double* base = in + oi * axis_n * inner + ii;
    double acc = 0.0;
    for (std::int64_t p = 0; p < axis_n; ++p) acc += base[p * inner];
    out[o] = acc;
}


}  // namespace

// ---- OpenMP entry points --------------------------------------------------

// An `omp parallel for if(...)` region costs ~10us even when the condition is
// false, which dwarfs many of the small ops in a forward pass. Each entry
// point therefore branches explicitly and delegates small work to the serial
// reference, which also guarantees the two paths stay bit-identical.

constexpr std::int64_t kMatmulGrainFlops = 131072;  // m*n*k
constexpr std::int64_t kRowGrain = 8192;            // rows*cols
constexpr std::int64_t kMapGrain = 16384;           // output elements

void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    if (m * n * k < kMatmulGrainFlops) return ref::matmul_nn(m, k, n, a, b, c);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(i, k, n, a, b, c);
}

void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    // Row-dot accumulation is a serial reduction the compiler cannot widen.
    // Transposing B and running the nn body visits the same k-order per
    // output element, so the result is bit-identical to the reference dots
    // while the inner loop vectorizes.
    static thread_local std::vector<double> scratch;
    scratch.resize(static_cast<std::size_t>(k * n));
    double* bt = scratch.data();  // hoisted: workers must not touch their own TLS copy
    for (std::int64_t j = 0; j < n; ++j) {
        for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    }
    if (m * n * k < kMatmulGrainFlops) {
        for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(i, k, n, a, bt, c);
        return;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(i, k, n, a, bt, c);
}

void matmul_tn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    if (m * n * k < kMatmulGrainFlops) return ref::matmul_tn(m, k, n, a, b, c);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) matmul_tn_row(i, m, k, n, a, b, c);
}

void softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                  const double* in, double* out) {
    if (rows * cols < kRowGrain) return ref::softmax_rows(rows, cols, tau, in, out);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        softmax_row(cols, tau, in + r * cols, out + r * cols);
}

void log_softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                      const double* in, double* out) {
    if (rows * cols < kRowGrain) return ref::log_softmax_rows(rows, cols, tau, in, out);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        log_softmax_row(cols, tau, in + r * cols, out + r * cols);
}

void layer_norm_rows(std::int64_t rows, std::int64_t cols, double eps,
                     const double* in, double* out, double* rstd) {
    if (rows * cols < kRowGrain) return ref::layer_norm_rows(rows, cols, eps, in, out, rstd);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        layer_norm_row(cols, eps, in + r * cols, out + r * cols, rstd + r);
}

void softmax_backward_rows(std::int64_t rows, std::int64_t cols, double tau,
                           const double* y, const double* gy, double* gx) {
    if (rows * cols < kRowGrain) {
        for (std::int64_t r = 0; r < rows; ++r)
            softmax_backward_row(cols, tau, y + r * cols, gy + r * cols, gx + r * cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        softmax_backward_row(cols, tau, y + r * cols, gy + r * cols, gx + r * cols);
}

void log_softmax_backward_rows(std::int64_t rows, std::int64_t cols, double tau,
                               const double* y_softmax, const double* gy, double* gx) {
    if (rows * cols < kRowGrain) {
        for (std::int64_t r = 0; r < rows; ++r)
            log_softmax_backward_row(cols, tau, y_softmax + r * cols, gy + r * cols,
                                     gx + r * cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        log_softmax_backward_row(cols, tau, y_softmax + r * cols, gy + r * cols,
                                 gx + r * cols);
}

void layer_norm_backward_rows(std::int64_t rows, std::int64_t cols,
                              const double* y, const double* rstd,
                              const double* gy, double* gx) {
    if (rows * cols < kRowGrain) {
        for (std::int64_t r = 0; r < rows; ++r)
            layer_norm_backward_row(cols, y + r * cols, rstd[r], gy + r * cols,
                                    gx + r * cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r)
        layer_norm_backward_row(cols, y + r * cols, rstd[r], gy + r * cols, gx + r * cols);
}

void avg_pool2d(std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, const double* in, double* out) {
    if (c * h * w < kMapGrain) return ref::avg_pool2d(c, h, w, kh, kw, in, out);
#pragma omp parallel for schedule(static)
    for (std::int64_t ci = 0; ci < c; ++ci) avg_pool2d_plane(ci, h, w, kh, kw, in, out);
}

void upsample_bilinear2d(std::int64_t c, std::int64_t in_h, std::int64_t in_w,
                         std::int64_t out_h, std::int64_t out_w,
                         const double* in, double* out) {
    if (c * out_h * out_w < kMapGrain) {
        return ref::upsample_bilinear2d(c, in_h, in_w, out_h, out_w, in, out);
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t ci = 0; ci < c; ++ci)
        upsample_plane(ci, in_h, in_w, out_h, out_w, in, out);
}

void reduce_sum_axis(std::int64_t outer, std::int64_t axis_n, std::int64_t inner,
                     const double* in, double* out) {
    const std::int64_t total = outer * inner;
    if (total * axis_n < kMapGrain) return ref::reduce_sum_axis(outer, axis_n, inner, in, out);
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < total; ++o) reduce_sum_elem(o, axis_n, inner, in, out);
}

// ---- Serial reference ------------------------------------------------------

namespace ref {

void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(i, k, n, a, b, c);
}

void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    for (std::int64_t i = 0; i < m; ++i) matmul_nt_row(i, k, n, a, b, c);
}

void matmul_tn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c) {
    for (std::int64_t i = 0; i < m; ++i) matmul_tn_row(i, m, k, n, a, b, c);
}

void softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                  const double* in, double* out) {
    for (std::int64_t r = 0; r < rows; ++r)
        softmax_row(cols, tau, in + r * cols, out + r * cols);
}

void log_softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                      const double* in, double* out) {
    for (std::int64_t r = 0; r < rows; ++r)
        log_softmax_row(cols, tau, in + r * cols, out + r * cols);
}

void layer_norm_rows(std::int64_t rows, std::int64_t cols, double eps,
                     const double* in, double* out, double* rstd) {
    for (std::int64_t r = 0; r < rows; ++r)
        layer_norm_row(cols, eps, in + r * cols, out + r * cols, rstd + r);
}

void avg_pool2d(std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, const double* in, double* out) {
    for (std::int64_t ci = 0; ci < c; ++ci) avg_pool2d_plane(ci, h, w, kh, kw, in, out);
}

void upsample_bilinear2d(std::int64_t c, std::int64_t in_h, std::int64_t in_w,
                         std::int64_t out_h, std::int64_t out_w,
                         const double* in, double* out) {
    for (std::int64_t ci = 0; ci < c; ++ci)
        upsample_plane(ci, in_h, in_w, out_h, out_w, in, out);
}

void reduce_sum_axis(std::int64_t outer, std::int64_t axis_n, std::int64_t inner,
                     const double* in, double* out) {
    for (std::int64_t o = 0; o < outer * inner; ++o)
        reduce_sum_elem(o, axis_n, inner, in, out);
}

}  // namespace ref

}  // namespace moadepth::kern
