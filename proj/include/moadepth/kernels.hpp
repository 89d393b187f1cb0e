#pragma once

#include <cstdint>

namespace moadepth::kern {

// Dense numeric kernels behind the tensor library. Every kernel is written so
// each output element is computed by a fixed-order serial recurrence; the
// OpenMP entry points below only partition the independent-output loop, which
// makes them bit-identical to the serial reference for any thread count.
//
// kern::ref:: holds the plain serial loops. The tensor library calls the
// top-level (OpenMP) functions; tests assert ref == omp bitwise and
// tools/bench_kernels times the two against each other.

// C[M,N] = A[M,K] * B[K,N]
void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);
// C[M,N] = A[M,K] * B[N,K]^T
void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);
// C[M,N] = A[K,M]^T * B[K,N]
void matmul_tn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);

// Row-wise maps over a [rows, cols] matrix.
void softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                  const double* in, double* out);
void log_softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                      const double* in, double* out);
// y = (x - mean) / sqrt(var + eps); rstd (1/sqrt(var+eps)) is saved per row
// for the backward pass.
void layer_norm_rows(std::int64_t rows, std::int64_t cols, double eps,
                     const double* in, double* out, double* rstd);

// Row-wise backward kernels (grad wrt input given output + upstream grad).
void softmax_backward_rows(std::int64_t rows, std::int64_t cols, double tau,
                           const double* y, const double* gy, double* gx);
void log_softmax_backward_rows(std::int64_t rows, std::int64_t cols, double tau,
                               const double* y_softmax, const double* gy, double* gx);
void layer_norm_backward_rows(std::int64_t rows, std::int64_t cols,
                              const double* y, const double* rstd,
                              const double* gy, double* gx);

// Non-overlapping average pooling over the trailing two axes of [C,H,W].
void avg_pool2d(std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, const double* in, double* out);
// Bilinear upsampling (align_corners = false) over the trailing two axes.
void upsample_bilinear2d(std::int64_t c, std::int64_t in_h, std::int64_t in_w,
                         std::int64_t out_h, std::int64_t out_w,
                         const double* in, double* out);

// out[outer, inner] = sum_k in[outer, k, inner]
void reduce_sum_axis(std::int64_t outer, std::int64_t axis_n, std::int64_t inner,
                     const double* in, double* out);

namespace ref {
void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);
void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);
void matmul_tn(std::int64_t m, std::int64_t k, std::int64_t n,
               const double* a, const double* b, double* c);
void softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                  const double* in, double* out);
void log_softmax_rows(std::int64_t rows, std::int64_t cols, double tau,
                      const double* in, double* out);
void layer_norm_rows(std::int64_t rows, std::int64_t cols, double eps,
                     const double* in, double* out, double* rstd);
void avg_pool2d(std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, const double* in, double* out);
void upsample_bilinear2d(std::int64_t c, std::int64_t in_h, std::int64_t in_w,
                         std::int64_t out_h, std::int64_t out_w,
                         const double* in, double* out);
void reduce_sum_axis(std::int64_t outer, std::int64_t axis_n, std::int64_t inner,
                     const double* in, double* out);
}  // namespace ref

}  // namespace moadepth::kern
