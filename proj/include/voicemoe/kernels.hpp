#pragma once

#include <cstdint>

// Dense numeric kernels behind the autodiff ops.
//
// The functions in voicemoe::kernels parallelize their outer (row / batch)
// loop with OpenMP. Every output element is produced by exactly one thread
// with a fixed inner summation order, so results are bit-identical for any
// thread count. voicemoe::kernels::serial holds single-threaded reference
// twins with the same loop bodies; the test suite checks the pairs for exact
// equality and tools/bench_kernels compares their throughput.
//
// Naming: nn = A·B, nt = A·Bᵀ, tn = Aᵀ·B; the _acc suffix accumulates into
// the output instead of overwriting it (as the backward passes need).

namespace voicemoe::kernels {

// Parallelize only when the loop body amortizes the fork/join cost.
inline constexpr std::int64_t kOmpGrain = 16 * 1024;

// C[m×n] = A[m×k] · B[k×n]
void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

// C[m×k] += A[m×n] · B[k×n]ᵀ   (dA = dC · Bᵀ with dC[m×n], B[k×n])
void matmul_nt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t n, std::int64_t k);

// C[k×n] += A[m×k]ᵀ · B[m×n]   (dB = Aᵀ · dC with A[m×k], dC[m×n])
void matmul_tn_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);

// Batched products over leading dimension `batch`:
// C[b] = A[b][m×k] · B[b][k×n]
void bmm_nn(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n);
// C[b] = A[b][m×k] · B[b][n×k]ᵀ
void bmm_nt(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n);
// C[b][m×k] += A[b][m×n] · B[b][n×k]
void bmm_nn_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k);
// C[b][m×k] += A[b][m×n] · B[b][k×n]ᵀ
void bmm_nt_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k);
// C[b][n×k] += A[b][m×n]ᵀ · B[b][m×k]
void bmm_tn_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k);

// y[i,:] = softmax(x[i,:]) with per-row max subtraction.
void softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols);
// dx[i,:] += y[i,:] ∘ (dy[i,:] - <dy[i,:], y[i,:]>)
void softmax_rows_backward_acc(const double* y, const double* dy, double* dx,
                               std::int64_t rows, std::int64_t cols);

// y[i,:] = x[i,:] - logsumexp(x[i,:])
void log_softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols);
// dx[i,:] += dy[i,:] - exp(y[i,:]) * sum(dy[i,:])
void log_softmax_rows_backward_acc(const double* y, const double* dy, double* dx,
                                   std::int64_t rows, std::int64_t cols);

// y[i,:] = gain ∘ (x[i,:] - mean_i) * rstd_i + bias, rstd_i = 1/sqrt(var_i + eps).
// mean / rstd are saved per row for the backward pass.
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* mean, double* rstd,
                     std::int64_t rows, std::int64_t cols);
void layer_norm_rows_backward_acc(const double* x, const double* gain,
                                  const double* mean, const double* rstd,
                                  const double* dy, double* dx, double* dgain,
                                  double* dbias, std::int64_t rows, std::int64_t cols);

// y[i,:] = x[i,:] + bias
void add_bias_rows(const double* x, const double* bias, double* y,
                   std::int64_t rows, std::int64_t cols);
// dbias[j] += sum_i dy[i,j]
void bias_backward_acc(const double* dy, double* dbias,
                       std::int64_t rows, std::int64_t cols);

namespace serial {

void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);
void matmul_nt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t n, std::int64_t k);
void matmul_tn_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);
void bmm_nn(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n);
void bmm_nt(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n);
void softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols);
void log_softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols);
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* mean, double* rstd,
                     std::int64_t rows, std::int64_t cols);

}  // namespace serial

}  // namespace voicemoe::kernels
