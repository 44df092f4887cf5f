#include "voicemoe/kernels.hpp"

#include <cmath>

namespace voicemoe::kernels {

namespace {

// Shared loop bodies. The parallel entry points and serial twins both call
// these per-row helpers so the per-element arithmetic order is identical.

inline void matmul_nn_row(const double* a, const double* b, double* c,
                          std::int64_t i, std::int64_t k, std::int64_t n) {
  double* ci = c + i * n;
  for (std::int64_t j = 0; j < n; ++j) ci[j] = 0.0;
  const double* ai = a + i * k;
  for (std::int64_t p = 0; p < k; ++p) {
    const double aip = ai[p];
    const double* bp = b + p * n;
    for (std::int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
  }
}

inline void matmul_nt_acc_row(const double* a, const double* b, double* c,
                              std::int64_t i, std::int64_t n, std::int64_t k) {
  const double* ai = a + i * n;
  double* ci = c + i * k;
  for (std::int64_t j = 0; j < k; ++j) {
    const double* bj = b + j * n;
    double s = 0.0;
    for (std::int64_t p = 0; p < n; ++p) s += ai[p] * bj[p];
    ci[j] += s;
  }
}

inline void matmul_tn_acc_row(const double* a, const double* b, double* c,
                              std::int64_t i, std::int64_t m, std::int64_t k,
                              std::int64_t n) {
  // row i of C[k×n]: C[i,:] += sum_r A[r,i] * B[r,:]
  double* ci = c + i * n;
  for (std::int64_t r = 0; r < m; ++r) {
    const double ari = a[r * k + i];
    const double* br = b + r * n;
    for (std::int64_t j = 0; j < n; ++j) ci[j] += ari * br[j];
  }
}

inline void softmax_row(const double* x, double* y, std::int64_t cols) {
  double mx = x[0];
  for (std::int64_t j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const double inv = 1.0 / sum;
  for (std::int64_t j = 0; j < cols; ++j) y[j] *= inv;
}

inline void log_softmax_row(const double* x, double* y, std::int64_t cols) {
  double mx = x[0];
  for (std::int64_t j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
  const double lse = mx + std::log(sum);
  for (std::int64_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
}

inline void layer_norm_row(const double* x, const double* gain, const double* bias,
                           double eps, double* y, double* mean, double* rstd,
                           std::int64_t cols) {
  double mu = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) mu += x[j];
  mu /= static_cast<double>(cols);
  double var = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) {
    const double d = x[j] - mu;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  const double rs = 1.0 / std::sqrt(var + eps);
  *mean = mu;
  *rstd = rs;
  for (std::int64_t j = 0; j < cols; ++j) y[j] = gain[j] * (x[j] - mu) * rs + bias[j];
}

}  // namespace

void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > kOmpGrain)
  for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t n, std::int64_t k) {
#pragma omp parallel for schedule(static) if (m * k * n > kOmpGrain)
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_acc_row(a, b, c, i, n, k);
}

void matmul_tn_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > kOmpGrain)
  for (std::int64_t i = 0; i < k; ++i) matmul_tn_acc_row(a, b, c, i, m, k, n);
}

void bmm_nn(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (batch * m * k * n > kOmpGrain)
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * k;
    const double* bb = b + bi * k * n;
    double* cb = c + bi * m * n;
    for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(ab, bb, cb, i, k, n);
  }
}

void bmm_nt(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (batch * m * k * n > kOmpGrain)
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * k;
    const double* bb = b + bi * n * k;
    double* cb = c + bi * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double* ai = ab + i * k;
      double* ci = cb + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* bj = bb + j * k;
        double s = 0.0;
        for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] = s;
      }
    }
  }
}

void bmm_nn_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k) {
#pragma omp parallel for schedule(static) if (batch * m * k * n > kOmpGrain)
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * n;
    const double* bb = b + bi * n * k;
    double* cb = c + bi * m * k;
    for (std::int64_t i = 0; i < m; ++i) {
      const double* ai = ab + i * n;
      double* ci = cb + i * k;
      for (std::int64_t p = 0; p < n; ++p) {
        const double aip = ai[p];
        const double* bp = bb + p * k;
        for (std::int64_t j = 0; j < k; ++j) ci[j] += aip * bp[j];
      }
    }
  }
}

void bmm_nt_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k) {
#pragma omp parallel for schedule(static) if (batch * m * k * n > kOmpGrain)
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * n;
    const double* bb = b + bi * k * n;
    double* cb = c + bi * m * k;
    for (std::int64_t i = 0; i < m; ++i) matmul_nt_acc_row(ab, bb, cb, i, n, k);
  }
}

void bmm_tn_acc(const double* a, const double* b, double* c,
                std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k) {
#pragma omp parallel for schedule(static) if (batch * m * k * n > kOmpGrain)
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * n;
    const double* bb = b + bi * m * k;
    double* cb = c + bi * n * k;
    for (std::int64_t i = 0; i < n; ++i) matmul_tn_acc_row(ab, bb, cb, i, m, n, k);
  }
}

void softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i) softmax_row(x + i * cols, y + i * cols, cols);
}

void softmax_rows_backward_acc(const double* y, const double* dy, double* dx,
                               std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* yi = y + i * cols;
    const double* di = dy + i * cols;
    double* xi = dx + i * cols;
    double dot = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) dot += di[j] * yi[j];
    for (std::int64_t j = 0; j < cols; ++j) xi[j] += yi[j] * (di[j] - dot);
  }
}

void log_softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i) log_softmax_row(x + i * cols, y + i * cols, cols);
}

void log_softmax_rows_backward_acc(const double* y, const double* dy, double* dx,
                                   std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* yi = y + i * cols;
    const double* di = dy + i * cols;
    double* xi = dx + i * cols;
    double sum = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) sum += di[j];
    for (std::int64_t j = 0; j < cols; ++j) xi[j] += di[j] - std::exp(yi[j]) * sum;
  }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* mean, double* rstd,
                     std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i)
    layer_norm_row(x + i * cols, gain, bias, eps, y + i * cols, mean + i, rstd + i, cols);
}

void layer_norm_rows_backward_acc(const double* x, const double* gain,
                                  const double* mean, const double* rstd,
                                  const double* dy, double* dx, double* dgain,
                                  double* dbias, std::int64_t rows, std::int64_t cols) {
  // dx rows are independent; dgain/dbias are column reductions done in a
  // second pass so no two threads write the same element.
  if (dx != nullptr) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* xi = x + i * cols;
      const double* di = dy + i * cols;
      double* oi = dx + i * cols;
      const double mu = mean[i];
      const double rs = rstd[i];
      // dL/dxhat_j = dy_j * gain_j; with xhat = (x - mu) * rs:
      // dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat ∘ xhat))
      double s1 = 0.0, s2 = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) {
        const double dxh = di[j] * gain[j];
        const double xh = (xi[j] - mu) * rs;
        s1 += dxh;
        s2 += dxh * xh;
      }
      s1 /= static_cast<double>(cols);
      s2 /= static_cast<double>(cols);
      for (std::int64_t j = 0; j < cols; ++j) {
        const double dxh = di[j] * gain[j];
        const double xh = (xi[j] - mu) * rs;
        oi[j] += rs * (dxh - s1 - xh * s2);
      }
    }
  }
  if (dgain != nullptr || dbias != nullptr) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
    for (std::int64_t j = 0; j < cols; ++j) {
      double sg = 0.0, sb = 0.0;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double d = dy[i * cols + j];
        sg += d * (x[i * cols + j] - mean[i]) * rstd[i];
        sb += d;
      }
      if (dgain != nullptr) dgain[j] += sg;
      if (dbias != nullptr) dbias[j] += sb;
    }
  }
}

void add_bias_rows(const double* x, const double* bias, double* y,
                   std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double* yi = y + i * cols;
    for (std::int64_t j = 0; j < cols; ++j) yi[j] = xi[j] + bias[j];
  }
}

void bias_backward_acc(const double* dy, double* dbias,
                       std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kOmpGrain)
  for (std::int64_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) s += dy[i * cols + j];
    dbias[j] += s;
  }
}

namespace serial {

void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_acc_row(a, b, c, i, n, k);
}

void matmul_tn_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < k; ++i) matmul_tn_acc_row(a, b, c, i, m, k, n);
}

void bmm_nn(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t bi = 0; bi < batch; ++bi)
    for (std::int64_t i = 0; i < m; ++i)
      matmul_nn_row(a + bi * m * k, b + bi * k * n, c + bi * m * n, i, k, n);
}

void bmm_nt(const double* a, const double* b, double* c,
            std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = a + bi * m * k;
    const double* bb = b + bi * n * k;
    double* cb = c + bi * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double* ai = ab + i * k;
      double* ci = cb + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* bj = bb + j * k;
        double s = 0.0;
        for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] = s;
      }
    }
  }
}

void softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i) softmax_row(x + i * cols, y + i * cols, cols);
}

void log_softmax_rows(const double* x, double* y, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i) log_softmax_row(x + i * cols, y + i * cols, cols);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* mean, double* rstd,
                     std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i)
    layer_norm_row(x + i * cols, gain, bias, eps, y + i * cols, mean + i, rstd + i, cols);
}

}  // namespace serial

}  // namespace voicemoe::kernels
