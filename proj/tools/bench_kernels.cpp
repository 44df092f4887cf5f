// Compares the OpenMP kernels against their serial reference twins:
// wall time, speedup and the maximum absolute difference (which must be 0,
// since both variants run the same per-element arithmetic).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "voicemoe/kernels.hpp"
#include "voicemoe/rng.hpp"

namespace {

namespace k = voicemoe::kernels;

std::vector<double> random_vec(voicemoe::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double time_of(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const std::string& name, double serial_s, double parallel_s, double diff) {
  std::printf("%-28s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx   max|diff| %g\n",
              name.c_str(), serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s, diff);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP enabled, max threads = %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; both variants run serially\n");
#endif

  voicemoe::Rng rng(12345);
  const int reps = 20;

  {
    const std::int64_t m = 384, kk = 256, n = 256;
    const auto a = random_vec(rng, m * kk);
    const auto b = random_vec(rng, kk * n);
    std::vector<double> c_serial(m * n), c_omp(m * n);
    const double ts = time_of([&] { k::serial::matmul_nn(a.data(), b.data(), c_serial.data(), m, kk, n); }, reps);
    const double tp = time_of([&] { k::matmul_nn(a.data(), b.data(), c_omp.data(), m, kk, n); }, reps);
    report("matmul_nn 384x256x256", ts, tp, max_abs_diff(c_serial, c_omp));
  }

  {
    const std::int64_t batch = 256, m = 16, kk = 16, n = 16;
    const auto a = random_vec(rng, batch * m * kk);
    const auto b = random_vec(rng, batch * n * kk);
    std::vector<double> c_serial(batch * m * n), c_omp(batch * m * n);
    const double ts = time_of([&] { k::serial::bmm_nt(a.data(), b.data(), c_serial.data(), batch, m, kk, n); }, reps);
    const double tp = time_of([&] { k::bmm_nt(a.data(), b.data(), c_omp.data(), batch, m, kk, n); }, reps);
    report("bmm_nt 256x16x16x16", ts, tp, max_abs_diff(c_serial, c_omp));
  }

  {
    const std::int64_t rows = 16384, cols = 64;
    const auto x = random_vec(rng, rows * cols);
    std::vector<double> y_serial(rows * cols), y_omp(rows * cols);
    const double ts = time_of([&] { k::serial::softmax_rows(x.data(), y_serial.data(), rows, cols); }, reps);
    const double tp = time_of([&] { k::softmax_rows(x.data(), y_omp.data(), rows, cols); }, reps);
    report("softmax_rows 16384x64", ts, tp, max_abs_diff(y_serial, y_omp));
  }

  {
    const std::int64_t rows = 16384, cols = 64;
    const auto x = random_vec(rng, rows * cols);
    const auto gain = random_vec(rng, cols);
    const auto bias = random_vec(rng, cols);
    std::vector<double> y_serial(rows * cols), y_omp(rows * cols);
    std::vector<double> mean_s(rows), rstd_s(rows), mean_p(rows), rstd_p(rows);
    const double ts = time_of(
        [&] {
          k::serial::layer_norm_rows(x.data(), gain.data(), bias.data(), 1e-5, y_serial.data(),
                                     mean_s.data(), rstd_s.data(), rows, cols);
        },
        reps);
    const double tp = time_of(
        [&] {
          k::layer_norm_rows(x.data(), gain.data(), bias.data(), 1e-5, y_omp.data(),
                             mean_p.data(), rstd_p.data(), rows, cols);
        },
        reps);
    report("layer_norm_rows 16384x64", ts, tp, max_abs_diff(y_serial, y_omp));
  }

  return 0;
}
