#include "flowmix/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace flowmix::kernels {

namespace {

// Below this element count the parallel-for clause stays serial; spawning a
// team costs more than the loop.
constexpr std::size_t kParCutoff = 4096;

// reduce_sum splits the input into chunks of this size regardless of thread
// count, so the combine order is fixed.
constexpr std::size_t kChunk = 8192;

Backend g_backend =
#ifdef _OPENMP
    Backend::openmp;
#else
    Backend::serial;
#endif

int g_max_threads = 0; // 0 = library default
bool g_env_checked = false;

void ensure_env() {
  if (g_env_checked) return;
  g_env_checked = true;
  if (const char* s = std::getenv("FLOWMIX_THREADS")) {
    int n = std::atoi(s);
    if (n > 0) g_max_threads = n;
  }
}

inline double apply_unary(Unary op, double v) {
  switch (op) {
    case Unary::exp: return std::exp(v);
    case Unary::log: return std::log(v);
    case Unary::tanh: return std::tanh(v);
    case Unary::abs: return std::fabs(v);
    case Unary::neg: return -v;
    case Unary::square: return v * v;
  }
  return v;
}

inline double apply_binary(Binary op, double a, double b) {
  switch (op) {
    case Binary::add: return a + b;
    case Binary::sub: return a - b;
    case Binary::mul: return a * b;
    case Binary::div: return a / b;
  }
  return 0.0;
}

} // namespace

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
#ifndef _OPENMP
  (void)b;
  g_backend = Backend::serial;
#else
  g_backend = b;
#endif
}

bool openmp_compiled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

void set_max_threads(int n) {
  g_env_checked = true;
  g_max_threads = n > 0 ? n : 0;
}

int max_threads() {
  ensure_env();
#ifdef _OPENMP
  int hw = omp_get_max_threads();
  if (g_max_threads > 0 && g_max_threads < hw) return g_max_threads;
  return hw;
#else
  return 1;
#endif
}

namespace serial {

void map_unary(Unary op, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = apply_unary(op, x[i]);
}

void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi) {
  for (std::size_t i = 0; i < n; ++i) {
    double v = x[i];
    y[i] = v < lo ? lo : (v > hi ? hi : v);
  }
}

void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = apply_binary(op, a[i], b[i]);
}

void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = apply_binary(op, a[i], b);
}

void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = apply_binary(op, a, b[i]);
}

void acc_add(double* dst, const double* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

void acc_scaled(double* dst, double s, const double* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += s * src[i];
}

void acc_mul(double* dst, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

double reduce_sum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    double* cp = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = a[i * k + p];
      const double* bi = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
  if (!accumulate)
    for (std::size_t j = 0; j < cols; ++j) out[j] = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += m[i * cols + j];
    out[j] += s;
  }
}

void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* mi = m + i * cols;
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += mi[j];
    if (accumulate)
      out[i] += s;
    else
      out[i] = s;
  }
}

void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* mi = m + i * cols;
    double* yi = y + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = mi[j] + r[j];
  }
}

void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* mi = m + i * cols;
    double* yi = y + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = mi[j] * r[j];
  }
}

void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim) {
  for (std::size_t i = 0; i < na; ++i) {
    const double* ai = a + i * dim;
    double* di = d + i * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      const double* bj = b + j * dim;
      double s = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        double diff = ai[t] - bj[t];
        s += diff * diff;
      }
      di[j] = s;
    }
  }
}

} // namespace serial

namespace openmp {

namespace {
[[maybe_unused]] inline int team_size(std::size_t work) {
  if (work < kParCutoff) return 1;
  return max_threads();
}
} // namespace

void map_unary(Unary op, const double* x, double* y, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) y[i] = apply_unary(op, x[i]);
}

void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) {
    double v = x[i];
    y[i] = v < lo ? lo : (v > hi ? hi : v);
  }
}

void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) y[i] = apply_binary(op, a[i], b[i]);
}

void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) y[i] = apply_binary(op, a[i], b);
}

void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) y[i] = apply_binary(op, a, b[i]);
}

void acc_add(double* dst, const double* src, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) dst[i] += src[i];
}

void acc_scaled(double* dst, double s, const double* src, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) dst[i] += s * src[i];
}

void acc_mul(double* dst, const double* a, const double* b, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long i = 0; i < (long long)n; ++i) dst[i] += a[i] * b[i];
}

double reduce_sum(const double* x, std::size_t n) {
  if (n <= kChunk) return serial::reduce_sum(x, n);
  std::size_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(nchunks);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(n))
#endif
  for (long long c = 0; c < (long long)nchunks; ++c) {
    std::size_t lo = (std::size_t)c * kChunk;
    std::size_t hi = lo + kChunk < n ? lo + kChunk : n;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += x[i];
    partial[c] = s;
  }
  double s = 0.0;
  for (std::size_t c = 0; c < nchunks; ++c) s += partial[c];
  return s;
}

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(m* k* n))
#endif
  for (long long i = 0; i < (long long)m; ++i) {
    double* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(m* k* n))
#endif
  for (long long p = 0; p < (long long)k; ++p) {
    double* cp = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = a[i * k + p];
      const double* bi = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(m* k* n))
#endif
  for (long long i = 0; i < (long long)m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
  if (!accumulate)
    for (std::size_t j = 0; j < cols; ++j) out[j] = 0.0;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(rows* cols))
#endif
  for (long long j = 0; j < (long long)cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += m[i * cols + j];
    out[j] += s;
  }
}

void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(rows* cols))
#endif
  for (long long i = 0; i < (long long)rows; ++i) {
    const double* mi = m + i * cols;
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += mi[j];
    if (accumulate)
      out[i] += s;
    else
      out[i] = s;
  }
}

void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(rows* cols))
#endif
  for (long long i = 0; i < (long long)rows; ++i) {
    const double* mi = m + i * cols;
    double* yi = y + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = mi[j] + r[j];
  }
}

void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(rows* cols))
#endif
  for (long long i = 0; i < (long long)rows; ++i) {
    const double* mi = m + i * cols;
    double* yi = y + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = mi[j] * r[j];
  }
}

void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(team_size(na* nb* dim))
#endif
  for (long long i = 0; i < (long long)na; ++i) {
    const double* ai = a + i * dim;
    double* di = d + i * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      const double* bj = b + j * dim;
      double s = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        double diff = ai[t] - bj[t];
        s += diff * diff;
      }
      di[j] = s;
    }
  }
}

} // namespace openmp

#define FLOWMIX_DISPATCH(fn, ...)               \
  do {                                          \
    if (g_backend == Backend::openmp)           \
      openmp::fn(__VA_ARGS__);                  \
    else                                        \
      serial::fn(__VA_ARGS__);                  \
  } while (0)

void map_unary(Unary op, const double* x, double* y, std::size_t n) {
  FLOWMIX_DISPATCH(map_unary, op, x, y, n);
}
void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi) {
  FLOWMIX_DISPATCH(map_clamp, x, y, n, lo, hi);
}
void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n) {
  FLOWMIX_DISPATCH(zip_binary, op, a, b, y, n);
}
void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n) {
  FLOWMIX_DISPATCH(zip_scalar, op, a, b, y, n);
}
void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n) {
  FLOWMIX_DISPATCH(zip_scalar_left, op, a, b, y, n);
}
void acc_add(double* dst, const double* src, std::size_t n) {
  FLOWMIX_DISPATCH(acc_add, dst, src, n);
}
void acc_scaled(double* dst, double s, const double* src, std::size_t n) {
  FLOWMIX_DISPATCH(acc_scaled, dst, s, src, n);
}
void acc_mul(double* dst, const double* a, const double* b, std::size_t n) {
  FLOWMIX_DISPATCH(acc_mul, dst, a, b, n);
}
double reduce_sum(const double* x, std::size_t n) {
  return g_backend == Backend::openmp ? openmp::reduce_sum(x, n)
                                      : serial::reduce_sum(x, n);
}
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  FLOWMIX_DISPATCH(matmul, a, b, c, m, k, n, accumulate);
}
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  FLOWMIX_DISPATCH(matmul_at_b, a, b, c, m, k, n);
}
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  FLOWMIX_DISPATCH(matmul_a_bt, a, b, c, m, k, n);
}
void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
  FLOWMIX_DISPATCH(col_sum, m, out, rows, cols, accumulate);
}
void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate) {
  FLOWMIX_DISPATCH(row_sum, m, out, rows, cols, accumulate);
}
void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
  FLOWMIX_DISPATCH(add_row_bcast, m, r, y, rows, cols);
}
void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols) {
  FLOWMIX_DISPATCH(mul_row_bcast, m, r, y, rows, cols);
}
void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim) {
  FLOWMIX_DISPATCH(pairwise_sqdist, a, b, d, na, nb, dim);
}

} // namespace flowmix::kernels
