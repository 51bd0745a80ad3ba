#ifndef FLOWMIX_KERNELS_HPP
#define FLOWMIX_KERNELS_HPP

#include <cstddef>

namespace flowmix::kernels {

/// Which implementation the dispatching entry points use. The OpenMP backend
/// is selected by default when compiled in; results are identical for any
/// thread count (every output element is produced by exactly one thread with
/// a fixed accumulation order, and global reductions use a fixed chunk
/// decomposition).
enum class Backend { serial, openmp };

Backend active_backend();
void set_backend(Backend b);
bool openmp_compiled();

/// Caps OpenMP threads; also applied from FLOWMIX_THREADS on first use.
void set_max_threads(int n);
int max_threads();

enum class Unary { exp, log, tanh, abs, neg, square };
enum class Binary { add, sub, mul, div };

// Serial reference implementations. Plain loops, left-to-right accumulation.
namespace serial {

void map_unary(Unary op, const double* x, double* y, std::size_t n);
void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi);
void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n);
void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n);
void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n);

void acc_add(double* dst, const double* src, std::size_t n);
void acc_scaled(double* dst, double s, const double* src, std::size_t n);
void acc_mul(double* dst, const double* a, const double* b, std::size_t n);

double reduce_sum(const double* x, std::size_t n);

// c[m x n] (+)= a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate);
// c[k x n] += a^T * b with a[m x k], b[m x n]
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
// c[m x k] += a * b^T with a[m x n], b[k x n]
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);

void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate);
void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate);

// y[i,j] = m[i,j] op r[j], broadcast over rows
void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);
void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);

// d[i,j] = squared Euclidean distance between a-row i and b-row j
void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim);

} // namespace serial

// OpenMP implementations. Same element-level accumulation order as the serial
// reference wherever an output element has one: those match bitwise. The one
// exception is reduce_sum, which uses a fixed chunk decomposition (identical
// for every thread count) and so may differ from the serial reference in the
// last ulp.
namespace openmp {

void map_unary(Unary op, const double* x, double* y, std::size_t n);
void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi);
void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n);
void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n);
void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n);

void acc_add(double* dst, const double* src, std::size_t n);
void acc_scaled(double* dst, double s, const double* src, std::size_t n);
void acc_mul(double* dst, const double* a, const double* b, std::size_t n);

double reduce_sum(const double* x, std::size_t n);

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate);
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);

void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate);
void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate);

void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);
void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);

void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim);

} // namespace openmp

// Dispatching entry points used by the rest of the library.

void map_unary(Unary op, const double* x, double* y, std::size_t n);
void map_clamp(const double* x, double* y, std::size_t n, double lo, double hi);
void zip_binary(Binary op, const double* a, const double* b, double* y, std::size_t n);
void zip_scalar(Binary op, const double* a, double b, double* y, std::size_t n);
void zip_scalar_left(Binary op, double a, const double* b, double* y, std::size_t n);
void acc_add(double* dst, const double* src, std::size_t n);
void acc_scaled(double* dst, double s, const double* src, std::size_t n);
void acc_mul(double* dst, const double* a, const double* b, std::size_t n);
double reduce_sum(const double* x, std::size_t n);
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
void col_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate = false);
void row_sum(const double* m, double* out, std::size_t rows, std::size_t cols,
             bool accumulate = false);
void add_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);
void mul_row_bcast(const double* m, const double* r, double* y, std::size_t rows,
                   std::size_t cols);
void pairwise_sqdist(const double* a, const double* b, double* d, std::size_t na,
                     std::size_t nb, std::size_t dim);

} // namespace flowmix::kernels

#endif
