/// Benchmarks the serial reference kernels against the OpenMP backend on the
/// shapes the training loop actually uses, and cross-checks their outputs.
/// Every kernel except reduce_sum must agree bitwise; reduce_sum uses a fixed
/// chunk decomposition and may differ in the last ulp.
///
/// Usage: bench_kernels [--n ELEMS] [--matmul-dim D] [--reps R] [--threads T]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "flowmix/kernels.hpp"
#include "flowmix/rng.hpp"

namespace {

using namespace flowmix;
namespace k = flowmix::kernels;
using Clock = std::chrono::steady_clock;

struct Bench {
  std::string name;
  std::size_t work; // element count, for context in the report
  std::function<void(bool openmp, double* out)> run;
  std::size_t out_size;
};

double time_best_us(const std::function<void()>& fn, int reps) {
  fn(); // warm up
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    fn();
    auto t1 = Clock::now();
    best = std::min(
        best, std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  return best;
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.0,
                               double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

} // namespace

int main(int argc, char** argv) {
  std::size_t n = 1 << 20;
  std::size_t md = 192;
  int reps = 5;
  int threads = 0;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto next = [&]() -> const char* {
      if (i + 1 >= argc) {
        std::fprintf(stderr, "missing value after %s\n", a.c_str());
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--n") n = std::strtoull(next(), nullptr, 10);
    else if (a == "--matmul-dim") md = std::strtoull(next(), nullptr, 10);
    else if (a == "--reps") reps = std::atoi(next());
    else if (a == "--threads") threads = std::atoi(next());
    else {
      std::fprintf(stderr,
                   "usage: bench_kernels [--n ELEMS] [--matmul-dim D] "
                   "[--reps R] [--threads T]\n");
      return a == "--help" || a == "-h" ? 0 : 2;
    }
  }
  if (threads > 0) k::set_max_threads(threads);

  Rng rng(20240817);
  std::vector<double> a = random_vec(n, rng);
  std::vector<double> b = random_vec(n, rng);
  std::vector<double> ma = random_vec(md * md, rng);
  std::vector<double> mb = random_vec(md * md, rng);
  const std::size_t rows = n / 64, cols = 64;
  const std::size_t pn = 512, pd = 16;
  std::vector<double> pa = random_vec(pn * pd, rng);
  std::vector<double> pb = random_vec(pn * pd, rng);

  std::vector<Bench> benches;
  benches.push_back({"map_unary exp", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::map_unary(k::Unary::exp, a.data(), out, n);
                       else k::serial::map_unary(k::Unary::exp, a.data(), out, n);
                     },
                     n});
  benches.push_back({"map_clamp", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::map_clamp(a.data(), out, n, -0.5, 0.5);
                       else k::serial::map_clamp(a.data(), out, n, -0.5, 0.5);
                     },
                     n});
  benches.push_back({"zip_binary mul", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::zip_binary(k::Binary::mul, a.data(), b.data(), out, n);
                       else k::serial::zip_binary(k::Binary::mul, a.data(), b.data(), out, n);
                     },
                     n});
  benches.push_back({"acc_scaled", n,
                     [&](bool omp, double* out) {
                       std::memset(out, 0, n * sizeof(double));
                       if (omp) k::openmp::acc_scaled(out, 0.25, a.data(), n);
                       else k::serial::acc_scaled(out, 0.25, a.data(), n);
                     },
                     n});
  benches.push_back({"reduce_sum", n,
                     [&](bool omp, double* out) {
                       out[0] = omp ? k::openmp::reduce_sum(a.data(), n)
                                    : k::serial::reduce_sum(a.data(), n);
                     },
                     1});
  benches.push_back({"matmul", md * md * md,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::matmul(ma.data(), mb.data(), out, md, md, md, false);
                       else k::serial::matmul(ma.data(), mb.data(), out, md, md, md, false);
                     },
                     md * md});
  benches.push_back({"matmul_at_b", md * md * md,
                     [&](bool omp, double* out) {
                       std::memset(out, 0, md * md * sizeof(double));
                       if (omp) k::openmp::matmul_at_b(ma.data(), mb.data(), out, md, md, md);
                       else k::serial::matmul_at_b(ma.data(), mb.data(), out, md, md, md);
                     },
                     md * md});
  benches.push_back({"matmul_a_bt", md * md * md,
                     [&](bool omp, double* out) {
                       std::memset(out, 0, md * md * sizeof(double));
                       if (omp) k::openmp::matmul_a_bt(ma.data(), mb.data(), out, md, md, md);
                       else k::serial::matmul_a_bt(ma.data(), mb.data(), out, md, md, md);
                     },
                     md * md});
  benches.push_back({"col_sum", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::col_sum(a.data(), out, rows, cols, false);
                       else k::serial::col_sum(a.data(), out, rows, cols, false);
                     },
                     cols});
  benches.push_back({"row_sum", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::row_sum(a.data(), out, rows, cols, false);
                       else k::serial::row_sum(a.data(), out, rows, cols, false);
                     },
                     rows});
  benches.push_back({"add_row_bcast", n,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::add_row_bcast(a.data(), b.data(), out, rows, cols);
                       else k::serial::add_row_bcast(a.data(), b.data(), out, rows, cols);
                     },
                     n});
  benches.push_back({"pairwise_sqdist", pn * pn * pd,
                     [&](bool omp, double* out) {
                       if (omp) k::openmp::pairwise_sqdist(pa.data(), pb.data(), out, pn, pn, pd);
                       else k::serial::pairwise_sqdist(pa.data(), pb.data(), out, pn, pn, pd);
                     },
                     pn * pn});

  std::printf("openmp compiled: %s, max threads: %d\n",
              k::openmp_compiled() ? "yes" : "no", k::max_threads());
  std::printf("%-16s %12s %12s %12s %9s %14s\n", "kernel", "work", "serial_us",
              "openmp_us", "speedup", "max_abs_diff");

  std::size_t scratch = 0;
  for (const auto& be : benches) scratch = std::max(scratch, be.out_size);
  std::vector<double> out_s(scratch), out_p(scratch);

  int mismatches = 0;
  for (const auto& be : benches) {
    be.run(false, out_s.data());
    be.run(true, out_p.data());
    double diff = 0.0;
    bool bit_equal = true;
    for (std::size_t i = 0; i < be.out_size; ++i) {
      diff = std::max(diff, std::fabs(out_s[i] - out_p[i]));
      if (std::memcmp(&out_s[i], &out_p[i], sizeof(double)) != 0)
        bit_equal = false;
    }
    // reduce_sum is allowed ulp-level drift from its chunked reduction
    double tol = be.name == "reduce_sum" ? 1e-9 * double(be.work) : 0.0;
    if (!bit_equal && diff > tol) ++mismatches;

    double ts = time_best_us([&] { be.run(false, out_s.data()); }, reps);
    double tp = time_best_us([&] { be.run(true, out_p.data()); }, reps);
    std::printf("%-16s %12zu %12.1f %12.1f %8.2fx %14g\n", be.name.c_str(),
                be.work, ts, tp, ts / tp, diff);
  }
  if (mismatches) {
    std::printf("FAILED: %d kernel(s) disagree between backends\n", mismatches);
    return 1;
  }
  std::printf("all kernels agree between backends\n");
  return 0;
}
