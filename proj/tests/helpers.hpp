#ifndef FLOWMIX_TEST_HELPERS_HPP
#define FLOWMIX_TEST_HELPERS_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace testutil {

/// Central-difference gradient of a scalar function.
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double fp = f(x);
    x[i] = keep - h;
    double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Central-difference Jacobian (row-major, m x n) of g: R^n -> R^m.
inline std::vector<double> fd_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& g,
    std::vector<double> x, std::size_t m, double h = 1e-6) {
  std::size_t n = x.size();
  std::vector<double> jac(m * n);
  for (std::size_t j = 0; j < n; ++j) {
    double keep = x[j];
    x[j] = keep + h;
    auto gp = g(x);
    x[j] = keep - h;
    auto gm = g(x);
    x[j] = keep;
    for (std::size_t i = 0; i < m; ++i)
      jac[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
  }
  return jac;
}

/// log|det A| of a dense n x n row-major matrix by partial-pivot elimination.
inline double log_abs_det(std::vector<double> a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::fabs(a[r * n + c]) > std::fabs(a[piv * n + c])) piv = r;
    if (piv != c)
      for (std::size_t j = 0; j < n; ++j)
        std::swap(a[c * n + j], a[piv * n + j]);
    double d = a[c * n + c];
    if (d == 0.0) throw std::runtime_error("log_abs_det: singular matrix");
    acc += std::log(std::fabs(d));
    for (std::size_t r = c + 1; r < n; ++r) {
      double f = a[r * n + c] / d;
      for (std::size_t j = c; j < n; ++j) a[r * n + j] -= f * a[c * n + j];
    }
  }
  return acc;
}

/// Scratch file that deletes itself when the test scope ends.
class TempFile {
 public:
  explicit TempFile(const std::string& stem, const std::string& contents = "") {
    path_ = (std::filesystem::temp_directory_path() /
             (stem + "." + std::to_string(counter_++)))
                .string();
    std::ofstream out(path_, std::ios::binary);
    out << contents;
  }
  ~TempFile() { std::remove(path_.c_str()); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  static inline int counter_ = 0;
};

/// Scratch directory, removed recursively on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& stem) {
    path_ = (std::filesystem::temp_directory_path() /
             (stem + "." + std::to_string(counter_++)))
                .string();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  static inline int counter_ = 0;
};

/// Drops the final comma-separated column of every line; used to compare
/// training logs while ignoring wall-clock timings.
inline std::string strip_last_column(const std::string& csv) {
  std::string out;
  out.reserve(csv.size());
  std::size_t pos = 0;
  while (pos < csv.size()) {
    std::size_t nl = csv.find('\n', pos);
    if (nl == std::string::npos) nl = csv.size();
    std::string line = csv.substr(pos, nl - pos);
    std::size_t comma = line.rfind(',');
    if (comma != std::string::npos) line.resize(comma);
    out += line;
    out += '\n';
    pos = nl + 1;
  }
  return out;
}

/// Self-contained diagonal-covariance Gaussian mixture fitted by classical
/// EM with exact M-steps. Written from the textbook formulas on purpose so
/// it shares no code with the library it checks.
struct GmmOracle {
  std::vector<double> pi;                // K
  std::vector<std::vector<double>> mu;   // K x d
  std::vector<std::vector<double>> sd;   // K x d, standard deviations

  std::size_t K() const { return pi.size(); }

  // log N(x_row; mu_k, diag(sd_k^2))
  double log_density(const double* x, std::size_t d, std::size_t k) const {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double r = (x[j] - mu[k][j]) / sd[k][j];
      acc += -0.5 * r * r - std::log(sd[k][j]) -
             0.5 * std::log(2.0 * 3.14159265358979323846);
    }
    return acc;
  }

  // one row of posteriors, log-sum-exp normalized
  std::vector<double> posterior_row(const double* x, std::size_t d) const {
    std::vector<double> s(K());
    for (std::size_t k = 0; k < K(); ++k)
      s[k] = std::log(pi[k]) + log_density(x, d, k);
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    double lse = mx + std::log(z);
    for (auto& v : s) v = std::exp(v - lse);
    return s;
  }

  double nll_per_dim(const std::vector<std::vector<double>>& x) const {
    std::size_t d = mu[0].size();
    double total = 0.0;
    for (const auto& row : x) {
      double mx = -1e300, z = 0.0;
      std::vector<double> s(K());
      for (std::size_t k = 0; k < K(); ++k) {
        s[k] = std::log(pi[k]) + log_density(row.data(), d, k);
        mx = std::max(mx, s[k]);
      }
      for (double v : s) z += std::exp(v - mx);
      total += mx + std::log(z);
    }
    return -total / (double(x.size()) * double(d));
  }

  /// Classical EM: E-step posteriors, exact M-step (weighted means and
  /// variances, prior = mean posterior). Variances floored at 1e-8.
  void fit(const std::vector<std::vector<double>>& x, int iters) {
    std::size_t n = x.size(), d = mu[0].size();
    for (int it = 0; it < iters; ++it) {
      std::vector<std::vector<double>> gamma(n);
      for (std::size_t i = 0; i < n; ++i)
        gamma[i] = posterior_row(x[i].data(), d);
      for (std::size_t k = 0; k < K(); ++k) {
        double nk = 0.0;
        for (std::size_t i = 0; i < n; ++i) nk += gamma[i][k];
        pi[k] = nk / double(n);
        for (std::size_t j = 0; j < d; ++j) {
          double m = 0.0;
          for (std::size_t i = 0; i < n; ++i) m += gamma[i][k] * x[i][j];
          m /= nk;
          double v = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            double r = x[i][j] - m;
            v += gamma[i][k] * r * r;
          }
          v = std::max(v / nk, 1e-8);
          mu[k][j] = m;
          sd[k][j] = std::sqrt(v);
        }
      }
    }
  }
};

} // namespace testutil

#endif
